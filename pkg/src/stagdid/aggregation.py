"""Weighting schemes that turn group-time effects into event-time and
aggregate estimands, and the tabular result container.

Cells are keyed by ``(g, t)`` tuples of ints throughout.
"""

from __future__ import annotations

import json
import math
import warnings
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import errors
from .panel import CohortMap

Cell = tuple[int, int]

SCHEMES = ("cs", "iw", "twostage", "custom")


@dataclass(frozen=True)
class WeightScheme:
    """Realized weights over cells; nonnegative and summing to one."""

    kind: str
    weights: Mapping[Cell, float]

    def __post_init__(self):
        w = np.array(list(self.weights.values()), dtype=float)
        if len(w) and (w < 0).any():
            raise ValueError("weights must be nonnegative")
        if len(w) and abs(w.sum() - 1) > 1e-9:
            raise ValueError(f"weights sum to {w.sum()}, not 1")

    @classmethod
    def custom(cls, weights: Mapping[Cell, float]) -> "WeightScheme":
        total = float(sum(weights.values()))
        return cls("custom", {c: v / total for c, v in weights.items()})

    def digest(self) -> str:
        return weights_digest(self.weights)


def weights_digest(weights: Mapping[Cell, float]) -> str:
    """Compact ``g:t=w;...`` rendering used in effect tables."""
    return ";".join(f"{g}:{t}={w:.6g}" for (g, t), w in sorted(weights.items()) if w != 0)


def parse_digest(text: str) -> dict[Cell, float]:
    out = {}
    if not isinstance(text, str) or not text:
        return out
    for part in text.split(";"):
        cell, w = part.split("=")
        g, t = cell.split(":")
        out[(int(g), int(t))] = float(w)
    return out


def _conditional_shares(cohorts: CohortMap, groups: Iterable[int]) -> dict[int, float]:
    groups = list(groups)
    total = sum(cohorts.counts[g] for g in groups)
    return {g: cohorts.counts[g] / total for g in groups}


def feasible_cohorts(cohorts: CohortMap, ell: int) -> list[int]:
    """Cohorts whose cell at event time ``ell`` lies within ``2..tbar``."""
    return [g for g in cohorts.support if 2 <= g + ell <= cohorts.tbar]


def weights_event_time(cohorts: CohortMap, ell: int, scheme: str = "cs") -> WeightScheme:
    """Cells ``(g, g+ell)`` weighted by the cohort share among feasible cohorts.

    The same conditional-share rule serves the group-time and the
    interaction-weighted event-time estimands.

    Raises
    ------
    NoFeasibleCohort
        No cohort has a cell at this event time.
    """
    groups = feasible_cohorts(cohorts, ell)
    if not groups:
        raise errors.NoFeasibleCohort(f"no cohort is observed at event time {ell}")
    shares = _conditional_shares(cohorts, groups)
    return WeightScheme(scheme, {(g, g + ell): shares[g] for g in groups})


def post_cells(cohorts: CohortMap) -> list[Cell]:
    return [(g, t) for g in cohorts.support for t in range(g, cohorts.tbar + 1)]


def weights_aggregate(cohorts: CohortMap, scheme: str = "cs",
                      counts: Mapping[Cell, float] | None = None) -> WeightScheme:
    """Aggregate weights over post-treatment cells.

    ``cs``: ``P(G=g | G <= tbar) / (tbar - g + 1)``, each cohort's mass spread
    evenly over its post cells. ``twostage``: proportional to the number of
    treated rows per cell (``counts`` when given, else cohort sizes).
    ``iw``: the simple average over event times ``0..tbar - min(G)`` of the
    event-time weights.
    """
    tbar = cohorts.tbar
    if scheme == "cs":
        shares = _conditional_shares(cohorts, cohorts.support)
        return WeightScheme("cs", {(g, t): shares[g] / (tbar - g + 1) for g, t in post_cells(cohorts)})
    if scheme == "twostage":
        raw = {c: float(counts[c]) if counts is not None else float(cohorts.counts[c[0]])
               for c in post_cells(cohorts) if counts is None or c in counts}
        total = sum(raw.values())
        return WeightScheme("twostage", {c: v / total for c, v in raw.items()})
    if scheme == "iw":
        ells = range(0, tbar - min(cohorts.support) + 1)
        acc: dict[Cell, float] = {}
        for ell in ells:
            for c, w in weights_event_time(cohorts, ell, "iw").weights.items():
                acc[c] = acc.get(c, 0.0) + w / len(ells)
        return WeightScheme("iw", acc)
    raise ValueError(f"unknown weight scheme {scheme!r}")


def aggregate(effects: Mapping[Cell, float], weights: WeightScheme | Mapping[Cell, float],
              strict: bool = False) -> tuple[float, dict[Cell, float], list[str]]:
    """Weighted sum of cell effects.

    Cells absent from ``effects`` or holding NaN are dropped and the remaining
    weights re-normalized, with a warning naming the dropped cells.

    Returns
    -------
    estimate, realized weights, warning messages

    Raises
    ------
    AllCellsMissing
        No weighted cell has an effect.
    MissingCell
        A cell is missing and ``strict`` is set.
    """
    w = weights.weights if isinstance(weights, WeightScheme) else weights
    present = {c: v for c, v in w.items() if v != 0 and c in effects and np.isfinite(effects[c])}
    dropped = sorted(c for c, v in w.items() if v != 0 and c not in present)
    if not present:
        raise errors.AllCellsMissing("no weighted cell has an estimate")
    msgs = []
    if dropped:
        if strict:
            raise errors.MissingCell(f"missing cells {dropped}")
        msg = "re-normalized weights; dropped missing cells " + ", ".join(f"({g},{t})" for g, t in dropped)
        msgs.append(msg)
        warnings.warn(msg, stacklevel=2)
    total = sum(present.values())
    realized = {c: v / total for c, v in present.items()}
    est = float(sum(realized[c] * effects[c] for c in realized))
    return est, realized, msgs


# ---------------------------------------------------------------- results


@dataclass
class PointEstimate:
    """One estimand from one method, before inference is attached.

    ``weights`` are the realized cell weights the estimate targets; applying
    them to the true effect surface gives the method's own-scheme truth.
    """

    estimate: float
    weights: dict[Cell, float] = field(default_factory=dict)
    n_treated: int = 0
    se: float = math.nan
    warnings: list[str] = field(default_factory=list)


@dataclass
class EffectRow:
    method: str
    estimand: str
    estimate: float
    se: float = math.nan
    ci_lo: float = math.nan
    ci_hi: float = math.nan
    n_treated: int = 0
    weights_digest: str = ""


EFFECT_COLUMNS = ["method", "estimand", "estimate", "se", "ci_lo", "ci_hi", "n_treated", "weights_digest"]


@dataclass
class EffectTable:
    rows: list[EffectRow] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    points: dict[str, PointEstimate] = field(default_factory=dict, repr=False)  # not serialized

    def add(self, row: EffectRow) -> None:
        if any(r.method == row.method and r.estimand == row.estimand for r in self.rows):
            raise ValueError(f"duplicate row for ({row.method}, {row.estimand})")
        self.rows.append(row)

    def get(self, method: str, estimand: str) -> EffectRow:
        for r in self.rows:
            if r.method == method and r.estimand == estimand:
                return r
        raise KeyError((method, estimand))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.rows], columns=EFFECT_COLUMNS)

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, lineterminator="\n", float_format="%.17g")

    def to_json(self) -> str:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v

        doc = {
            "rows": [{k: clean(v) for k, v in r.__dict__.items()} for r in self.rows],
            "warnings": list(self.warnings),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "EffectTable":
        rows = []
        for rec in frame.to_dict("records"):
            digest = rec.get("weights_digest")
            rec["weights_digest"] = digest if isinstance(digest, str) else ""
            rec["n_treated"] = int(rec["n_treated"])
            rows.append(EffectRow(**rec))
        return cls(rows)

    @classmethod
    def from_json(cls, text: str) -> "EffectTable":
        doc = json.loads(text)
        rows = [EffectRow(**{k: (math.nan if v is None else v) for k, v in r.items()}) for r in doc["rows"]]
        return cls(rows, doc.get("warnings", []))
