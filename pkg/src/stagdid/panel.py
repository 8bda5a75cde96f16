"""Balanced staggered-adoption panels: validation, cohorts and overlap checks.

The exchange format is long (one record per unit and period).  After
validation the panel is balanced by construction, so it is stored as
``(n_units, tbar)`` matrices, which is what every estimator consumes.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Callable, Hashable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from . import errors

NEVER = math.inf
"""Cohort label for never-treated units; compares greater than every period."""

ID_COLUMNS = ("unit_id", "cluster_id", "time", "y", "a")


@dataclass(frozen=True)
class PanelRecord:
    unit_id: Hashable
    cluster_id: Hashable
    time: int
    y: float
    a: int
    x: Mapping[str, Any] | Sequence[Any] = ()


@dataclass(frozen=True)
class CovariateMeta:
    name: str
    kind: str  # "continuous" | "binary" | "categorical"
    levels: tuple = ()


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Validated balanced panel.

    Attributes
    ----------
    unit_ids, cluster_ids : ndarray of shape (n,)
        Original identifiers, units sorted by ``(cluster_id, unit_id)``.
    cluster_codes : ndarray of int, shape (n,)
        Dense cluster index ``0..n_clusters-1`` in sorted cluster-id order.
    y : ndarray of shape (n, tbar)
        Outcomes; column ``t-1`` holds period ``t``.
    a : ndarray of int8, shape (n, tbar)
        Treatment indicators.
    x : tuple of ndarray
        One array per covariate. Categorical covariates hold integer codes
        into ``covariates[j].levels``.
    covariates : tuple of CovariateMeta
    """

    unit_ids: np.ndarray
    cluster_ids: np.ndarray
    cluster_codes: np.ndarray
    y: np.ndarray
    a: np.ndarray
    x: tuple = ()
    covariates: tuple = ()
    cluster_level_treatment: bool = True

    def __post_init__(self):
        for name in ("unit_ids", "cluster_ids", "cluster_codes", "y", "a"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        object.__setattr__(self, "x", tuple(_readonly(v) for v in self.x))

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def tbar(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return len(self.covariates)

    @property
    def n_clusters(self) -> int:
        return int(self.cluster_codes.max()) + 1 if self.n_units else 0

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    @property
    def cluster_index(self) -> dict:
        """Map cluster id to the positions of its units."""
        order = np.argsort(self.cluster_codes, kind="stable")
        bounds = np.searchsorted(self.cluster_codes[order], np.arange(self.n_clusters + 1))
        return {
            self.cluster_ids[order[bounds[c]]]: order[bounds[c]:bounds[c + 1]]
            for c in range(self.n_clusters)
        }

    def summary(self) -> dict:
        return {
            "n_units": self.n_units,
            "tbar": self.tbar,
            "p": self.p,
            "n_clusters": self.n_clusters,
            "covariates": [
                {"name": c.name, "kind": c.kind, "levels": list(c.levels)} for c in self.covariates
            ],
        }

    def covariate_frame(self) -> pd.DataFrame:
        cols = {}
        for meta, values in zip(self.covariates, self.x):
            if meta.kind == "categorical":
                cols[meta.name] = np.asarray(meta.levels, dtype=object)[values]
            else:
                cols[meta.name] = values
        return pd.DataFrame(cols)

    def to_frame(self) -> pd.DataFrame:
        """Long format, one row per unit and period, sorted by unit then time."""
        n, tbar = self.y.shape
        frame = pd.DataFrame(
            {
                "unit_id": np.repeat(self.unit_ids, tbar),
                "cluster_id": np.repeat(self.cluster_ids, tbar),
                "time": np.tile(np.arange(1, tbar + 1), n),
                "y": self.y.ravel(),
                "a": self.a.ravel().astype(int),
            }
        )
        cov = self.covariate_frame()
        for name in cov.columns:
            frame[name] = np.repeat(cov[name].to_numpy(), tbar)
        return frame

    def equals(self, other: "PanelDataset") -> bool:
        if not isinstance(other, PanelDataset):
            return False
        same = (
            self.covariates == other.covariates
            and self.y.shape == other.y.shape
            and np.array_equal(self.unit_ids, other.unit_ids)
            and np.array_equal(self.cluster_ids, other.cluster_ids)
            and np.array_equal(self.cluster_codes, other.cluster_codes)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.a, other.a)
        )
        return same and all(np.array_equal(u, v) for u, v in zip(self.x, other.x))

    def take(self, units: np.ndarray, cluster_codes: np.ndarray | None = None,
             unit_ids: np.ndarray | None = None,
             cluster_ids: np.ndarray | None = None) -> "PanelDataset":
        """Trusted row selection (units may repeat); used by resampling."""
        units = np.asarray(units)
        codes = self.cluster_codes[units] if cluster_codes is None else cluster_codes
        return PanelDataset(
            unit_ids=self.unit_ids[units] if unit_ids is None else unit_ids,
            cluster_ids=self.cluster_ids[units] if cluster_ids is None else cluster_ids,
            cluster_codes=codes,
            y=self.y[units],
            a=self.a[units],
            x=tuple(v[units] for v in self.x),
            covariates=self.covariates,
            cluster_level_treatment=self.cluster_level_treatment,
        )

    def with_outcome(self, y: np.ndarray) -> "PanelDataset":
        return PanelDataset(self.unit_ids, self.cluster_ids, self.cluster_codes, np.asarray(y, float),
                            self.a, self.x, self.covariates, self.cluster_level_treatment)

    def with_covariates(self, x: Sequence[np.ndarray], covariates: Sequence[CovariateMeta]) -> "PanelDataset":
        return PanelDataset(self.unit_ids, self.cluster_ids, self.cluster_codes, self.y, self.a,
                            tuple(x), tuple(covariates), self.cluster_level_treatment)


def _records_to_frame(records: Iterable[PanelRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        row = {"unit_id": r.unit_id, "cluster_id": r.cluster_id, "time": r.time, "y": r.y, "a": r.a}
        if isinstance(r.x, Mapping):
            row.update(r.x)
        else:
            row.update({f"x{j + 1}": v for j, v in enumerate(r.x)})
        rows.append(row)
    return pd.DataFrame(rows)


def _covariate_kind(series: pd.Series, categorical: bool) -> str:
    if categorical or not pd.api.types.is_numeric_dtype(series) or pd.api.types.is_bool_dtype(series):
        if pd.api.types.is_bool_dtype(series):
            return "binary"
        return "categorical"
    values = pd.unique(series)
    if set(np.asarray(values, dtype=float).tolist()) <= {0.0, 1.0}:
        return "binary"
    return "continuous"


def validate_panel(
    records: Iterable[PanelRecord] | pd.DataFrame,
    covariates: Sequence[str] | None = None,
    categorical: Sequence[str] = (),
    cluster_level_treatment: bool = True,
) -> PanelDataset:
    """Validate a long-format panel and build a :class:`PanelDataset`.

    Parameters
    ----------
    records : iterable of PanelRecord or DataFrame
        A frame needs the columns ``unit_id, cluster_id, time, y, a``; any other
        column is a covariate unless ``covariates`` lists them explicitly.
    categorical : sequence of str
        Covariates to treat as categorical even if numeric. Non-numeric
        columns are always categorical.
    cluster_level_treatment : bool
        Require treatment to be constant within cluster at each period.

    Raises
    ------
    UnbalancedPanel, TreatmentReversal, TreatedAtBaseline, CovariateDrift,
    MixedClusterTreatment, MissingValue, InvalidTime
    """
    frame = records.copy() if isinstance(records, pd.DataFrame) else _records_to_frame(records)
    if frame.empty:
        raise errors.PanelError("empty panel")
    missing = [c for c in ID_COLUMNS if c not in frame.columns]
    if missing:
        raise errors.PanelError(f"missing required columns: {missing}")
    if covariates is None:
        covariates = [c for c in frame.columns if c not in ID_COLUMNS]
    covariates = list(covariates)
    unknown = [c for c in list(covariates) + list(categorical) if c not in frame.columns]
    if unknown:
        raise errors.PanelError(f"unknown covariate columns: {unknown}")
    frame = frame[list(ID_COLUMNS) + covariates]
    if frame.isna().any().any():
        bad = frame.columns[frame.isna().any()].tolist()
        raise errors.MissingValue(f"missing cells in columns {bad}")

    time = pd.to_numeric(frame["time"], errors="coerce")
    if time.isna().any() or not np.all(time == np.round(time)):
        raise errors.InvalidTime("time must be integer-valued")
    time = time.astype(np.int64)
    tbar = int(time.max())
    if time.min() < 1 or tbar < 2:
        raise errors.InvalidTime("time must take values in 1..tbar with tbar >= 2")
    treat = pd.to_numeric(frame["a"], errors="coerce")
    if treat.isna().any() or not treat.isin([0, 1]).all():
        raise errors.PanelError("treatment column a must be binary 0/1")
    y = pd.to_numeric(frame["y"], errors="coerce")
    if y.isna().any() or not np.isfinite(y.to_numpy(float)).all():
        raise errors.MissingValue("outcome y must be finite numeric")

    frame = frame.assign(time=time, a=treat.astype(np.int8), y=y.astype(float))
    # first-appearance order of categorical levels, before any sorting
    kinds = {c: _covariate_kind(frame[c], c in categorical) for c in covariates}
    levels = {c: tuple(pd.unique(frame[c])) for c in covariates if kinds[c] == "categorical"}

    if frame.duplicated(["unit_id", "time"]).any():
        raise errors.UnbalancedPanel("duplicate (unit_id, time) records")
    per_unit = frame.groupby("unit_id", sort=False)["time"].size()
    if (per_unit != tbar).any():
        bad = per_unit.index[per_unit != tbar][:5].tolist()
        raise errors.UnbalancedPanel(f"units without exactly {tbar} periods, e.g. {bad}")

    unit_attrs = frame.groupby("unit_id", sort=False)
    if (unit_attrs["cluster_id"].nunique() > 1).any():
        raise errors.PanelError("cluster_id varies within unit")
    if covariates:
        drift = unit_attrs[covariates].nunique()
        if (drift > 1).any().any():
            cols = drift.columns[(drift > 1).any()].tolist()
            raise errors.CovariateDrift(f"covariates vary within unit: {cols}")

    frame = frame.sort_values(["cluster_id", "unit_id", "time"], kind="stable")
    n = len(frame) // tbar
    a = frame["a"].to_numpy().reshape(n, tbar)
    ymat = frame["y"].to_numpy().reshape(n, tbar)
    first = frame.iloc[::tbar]

    if (a[:, 0] == 1).any():
        raise errors.TreatedAtBaseline("units treated at the first period")
    if (np.diff(a.astype(np.int16), axis=1) < 0).any():
        raise errors.TreatmentReversal("treatment switches off within unit")

    cluster_ids = first["cluster_id"].to_numpy()
    _, codes = np.unique(cluster_ids, return_inverse=True)
    if cluster_level_treatment:
        per_cluster = pd.DataFrame(a).groupby(codes)
        if (per_cluster.min() != per_cluster.max()).any().any():
            raise errors.MixedClusterTreatment("treatment varies within cluster at some period")

    x, metas = [], []
    for c in covariates:
        col = first[c]
        if kinds[c] == "categorical":
            lookup = {lv: i for i, lv in enumerate(levels[c])}
            x.append(col.map(lookup).to_numpy(dtype=np.int64))
            metas.append(CovariateMeta(c, "categorical", levels[c]))
        else:
            x.append(col.to_numpy(dtype=float))
            metas.append(CovariateMeta(c, kinds[c]))

    return PanelDataset(
        unit_ids=first["unit_id"].to_numpy(),
        cluster_ids=cluster_ids,
        cluster_codes=codes.astype(np.int64),
        y=ymat,
        a=a,
        x=tuple(x),
        covariates=tuple(metas),
        cluster_level_treatment=cluster_level_treatment,
    )


def read_panel_csv(path, categorical: Sequence[str] = (), cluster_level_treatment: bool = True) -> PanelDataset:
    """Read the CSV panel schema: ``unit_id, cluster_id, time, y, a, <covariates...>``."""
    frame = pd.read_csv(path, dtype={"unit_id": str, "cluster_id": str}, float_precision="round_trip")
    head = list(frame.columns[:5])
    if head != list(ID_COLUMNS):
        raise errors.PanelError(f"CSV header must start with {','.join(ID_COLUMNS)}; got {head}")
    return validate_panel(frame, categorical=categorical, cluster_level_treatment=cluster_level_treatment)


def panel_to_csv(panel: PanelDataset) -> str:
    return panel.to_frame().to_csv(index=False, lineterminator="\n")


# ---------------------------------------------------------------- cohorts


@dataclass(frozen=True, eq=False)
class CohortMap:
    """First-treatment period per unit and the cohort distribution.

    ``g`` holds ``NEVER`` for never-treated units. ``support`` lists the
    finite cohorts in increasing order.
    """

    g: np.ndarray
    support: tuple[int, ...]
    never_treated: np.ndarray
    gbar: int
    counts: Mapping[float, int]
    tbar: int

    @property
    def n_units(self) -> int:
        return len(self.g)

    @property
    def shares(self) -> dict[float, float]:
        n = self.n_units
        return {k: v / n for k, v in self.counts.items()}

    @property
    def has_never_treated(self) -> bool:
        return self.counts.get(NEVER, 0) > 0


def derive_cohorts(panel: PanelDataset) -> CohortMap:
    a = panel.a
    treated_any = a.any(axis=1)
    g = np.where(treated_any, a.argmax(axis=1) + 1, NEVER).astype(float)
    support = tuple(int(v) for v in np.unique(g[np.isfinite(g)]))
    if not support:
        raise errors.NoTreatedUnits("no unit is ever treated")
    labels, counts = np.unique(g, return_counts=True)
    g.setflags(write=False)
    never = ~treated_any
    never.setflags(write=False)
    return CohortMap(
        g=g,
        support=support,
        never_treated=never,
        gbar=max(support),
        counts={(NEVER if not np.isfinite(k) else int(k)): int(c) for k, c in zip(labels, counts)},
        tbar=panel.tbar,
    )


def cohort_share(cohorts: CohortMap, g: int, window: Callable[[int], bool]) -> float:
    """Share of cohort ``g`` among the finite cohorts satisfying ``window``.

    Returns 0 when ``window`` excludes ``g`` but admits other cohorts.
    """
    if g not in cohorts.support:
        raise ValueError(f"cohort {g} not in support {cohorts.support}")
    inside = [h for h in cohorts.support if window(h)]
    if not inside:
        raise errors.EmptyWindow("no cohort satisfies the window")
    if g not in inside:
        return 0.0
    return cohorts.counts[g] / sum(cohorts.counts[h] for h in inside)


# ---------------------------------------------------------------- estimands


class ControlGroup(str, enum.Enum):
    NEVER_TREATED = "never"
    NOT_YET_TREATED = "notyet"
    LAST_TREATED = "last"
    ALL_UNTREATED = "all"


@dataclass(frozen=True)
class EstimandSpec:
    """What to estimate.

    ``kind`` is ``"gt"`` (group-time, needs ``g`` and ``t``), ``"event"``
    (needs ``ell``) or ``"aggr"``.
    """

    kind: str
    g: int | None = None
    t: int | None = None
    ell: int | None = None
    anticipation: int = 0
    control_group: ControlGroup = ControlGroup.NOT_YET_TREATED
    overlap_eps: float = 0.005

    def __post_init__(self):
        if self.kind not in ("gt", "event", "aggr"):
            raise ValueError(f"unknown estimand kind {self.kind!r}")
        if self.kind == "gt" and (self.g is None or self.t is None):
            raise ValueError("group-time estimand needs g and t")
        if self.kind == "event" and self.ell is None:
            raise ValueError("event-time estimand needs ell")
        if self.anticipation < 0:
            raise ValueError("anticipation must be nonnegative")
        if not 0 < self.overlap_eps < 1:
            raise ValueError("overlap_eps must lie in (0, 1)")
        object.__setattr__(self, "control_group", ControlGroup(self.control_group))

    @property
    def key(self) -> str:
        if self.kind == "gt":
            return f"gt:{self.g}:{self.t}"
        if self.kind == "event":
            return f"event:{self.ell}"
        return "aggr"

    @classmethod
    def parse(cls, text: str, **options) -> "EstimandSpec":
        """Parse ``aggr``, ``event:<ell>`` or ``gt:<g>:<t>``."""
        parts = text.strip().split(":")
        try:
            if parts[0] == "aggr" and len(parts) == 1:
                return cls("aggr", **options)
            if parts[0] == "event" and len(parts) == 2:
                return cls("event", ell=int(parts[1]), **options)
            if parts[0] == "gt" and len(parts) == 3:
                return cls("gt", g=int(parts[1]), t=int(parts[2]), **options)
        except ValueError as exc:
            raise ValueError(f"bad estimand {text!r}: {exc}") from None
        raise ValueError(f"bad estimand {text!r}; expected aggr, event:<l> or gt:<g>:<t>")

    def check(self, cohorts: CohortMap) -> None:
        tbar = cohorts.tbar
        if self.kind == "gt":
            if self.g not in cohorts.support:
                raise errors.UnsupportedEstimand(f"cohort {self.g} not in support {cohorts.support}")
            if not 2 <= self.t <= tbar:
                raise errors.UnsupportedEstimand(f"t={self.t} outside 2..{tbar}")
        elif self.kind == "event" and not -(tbar - 2) <= self.ell <= tbar - 2:
            raise errors.UnsupportedEstimand(f"event time {self.ell} outside {-(tbar - 2)}..{tbar - 2}")


# ---------------------------------------------------------------- overlap


@dataclass
class OverlapCell:
    g: int
    t: int
    cohort_probability: float
    conditional_probability: float
    max_propensity: float | None = None
    flagged_units: list = field(default_factory=list)
    flagged: bool = False


def check_overlap(panel: PanelDataset, cohorts: CohortMap, spec: EstimandSpec,
                  gps: Mapping[tuple[int, int], Any] | None = None,
                  groups: Sequence[int] | None = None) -> list[OverlapCell]:
    """Per (g, t) overlap diagnostics; never raises on violations.

    ``gps`` maps a cell to a fitted model exposing ``predict_proba(X)`` and
    ``covariates`` (the covariates it was fitted on, after an intercept), typically
    :class:`stagdid.kernels.GPSModel`. Without it only the empirical cohort
    probabilities are checked.
    """
    from .kernels import covariate_design, with_intercept  # local import avoids a cycle

    eps = spec.overlap_eps
    g_arr = cohorts.g
    groups = list(cohorts.support if groups is None else groups)
    out = []
    for g in groups:
        p_g = cohorts.counts.get(g, 0) / cohorts.n_units
        base = g - spec.anticipation - 1
        for t in range(max(2, base + 1), panel.tbar + 1):
            treated = g_arr == g
            controls = _untreated_by(g_arr, max(t, base) + spec.anticipation) & ~treated
            if spec.control_group == ControlGroup.NEVER_TREATED:
                controls = cohorts.never_treated.copy()
            pool = treated | controls
            cond = treated.sum() / pool.sum() if pool.any() else 0.0
            cell = OverlapCell(g, t, p_g, float(cond))
            cell.flagged = p_g <= eps or cond >= 1 - eps
            model = gps.get((g, t)) if gps else None
            if model is not None and pool.any():
                X = with_intercept(covariate_design(panel, getattr(model, "covariates", None))[0])
                prob = model.predict_proba(X[pool])
                cell.max_propensity = float(prob.max())
                high = np.flatnonzero(pool)[prob > 1 - eps]
                cell.flagged_units = panel.unit_ids[high].tolist()
                cell.flagged = cell.flagged or bool(len(high))
            out.append(cell)
    return out


def _untreated_by(g: np.ndarray, period: int) -> np.ndarray:
    """Units still untreated at ``period`` (never-treated included)."""
    return g > period
