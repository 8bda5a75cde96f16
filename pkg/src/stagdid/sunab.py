"""Interaction-weighted event-study estimator.

A saturated regression of the outcome on cohort by relative-period
indicators (relative period -1 omitted) with unit and period fixed effects,
followed by cohort-share weighting of the cell coefficients.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import errors
from .aggregation import PointEstimate
from .kernels import FitResult, absorb_fixed_effects, covariate_design, least_squares_fit
from .panel import NEVER, CohortMap, EstimandSpec, PanelDataset, cohort_share

OMITTED = -1


@dataclass
class SaturatedCoefficients:
    """Cell coefficients ``alpha[(g, ell)]`` with their cluster-robust covariance.

    ``cells`` orders the rows and columns of ``vcov``.
    """

    alpha: dict[tuple[int, int], float]
    cells: list[tuple[int, int]]
    vcov: np.ndarray
    reference: float
    last_period: int
    fit: FitResult
    dropped: list[str] = field(default_factory=list)
    omitted: int = OMITTED

    def index(self, cell) -> int:
        return self.cells.index(cell)


@dataclass
class IWEffect:
    ell: int | None  # None for the aggregate
    estimate: float
    se: float
    ci: tuple[float, float]
    weights: dict[int, float]  # cohort -> weight (event time)
    cell_weights: dict[tuple[int, int], float]  # (g, t) -> weight


def reference_cohort(cohorts: CohortMap) -> float:
    """Never-treated if present, else the last-treated cohort."""
    if cohorts.has_never_treated:
        return NEVER
    if len(cohorts.support) < 2:
        raise errors.NoReferenceCohort("a single cohort without never-treated units has no reference")
    return float(cohorts.gbar)


def fit_saturated(panel: PanelDataset, cohorts: CohortMap, covariates: bool = True) -> SaturatedCoefficients:
    """Saturated event-study regression.

    When the last-treated cohort is the reference, periods from its adoption
    onward are dropped for every unit, so that cohort contributes only
    untreated observations. Time-invariant covariates are unit-demeaned before
    entering and therefore drop out; they are reported in ``dropped``.
    """
    ref = reference_cohort(cohorts)
    last = panel.tbar if ref == NEVER else int(ref) - 1
    if last < 2:
        raise errors.NoReferenceCohort("reference cohort leaves fewer than two periods")
    n = panel.n_units
    g = cohorts.g
    period = np.tile(np.arange(1, last + 1), n)
    unit = np.repeat(np.arange(n), last)
    g_row = np.repeat(g, last)
    y = panel.y[:, :last].ravel()

    cells, cols = [], []
    for c in cohorts.support:
        if c == ref:
            continue
        in_c = g_row == c
        for ell in range(1 - c, last - c + 1):
            if ell == OMITTED:
                continue
            cells.append((c, ell))
            cols.append((in_c & (period - c == ell)).astype(float))
    if not cells:
        raise errors.NoReferenceCohort("no cohort besides the reference")
    labels = [f"D[{c},{ell}]" for c, ell in cells]
    if covariates and panel.p:
        Xc, xlab = covariate_design(panel)
        cols.extend(np.repeat(Xc[:, j], last) for j in range(Xc.shape[1]))
        labels.extend(xlab)
    X = np.column_stack(cols)
    Xt, yt = absorb_fixed_effects(X, y, [unit, period])
    fit = least_squares_fit(Xt, yt, clusters=np.repeat(panel.cluster_codes, last), labels=labels)
    k = len(cells)
    kept = fit.kept[:k]
    alpha = {cell: float(fit.coefficients[j]) for j, cell in enumerate(cells) if kept[j]}
    idx = [j for j in range(k) if kept[j]]
    return SaturatedCoefficients(
        alpha=alpha,
        cells=[cells[j] for j in idx],
        vcov=fit.vcov[np.ix_(idx, idx)],
        reference=ref,
        last_period=last,
        fit=fit,
        dropped=fit.dropped_columns,
    )


def _normal_ci(est: float, se: float, level: float = 0.95) -> tuple[float, float]:
    z = stats.norm.ppf(0.5 + level / 2)
    return est - z * se, est + z * se


def _combine(coeffs: SaturatedCoefficients, w: dict[tuple[int, int], float]) -> tuple[float, float]:
    vec = np.zeros(len(coeffs.cells))
    for cell, v in w.items():
        vec[coeffs.index(cell)] += v
    est = float(sum(v * coeffs.alpha[c] for c, v in w.items()))
    return est, float(np.sqrt(max(vec @ coeffs.vcov @ vec, 0.0)))


def _event_weights(coeffs: SaturatedCoefficients, cohorts: CohortMap, ell: int) -> dict[int, float]:
    contributing = [g for g, e in coeffs.cells if e == ell]
    if not contributing:
        raise errors.NoContributingCohort(f"no cohort has a coefficient at event time {ell}")
    return {g: cohort_share(cohorts, g, lambda h: h in contributing) for g in contributing}


def iw_event_time(coeffs: SaturatedCoefficients, cohorts: CohortMap, ell: int,
                  level: float = 0.95) -> IWEffect:
    """Cohort-share weighted average of ``alpha[(g, ell)]``; delta-method SE
    with shares held fixed."""
    w = _event_weights(coeffs, cohorts, ell)
    est, se = _combine(coeffs, {(g, ell): v for g, v in w.items()})
    return IWEffect(ell, est, se, _normal_ci(est, se, level), w, {(g, g + ell): v for g, v in w.items()})


def estimable_event_times(coeffs: SaturatedCoefficients, nonnegative: bool = True) -> list[int]:
    ells = sorted({e for _, e in coeffs.cells})
    return [e for e in ells if e >= 0] if nonnegative else ells


def iw_aggregate(coeffs: SaturatedCoefficients, cohorts: CohortMap, ells: Iterable[int] | None = None,
                 level: float = 0.95) -> IWEffect:
    """Simple average of event-time effects over ``ells`` (default: every
    estimable nonnegative event time)."""
    ells = list(estimable_event_times(coeffs) if ells is None else ells)
    if not ells:
        raise errors.NoContributingCohort("no nonnegative event time is estimable")
    combined: dict[tuple[int, int], float] = {}
    for ell in ells:
        for g, v in _event_weights(coeffs, cohorts, ell).items():
            combined[(g, ell)] = combined.get((g, ell), 0.0) + v / len(ells)
    est, se = _combine(coeffs, combined)
    cohort_w: dict[int, float] = {}
    for (g, _), v in combined.items():
        cohort_w[g] = cohort_w.get(g, 0.0) + v
    return IWEffect(None, est, se, _normal_ci(est, se, level), cohort_w,
                    {(g, g + e): v for (g, e), v in combined.items()})


def run(panel: PanelDataset, cohorts: CohortMap, specs: Sequence[EstimandSpec],
        covariates: bool = True) -> dict[str, PointEstimate]:
    for s in specs:
        if s.kind == "gt":
            raise errors.UnsupportedEstimand("the interaction-weighted estimator reports event-time and aggregate effects only")
    coeffs = fit_saturated(panel, cohorts, covariates)
    notes = [f"dropped collinear columns: {', '.join(coeffs.dropped)}"] if coeffs.dropped else []
    out = {}
    for s in specs:
        eff = iw_event_time(coeffs, cohorts, s.ell) if s.kind == "event" else iw_aggregate(coeffs, cohorts)
        n_treated = int(sum(cohorts.counts[g] for g in eff.weights))
        out[s.key] = PointEstimate(eff.estimate, eff.cell_weights, n_treated, se=eff.se, warnings=list(notes))
    return out
