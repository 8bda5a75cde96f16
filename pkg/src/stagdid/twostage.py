"""Two-stage difference-in-differences.

Stage 1 removes unit effects by demeaning each unit over its untreated
periods, then regresses the transformed outcome on cohort and period
indicators (and transformed covariates) using untreated rows only. Stage 2
averages the stage-1 residuals over treated rows, overall or by event time.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .aggregation import PointEstimate
from .kernels import FitResult, covariate_design, least_squares_fit
from .panel import NEVER, CohortMap, EstimandSpec, PanelDataset


@dataclass
class TransformedPanel:
    y: np.ndarray  # (n, tbar)
    x: np.ndarray  # (n, tbar, q)
    x_labels: list[str]
    untreated: np.ndarray  # (n, tbar) bool
    g: np.ndarray
    cluster_codes: np.ndarray


@dataclass
class Stage1Fit:
    intercept: float
    mu_g: dict[float, float]
    mu_t: dict[int, float]
    beta: dict[str, float]
    fit: FitResult
    supported_periods: list[int]
    dropped: list[str] = field(default_factory=list)
    transform: str = "demean over untreated periods"


@dataclass
class Stage2Fit:
    estimates: dict  # "aggr" or ell -> estimate
    weights: dict  # same keys -> {(g, t): share of rows}
    n_rows: dict
    restriction: int | None = None
    se: dict = field(default_factory=dict)


def transform_outcomes(panel: PanelDataset, cohorts: CohortMap) -> TransformedPanel:
    """Subtract from every row the unit's mean over its untreated periods."""
    untreated = panel.a == 0
    n_untreated = untreated.sum(axis=1)
    ybar = (panel.y * untreated).sum(axis=1) / n_untreated
    X, labels = covariate_design(panel)
    # covariates are time-invariant, so their untreated-period mean is the value itself
    Xt = np.repeat(X[:, None, :], panel.tbar, axis=1)
    xbar = (Xt * untreated[:, :, None]).sum(axis=1) / n_untreated[:, None]
    return TransformedPanel(
        y=panel.y - ybar[:, None],
        x=Xt - xbar[:, None, :],
        x_labels=labels,
        untreated=untreated,
        g=cohorts.g,
        cluster_codes=panel.cluster_codes,
    )


def _cohort_labels(g: np.ndarray) -> list[float]:
    return sorted(set(g.tolist()))


def _design(tp: TransformedPanel, rows_i: np.ndarray, rows_t: np.ndarray,
            labels_g: list[float], periods: list[int]) -> tuple[np.ndarray, list[str]]:
    cols = [np.ones(len(rows_i))]
    names = ["(intercept)"]
    gi = tp.g[rows_i]
    for lab in labels_g:
        cols.append((gi == lab).astype(float))
        names.append(f"cohort[{'inf' if lab == NEVER else int(lab)}]")
    for t in periods:
        cols.append((rows_t == t).astype(float))
        names.append(f"time[{t}]")
    for j, lab in enumerate(tp.x_labels):
        cols.append(tp.x[rows_i, rows_t - 1, j])
        names.append(f"x:{lab}")
    return np.column_stack(cols), names


def stage1(tp: TransformedPanel) -> Stage1Fit:
    """OLS of the transformed outcome on intercept, cohort, period and
    transformed-covariate columns over untreated rows.

    Raises
    ------
    InsufficientUntreatedSupport
        Untreated rows cover fewer than two periods or two cohorts.
    """
    rows_i, rows_t0 = np.nonzero(tp.untreated)
    rows_t = rows_t0 + 1
    periods = sorted(set(rows_t.tolist()))
    labels_g = _cohort_labels(tp.g[rows_i])
    if len(periods) < 2 or len(labels_g) < 2:
        raise errors.InsufficientUntreatedSupport(
            f"untreated rows span {len(periods)} periods and {len(labels_g)} cohorts; need two of each")
    X, names = _design(tp, rows_i, rows_t, labels_g, periods)
    fit = least_squares_fit(X, tp.y[rows_i, rows_t0], clusters=tp.cluster_codes[rows_i], labels=names,
                            compute_vcov=False)
    coef = np.nan_to_num(fit.coefficients)
    k = 1
    mu_g = {lab: float(coef[k + j]) for j, lab in enumerate(labels_g)}
    k += len(labels_g)
    mu_t = {t: float(coef[k + j]) for j, t in enumerate(periods)}
    k += len(periods)
    beta = {lab: float(coef[k + j]) for j, lab in enumerate(tp.x_labels)}
    return Stage1Fit(float(coef[0]), mu_g, mu_t, beta, fit, periods, fit.dropped_columns)


def residualize(tp: TransformedPanel, s1: Stage1Fit) -> np.ndarray:
    """Stage-1 residuals for every row; NaN at periods with no untreated rows."""
    n, tbar = tp.y.shape
    fitted = np.full((n, tbar), s1.intercept)
    fitted += np.array([s1.mu_g.get(v, math.nan) for v in tp.g.tolist()])[:, None]
    fitted += np.array([s1.mu_t.get(t, math.nan) for t in range(1, tbar + 1)])[None, :]
    if tp.x_labels:
        fitted += tp.x @ np.array([s1.beta[lab] for lab in tp.x_labels])
    return tp.y - fitted


def _cell_shares(g_rows: np.ndarray, t_rows: np.ndarray) -> dict[tuple[int, int], float]:
    cells, counts = np.unique(np.column_stack([g_rows, t_rows]), axis=0, return_counts=True)
    total = counts.sum()
    return {(int(c[0]), int(c[1])): float(k / total) for c, k in zip(cells, counts)}


def stage2_aggregate(resid: np.ndarray, cohorts: CohortMap, max_ell: int | None = None) -> Stage2Fit:
    """Coefficient of Z on the treatment indicator.

    Untreated residuals carry zero weight in that regression, so the
    coefficient is the mean residual over treated rows. With ``max_ell``,
    treated rows with ``t - g >= max_ell`` are dropped.

    Raises
    ------
    NoTreatedRows
    """
    n, tbar = resid.shape
    t = np.arange(1, tbar + 1)[None, :]
    G = cohorts.g[:, None]
    mask = (t >= G) & np.isfinite(resid)
    if max_ell is not None:
        mask &= (t - G) < max_ell
    if not mask.any():
        raise errors.NoTreatedRows("no treated row with a stage-1 residual")
    ii, tt = np.nonzero(mask)
    est = float(resid[mask].mean())
    return Stage2Fit({"aggr": est}, {"aggr": _cell_shares(cohorts.g[ii], tt + 1)},
                     {"aggr": int(mask.sum())}, max_ell)


def stage2_event_time(resid: np.ndarray, cohorts: CohortMap, ells: Iterable[int]) -> Stage2Fit:
    """Coefficients on disjoint relative-period indicators, i.e. mean residual
    per event time (negative event times give pre-trend checks).

    Raises
    ------
    EmptyEventTime
    """
    n, tbar = resid.shape
    rel = np.arange(1, tbar + 1)[None, :] - cohorts.g[:, None]
    finite = np.isfinite(resid)
    fit = Stage2Fit({}, {}, {})
    for ell in ells:
        mask = (rel == ell) & finite
        if not mask.any():
            raise errors.EmptyEventTime(f"no row at event time {ell}")
        ii, tt = np.nonzero(mask)
        fit.estimates[ell] = float(resid[mask].mean())
        fit.weights[ell] = _cell_shares(cohorts.g[ii], tt + 1)
        fit.n_rows[ell] = int(mask.sum())
    return fit


def run(panel: PanelDataset, cohorts: CohortMap, specs: Sequence[EstimandSpec],
        max_ell: int | None = None) -> dict[str, PointEstimate]:
    for s in specs:
        if s.kind == "gt":
            raise errors.UnsupportedEstimand("two-stage DiD reports event-time and aggregate effects only")
    tp = transform_outcomes(panel, cohorts)
    s1 = stage1(tp)
    resid = residualize(tp, s1)
    notes = []
    if s1.dropped:
        notes.append(f"stage 1 dropped collinear columns: {', '.join(s1.dropped)}")
    unsupported = [t for t in range(1, panel.tbar + 1) if t not in s1.supported_periods]
    if unsupported:
        notes.append(f"periods without untreated rows excluded from stage 2: {unsupported}")
    out = {}
    for s in specs:
        if s.kind == "aggr":
            fit = stage2_aggregate(resid, cohorts, max_ell)
            key = "aggr"
        else:
            fit = stage2_event_time(resid, cohorts, [s.ell])
            key = s.ell
        w = fit.weights[key]
        n_treated = int(sum(cohorts.counts[g] for g in {c[0] for c in w}))
        out[s.key] = PointEstimate(fit.estimates[key], w, n_treated, warnings=list(notes))
    return out
