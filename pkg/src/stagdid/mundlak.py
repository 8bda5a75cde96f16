"""Two-way Mundlak regression and the plain two-way fixed-effects baseline.

The Mundlak model is one pooled OLS with cohort and period indicators,
covariates, covariate-by-cohort and covariate-by-period interactions,
treated-cell indicators ``D[g,t]`` (``t >= g``) and their interactions with
cohort-centered covariates. Centering makes the coefficient on ``D[g,t]``
the cohort-average effect in that cell.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import errors
from .aggregation import PointEstimate
from .kernels import FitResult, absorb_fixed_effects, covariate_design, least_squares_fit
from .panel import CohortMap, EstimandSpec, PanelDataset


@dataclass
class MundlakFit:
    fit: FitResult
    cells: list[tuple[int, int]]
    tau: dict[tuple[int, int], float]
    lam: dict[tuple[int, int], np.ndarray]  # cell x centered-covariate slopes
    xbar: dict[int, np.ndarray]  # cohort covariate means
    x: np.ndarray  # unit covariate matrix (expanded)
    x_labels: list[str]
    periods: list[int]
    dropped: list[str] = field(default_factory=list)

    def cell_label(self, cell) -> str:
        return f"D[{cell[0]},{cell[1]}]"


@dataclass
class MarginalizedEffect:
    target: str
    estimate: float
    se: float
    ci: tuple[float, float]
    weights: dict[tuple[int, int], float]
    population: str


def estimation_periods(cohorts: CohortMap) -> list[int]:
    """Periods with at least one untreated unit."""
    return [t for t in range(1, cohorts.tbar + 1) if (cohorts.g > t).any()]


def fit_mundlak(panel: PanelDataset, cohorts: CohortMap, covariates: bool = True) -> MundlakFit:
    """Pooled OLS with the full interaction structure and cluster-robust vcov.

    Periods in which every unit is treated carry no comparison information
    and are dropped. Collinear columns are dropped left to right and
    reported; a dropped cell indicator makes that cell missing.
    """
    periods = estimation_periods(cohorts)
    if len(periods) < 2:
        raise errors.InsufficientUntreatedSupport("fewer than two periods with untreated units")
    n, T = panel.n_units, len(periods)
    g_row = np.repeat(cohorts.g, T)
    t_row = np.tile(np.array(periods), n)
    y = panel.y[:, np.array(periods) - 1].ravel()
    if covariates and panel.p:
        Xu, xlab = covariate_design(panel)
    else:
        Xu, xlab = np.empty((n, 0)), []
    Xr = np.repeat(Xu, T, axis=0)

    cols, names = [np.ones(n * T)], ["(intercept)"]
    dg = {g: (g_row == g).astype(float) for g in cohorts.support}
    dt = {t: (t_row == t).astype(float) for t in periods[1:]}
    for g, col in dg.items():
        cols.append(col)
        names.append(f"cohort[{g}]")
    for t, col in dt.items():
        cols.append(col)
        names.append(f"time[{t}]")
    for j, lab in enumerate(xlab):
        cols.append(Xr[:, j])
        names.append(lab)
    for g, col in dg.items():
        for j, lab in enumerate(xlab):
            cols.append(col * Xr[:, j])
            names.append(f"{lab}:cohort[{g}]")
    for t, col in dt.items():
        for j, lab in enumerate(xlab):
            cols.append(col * Xr[:, j])
            names.append(f"{lab}:time[{t}]")
    cells = [(g, t) for g in cohorts.support for t in periods if t >= g]
    xbar = {g: Xu[cohorts.g == g].mean(axis=0) for g in cohorts.support}
    for g, t in cells:
        d = dg[g] * (t_row == t)
        cols.append(d)
        names.append(f"D[{g},{t}]")
        for j, lab in enumerate(xlab):
            cols.append(d * (Xr[:, j] - xbar[g][j]))
            names.append(f"D[{g},{t}]:{lab}")
    X = np.column_stack(cols)
    del cols
    fit = least_squares_fit(X, y, clusters=np.repeat(panel.cluster_codes, T), labels=names)
    coef = fit.coefficients
    tau, lam, kept_cells = {}, {}, []
    for cell in cells:
        j = names.index(f"D[{cell[0]},{cell[1]}]")
        if not fit.kept[j]:
            continue
        kept_cells.append(cell)
        tau[cell] = float(coef[j])
        lam[cell] = np.nan_to_num(coef[j + 1:j + 1 + len(xlab)])
    return MundlakFit(fit, kept_cells, tau, lam, xbar, Xu, xlab, periods, fit.dropped_columns)


def _ci(est, se, level=0.95):
    z = stats.norm.ppf(0.5 + level / 2)
    return est - z * se, est + z * se


def _combine(mf: MundlakFit, w: dict[tuple[int, int], float]) -> tuple[float, float]:
    return mf.fit.combination({mf.cell_label(c): v for c, v in w.items()})


def cell_marginal(mf: MundlakFit, cohorts: CohortMap, g: int, t: int) -> float:
    """Average of the conditional effect over units of cohort ``g``."""
    if (g, t) not in mf.tau:
        raise errors.MissingCell(f"cell ({g},{t}) not estimated")
    xg = mf.x[cohorts.g == g]
    return float(np.mean(mf.tau[(g, t)] + (xg - mf.xbar[g]) @ mf.lam[(g, t)]))


def marginalize_group_time(mf: MundlakFit, cohorts: CohortMap, g: int, t: int) -> MarginalizedEffect:
    """Cohort-average effect in cell ``(g, t)``; delta-method SE (bootstrap via the pipeline)."""
    est = cell_marginal(mf, cohorts, g, t)
    _, se = _combine(mf, {(g, t): 1.0})
    return MarginalizedEffect(f"gt:{g}:{t}", est, se, _ci(est, se), {(g, t): 1.0}, f"units with G={g}")


def _count_weights(cohorts: CohortMap, cells) -> dict[tuple[int, int], float]:
    total = sum(cohorts.counts[g] for g, _ in cells)
    return {(g, t): cohorts.counts[g] / total for g, t in cells}


def marginalize_event_time(mf: MundlakFit, cohorts: CohortMap, ell: int) -> MarginalizedEffect:
    """Cohort-size weighted average of cell marginals with ``t - g = ell``.

    Raises
    ------
    NegativeEventTime, MissingCell
    """
    if ell < 0:
        raise errors.NegativeEventTime("negative event time unsupported: no treated cells before adoption")
    cells = [c for c in mf.cells if c[1] - c[0] == ell]
    if not cells:
        raise errors.MissingCell(f"no estimated cell at event time {ell}")
    w = _count_weights(cohorts, cells)
    est = float(sum(v * cell_marginal(mf, cohorts, *c) for c, v in w.items()))
    _, se = _combine(mf, w)
    return MarginalizedEffect(f"event:{ell}", est, se, _ci(est, se), w, "treated units in the cells")


def marginalize_aggregate(mf: MundlakFit, cohorts: CohortMap) -> MarginalizedEffect:
    """Cohort-size weighted average over every estimated post cell."""
    if not mf.cells:
        raise errors.MissingCell("no treatment cell estimated")
    w = _count_weights(cohorts, mf.cells)
    est = float(sum(v * cell_marginal(mf, cohorts, *c) for c, v in w.items()))
    _, se = _combine(mf, w)
    return MarginalizedEffect("aggr", est, se, _ci(est, se), w, "treated units in all cells")


@dataclass
class TWFEResult:
    estimate: float
    se: float
    ci: tuple[float, float]
    weights: dict[tuple[int, int], float]  # implicit weights on treated cells, may be negative


def twfe_baseline(panel: PanelDataset, cohorts: CohortMap | None = None) -> TWFEResult:
    """Outcome on treatment with unit and period effects absorbed.

    Also returns the implicit weights the coefficient puts on each treated
    cell: the coefficient equals ``sum w(g,t) * effect(g,t)`` when outcomes
    follow the two-way model plus cell effects.
    """
    n, T = panel.y.shape
    unit = np.repeat(np.arange(n), T)
    period = np.tile(np.arange(1, T + 1), n)
    a = panel.a.ravel().astype(float)
    at, yt = absorb_fixed_effects(a[:, None], panel.y.ravel(), [unit, period])
    fit = least_squares_fit(at, yt, clusters=np.repeat(panel.cluster_codes, T), labels=["a"])
    est, se = fit.combination({"a": 1.0})
    weights = {}
    if cohorts is not None:
        resid_a = at[:, 0]
        treated = a == 1
        denom = resid_a[treated].sum()
        g_row = np.repeat(cohorts.g, T)
        for g in cohorts.support:
            for t in range(g, T + 1):
                m = treated & (g_row == g) & (period == t)
                if m.any():
                    weights[(g, t)] = float(resid_a[m].sum() / denom)
    return TWFEResult(est, se, _ci(est, se), weights)


def run(panel: PanelDataset, cohorts: CohortMap, specs: Sequence[EstimandSpec],
        covariates: bool = True) -> dict[str, PointEstimate]:
    for s in specs:
        if s.kind == "event" and s.ell < 0:
            raise errors.NegativeEventTime("negative event time unsupported")
        if s.kind == "gt" and s.t < s.g:
            raise errors.UnsupportedEstimand("Mundlak cells exist only for t >= g")
    mf = fit_mundlak(panel, cohorts, covariates)
    notes = [f"dropped collinear columns: {', '.join(mf.dropped)}"] if mf.dropped else []
    skipped = [t for t in range(1, panel.tbar + 1) if t not in mf.periods]
    if skipped:
        notes.append(f"periods without untreated units excluded: {skipped}")
    out = {}
    for s in specs:
        if s.kind == "gt":
            s.check(cohorts)
            eff = marginalize_group_time(mf, cohorts, s.g, s.t)
        elif s.kind == "event":
            eff = marginalize_event_time(mf, cohorts, s.ell)
        else:
            eff = marginalize_aggregate(mf, cohorts)
        n_treated = int(sum(cohorts.counts[g] for g in {c[0] for c in eff.weights}))
        out[s.key] = PointEstimate(eff.estimate, eff.weights, n_treated, se=eff.se, warnings=list(notes))
    return out


def run_twfe(panel: PanelDataset, cohorts: CohortMap, specs: Sequence[EstimandSpec]) -> dict[str, PointEstimate]:
    for s in specs:
        if s.kind != "aggr":
            raise errors.UnsupportedEstimand("the TWFE baseline reports the aggregate effect only")
    res = twfe_baseline(panel, cohorts)
    n_treated = int(sum(cohorts.counts[g] for g in cohorts.support))
    return {s.key: PointEstimate(res.estimate, res.weights, n_treated, se=res.se) for s in specs}
