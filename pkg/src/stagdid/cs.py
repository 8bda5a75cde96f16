"""Group-time average treatment effects by outcome regression, inverse
probability weighting and the doubly robust combination.

For a cell ``(g, t)`` the outcome change is taken against the base period
``g - delta - 1`` for post cells (``t >= g - delta``) and against ``t - 1``
for pre-treatment cells, so pre cells measure period-on-period placebo
effects.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .aggregation import PointEstimate, aggregate, weights_aggregate, weights_event_time
from .kernels import (FitResult, GPSModel, binary_logit_fit, covariate_design, least_squares_fit,
                      with_intercept)
from .panel import CohortMap, ControlGroup, EstimandSpec, PanelDataset

METHODS = ("or", "ipw", "dr")


@dataclass
class GroupTimeEffect:
    g: int
    t: int
    estimate: float
    se: float = math.nan
    ci: tuple[float, float] = (math.nan, math.nan)
    method: str = "dr"
    control_group: str = "notyet"
    n_treated: int = 0
    n_control: int = 0
    status: str = "ok"
    warnings: list[str] = field(default_factory=list)

    @property
    def missing(self) -> bool:
        return self.status != "ok"


@dataclass
class NuisanceFits:
    treated: np.ndarray
    controls: np.ndarray
    base: int
    outcome: FitResult | None = None
    gps: GPSModel | None = None
    propensity: np.ndarray | None = None  # fitted pi over treated | controls
    warnings: list[str] = field(default_factory=list)


@dataclass
class CSOptions:
    """Settings shared by every cell.

    ``overlap`` is ``"trim"`` (controls with fitted propensity above
    ``1 - overlap_eps`` get zero weight, with a warning) or ``"error"``
    (raise :class:`OverlapViolation`).
    """

    anticipation: int = 0
    control_group: ControlGroup = ControlGroup.NOT_YET_TREATED
    overlap_eps: float = 0.005
    overlap: str = "trim"
    or_covariates: Sequence[str] | None = None
    ps_covariates: Sequence[str] | None = None

    @classmethod
    def from_spec(cls, spec: EstimandSpec, **kw) -> "CSOptions":
        return cls(anticipation=spec.anticipation, control_group=spec.control_group,
                   overlap_eps=spec.overlap_eps, **kw)


def base_period(g: int, t: int, delta: int = 0) -> int:
    """Comparison period: ``g - delta - 1`` for post cells, ``t - 1`` before."""
    return g - delta - 1 if t >= g - delta else t - 1


def control_set(panel: PanelDataset, cohorts: CohortMap, g: int, t: int, delta: int = 0,
                control_group: ControlGroup | str = ControlGroup.NOT_YET_TREATED) -> np.ndarray:
    """Boolean mask of comparison units for cell ``(g, t)``.

    Not-yet-treated: untreated through ``t + delta`` and not in cohort ``g``
    (never-treated included). Never-treated: ``G = inf`` only.
    """
    control_group = ControlGroup(control_group)
    if g - delta - 1 < 1:
        raise ValueError(f"base period {g - delta - 1} precedes the panel")
    if control_group == ControlGroup.NEVER_TREATED:
        mask = cohorts.never_treated.copy()
    elif control_group == ControlGroup.NOT_YET_TREATED:
        mask = (cohorts.g > t + delta) & (cohorts.g != g)
    else:
        raise ValueError(f"control group {control_group.value!r} is not available here")
    if not mask.any():
        raise errors.EmptyControlSet(f"no {control_group.value} controls for cell ({g},{t})")
    return mask


def _design(panel: PanelDataset, names) -> tuple[np.ndarray, list[str]]:
    X, labels = covariate_design(panel, names)
    return with_intercept(X), ["(intercept)"] + labels


def fit_nuisances(panel: PanelDataset, cohorts: CohortMap, g: int, t: int, delta: int = 0,
                  control_group: ControlGroup | str = ControlGroup.NOT_YET_TREATED,
                  method: str = "dr", options: CSOptions | None = None,
                  designs: tuple | None = None) -> NuisanceFits:
    """Fit the outcome-change regression on controls and/or the propensity model.

    ``designs`` optionally passes precomputed ``(X_or, X_ps)`` matrices
    (intercept included) to avoid rebuilding them per cell.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    opts = options or CSOptions(anticipation=delta, control_group=ControlGroup(control_group))
    treated = cohorts.g == g
    controls = control_set(panel, cohorts, g, t, delta, control_group)
    base = base_period(g, t, delta)
    if designs is None:
        designs = (_design(panel, opts.or_covariates)[0], _design(panel, opts.ps_covariates)[0])
    X_or, X_ps = designs
    fits = NuisanceFits(treated, controls, base)
    if method in ("or", "dr"):
        dy = panel.y[controls, t - 1] - panel.y[controls, base - 1]
        fits.outcome = least_squares_fit(X_or[controls], dy, compute_vcov=False)
    if method in ("ipw", "dr"):
        sample = treated | controls
        model = binary_logit_fit(X_ps[sample], treated[sample], strict=False)
        model.covariates = tuple(panel.covariate_names if opts.ps_covariates is None else opts.ps_covariates)
        if model.separated:
            fits.warnings.append(f"cell ({g},{t}): propensity model quasi-separated")
        if not model.converged:
            fits.warnings.append(f"cell ({g},{t}): propensity model did not converge")
        p = model.predict_proba(X_ps[sample])
        if opts.overlap == "error" and (p > 1 - opts.overlap_eps).any():
            raise errors.OverlapViolation(
                f"cell ({g},{t}): fitted propensity {p.max():.4f} exceeds 1 - {opts.overlap_eps}")
        fits.gps = model
        fits.propensity = p
    return fits


def _cell_estimate(panel, fits: NuisanceFits, t: int, method: str, opts: CSOptions,
                   X_or: np.ndarray) -> tuple[float, list[str]]:
    sample = fits.treated | fits.controls
    D = fits.treated[sample]
    dy = panel.y[sample, t - 1] - panel.y[sample, fits.base - 1]
    m = 0.0
    if method in ("or", "dr"):
        coef = np.nan_to_num(fits.outcome.coefficients)
        m = X_or[sample] @ coef
    resid = dy - m
    w1 = D / D.mean()
    if method == "or":
        return float(np.mean(w1 * resid)), []
    notes = []
    p = fits.propensity
    ctrl = ~D
    high = ctrl & (p > 1 - opts.overlap_eps)
    if high.any():
        notes.append(f"trimmed {int(high.sum())} controls with propensity above {1 - opts.overlap_eps}")
    odds = np.where(ctrl & ~high, p / (1 - np.minimum(p, 1 - 1e-16)), 0.0)
    if odds.sum() <= 0:
        raise errors.OverlapViolation("no control keeps a positive weight")
    w0 = odds / odds.mean()
    return float(np.mean((w1 - w0) * resid)), notes


def att_gt(panel: PanelDataset, cohorts: CohortMap, g: int, t: int, spec: EstimandSpec | None = None,
           method: str = "dr", options: CSOptions | None = None, designs: tuple | None = None) -> GroupTimeEffect:
    """Point estimate of the group-time effect ``psi_{g,t}``.

    Standard errors come from the cluster bootstrap; see
    :func:`stagdid.pipeline.estimate`.

    Raises
    ------
    EmptyControlSet, OverlapViolation
    """
    opts = options or (CSOptions.from_spec(spec) if spec is not None else CSOptions())
    if designs is None:
        designs = (_design(panel, opts.or_covariates)[0], _design(panel, opts.ps_covariates)[0])
    fits = fit_nuisances(panel, cohorts, g, t, opts.anticipation, opts.control_group, method, opts, designs)
    est, notes = _cell_estimate(panel, fits, t, method, opts, designs[0])
    return GroupTimeEffect(
        g, t, est, method=method, control_group=opts.control_group.value,
        n_treated=int(fits.treated.sum()), n_control=int(fits.controls.sum()),
        warnings=fits.warnings + notes,
    )


def table_cells(cohorts: CohortMap, delta: int = 0, pre: bool = True) -> list[tuple[int, int]]:
    """Cells of the group-time table: post cells from ``g - delta`` on, plus
    pre-treatment cells ``2..g - delta - 1`` when ``pre``."""
    cells = []
    for g in cohorts.support:
        if g - delta - 1 >= 1:
            cells.extend((g, t) for t in range(2 if pre else g - delta, cohorts.tbar + 1))
    return cells


def att_gt_table(panel: PanelDataset, cohorts: CohortMap, spec: EstimandSpec | None = None,
                 method: str = "dr", options: CSOptions | None = None, pre: bool = True,
                 cells: Sequence[tuple[int, int]] | None = None) -> list[GroupTimeEffect]:
    """Every group-time cell; cells without controls are reported as missing."""
    opts = options or (CSOptions.from_spec(spec) if spec is not None else CSOptions())
    designs = (_design(panel, opts.or_covariates)[0], _design(panel, opts.ps_covariates)[0])
    out = []
    for g, t in (table_cells(cohorts, opts.anticipation, pre) if cells is None else cells):
        try:
            out.append(att_gt(panel, cohorts, g, t, method=method, options=opts, designs=designs))
        except (errors.EmptyControlSet, errors.OverlapViolation, errors.KernelError, ValueError) as exc:
            out.append(GroupTimeEffect(g, t, math.nan, method=method, control_group=opts.control_group.value,
                                       n_treated=int((cohorts.g == g).sum()),
                                       status=f"missing: {exc}"))
    return out


def _cells_for(specs: Sequence[EstimandSpec], cohorts: CohortMap, delta: int) -> list[tuple[int, int]]:
    need = set()
    for s in specs:
        if s.kind == "gt":
            need.add((s.g, s.t))
        elif s.kind == "event":
            need.update(weights_event_time(cohorts, s.ell).weights)
        else:
            need.update(weights_aggregate(cohorts, "cs").weights)
    return sorted(c for c in need if c[1] >= 2 and c[0] - delta - 1 >= 1)


def run(panel: PanelDataset, cohorts: CohortMap, specs: Sequence[EstimandSpec], method: str = "dr",
        options: CSOptions | None = None) -> dict[str, PointEstimate]:
    """Point estimates for a list of estimands sharing one set of cell fits.

    Event-time and aggregate estimands combine cells with the conditional
    cohort-share weights, re-normalized over estimable cells.
    """
    opts = options or (CSOptions.from_spec(specs[0]) if specs else CSOptions())
    delta = opts.anticipation
    effects = {}
    cell_warn = {}
    for e in att_gt_table(panel, cohorts, method=method, options=opts, cells=_cells_for(specs, cohorts, delta)):
        effects[(e.g, e.t)] = e.estimate
        cell_warn[(e.g, e.t)] = e.warnings + ([e.status] if e.missing else [])
    out = {}
    for s in specs:
        if s.kind == "gt":
            s.check(cohorts)
            est = effects.get((s.g, s.t), math.nan)
            out[s.key] = PointEstimate(est, {(s.g, s.t): 1.0}, int((cohorts.g == s.g).sum()),
                                       warnings=list(cell_warn.get((s.g, s.t), [])))
            continue
        scheme = weights_event_time(cohorts, s.ell) if s.kind == "event" else weights_aggregate(cohorts, "cs")
        try:
            est, realized, notes = aggregate(effects, scheme)
        except errors.AllCellsMissing as exc:
            # reported like a missing group-time cell so other estimands survive
            notes = [f"{s.key}: {exc}"] + [w for c in scheme.weights for w in cell_warn.get(c, [])]
            out[s.key] = PointEstimate(math.nan, dict(scheme.weights), 0, warnings=notes)
            continue
        n_treated = int(sum((cohorts.g == g).sum() for g in {c[0] for c in realized}))
        notes = notes + [w for c in realized for w in cell_warn.get(c, [])]
        out[s.key] = PointEstimate(est, realized, n_treated, warnings=notes)
    return out
