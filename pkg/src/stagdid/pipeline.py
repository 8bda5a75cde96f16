"""One entry point for every estimator: support checks, point estimates and
cluster-bootstrap inference, returned as an :class:`EffectTable`."""

from __future__ import annotations

import math
import warnings
from collections.abc import Sequence

import numpy as np
from scipy import stats

from . import cs, errors, mundlak, sunab, twostage
from .aggregation import EffectRow, EffectTable, PointEstimate, weights_digest
from .bootstrap import BootstrapSpec, cluster_bootstrap, simultaneous_bands
from .panel import CohortMap, EstimandSpec, PanelDataset, derive_cohorts

SUPPORT = {
    "cs-dr": ("gt", "event", "aggr"),
    "cs-ipw": ("gt", "event", "aggr"),
    "cs-or": ("gt", "event", "aggr"),
    "sunab": ("event", "aggr"),
    "twostage": ("event", "aggr"),
    "mundlak": ("gt", "event", "aggr"),
    "twfe": ("aggr",),
}
METHODS = tuple(SUPPORT)
# default CI source when no bootstrap is requested
ANALYTIC_SE = ("sunab", "mundlak", "twfe")


def check_support(method: str, spec: EstimandSpec) -> None:
    """Reject method/estimand pairs the method cannot target.

    Raises
    ------
    UnsupportedEstimand, NegativeEventTime
    """
    if method not in SUPPORT:
        raise errors.UnsupportedEstimand(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if spec.kind not in SUPPORT[method]:
        raise errors.UnsupportedEstimand(f"method {method} does not support {spec.key}")
    if method == "mundlak" and spec.kind == "event" and spec.ell < 0:
        raise errors.NegativeEventTime("negative event time unsupported for mundlak")
    if method == "mundlak" and spec.kind == "gt" and spec.t < spec.g:
        raise errors.UnsupportedEstimand("mundlak has no pre-treatment group-time cells")


def point_estimates(panel: PanelDataset, method: str, specs: Sequence[EstimandSpec],
                    cohorts: CohortMap | None = None, **options) -> dict[str, PointEstimate]:
    """Point estimates for ``specs`` under ``method`` (no inference)."""
    for s in specs:
        check_support(method, s)
    cohorts = derive_cohorts(panel) if cohorts is None else cohorts
    for s in specs:
        if s.kind != "aggr":
            s.check(cohorts)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if method.startswith("cs-"):
            opts = cs.CSOptions.from_spec(specs[0], **options)
            return cs.run(panel, cohorts, specs, method[3:], opts)
        if method == "sunab":
            return sunab.run(panel, cohorts, specs, **options)
        if method == "twostage":
            return twostage.run(panel, cohorts, specs, **options)
        if method == "mundlak":
            return mundlak.run(panel, cohorts, specs, **options)
        return mundlak.run_twfe(panel, cohorts, specs)


def _normal_ci(est: float, se: float, level: float) -> tuple[float, float]:
    if not math.isfinite(se):
        return math.nan, math.nan
    z = stats.norm.ppf(0.5 + level / 2)
    return est - z * se, est + z * se


def estimate(panel: PanelDataset, method: str, specs: Sequence[EstimandSpec],
             bootstrap: BootstrapSpec | None = None, band: bool = False, level: float = 0.95,
             **options) -> EffectTable:
    """Estimate ``specs`` with ``method`` and attach inference.

    With ``bootstrap`` every estimand gets the replicate SD and a percentile
    interval from refitting the whole pipeline on cluster resamples. Without
    it, methods with an analytic cluster-robust variance report a normal
    interval and the others report NaN. ``band`` adds sup-t simultaneous
    intervals over the group-time estimands as rows labelled
    ``<method>+band``.
    """
    specs = list(specs)
    if not specs:
        raise errors.UnsupportedEstimand("no estimand requested")
    point = point_estimates(panel, method, specs, **options)
    keys = [s.key for s in specs]
    table = EffectTable(points=point)
    for k in keys:
        table.warnings.extend(w for w in point[k].warnings if w not in table.warnings)
    boot = None
    if bootstrap is not None:
        level = bootstrap.level

        def pipeline(p):
            return {k: v.estimate for k, v in point_estimates(p, method, specs, **options).items()}

        boot = cluster_bootstrap(pipeline, panel, bootstrap, keys)
        failed = int(boot.n_failed.max())
        if failed:
            table.warnings.append(f"{failed} of {bootstrap.B} bootstrap replicates failed for some estimand")
    for j, k in enumerate(keys):
        pe = point[k]
        if boot is not None:
            se, lo, hi = float(boot.se[j]), float(boot.ci_lo[j]), float(boot.ci_hi[j])
        else:
            se = pe.se if method in ANALYTIC_SE else math.nan
            lo, hi = _normal_ci(pe.estimate, se, level)
        table.add(EffectRow(method, k, pe.estimate, se, lo, hi, pe.n_treated, weights_digest(pe.weights)))
    if band:
        gt = [j for j, s in enumerate(specs) if s.kind == "gt" and math.isfinite(point[s.key].estimate)]
        if boot is None:
            raise errors.UnsupportedEstimand("simultaneous bands need a bootstrap")
        if gt:
            est = np.array([point[keys[j]].estimate for j in gt])
            lo, hi, crit = simultaneous_bands(boot.replicates[:, gt], est, level)
            for i, j in enumerate(gt):
                pe = point[keys[j]]
                table.add(EffectRow(f"{method}+band", keys[j], pe.estimate, float(boot.se[j]),
                                    float(lo[i]), float(hi[i]), pe.n_treated, weights_digest(pe.weights)))
    return table
