"""Cluster bootstrap and sup-t simultaneous bands."""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import errors
from .panel import PanelDataset

# failures that mean "this replicate has no estimate", not a bug
REPLICATE_FAILURES = (errors.StagDidError, ArithmeticError, np.linalg.LinAlgError)


@dataclass(frozen=True)
class BootstrapSpec:
    B: int = 199
    seed: int = 0
    level: float = 0.95

    def __post_init__(self):
        if self.B < 2:
            raise ValueError("bootstrap needs B >= 2")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")


@dataclass
class BootstrapResult:
    keys: list[str]
    replicates: np.ndarray  # (B, k); NaN marks a failed replicate for that key
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n_failed: np.ndarray
    level: float

    def row(self, key: str) -> dict:
        j = self.keys.index(key)
        return {"se": float(self.se[j]), "ci_lo": float(self.ci_lo[j]), "ci_hi": float(self.ci_hi[j]),
                "n_failed": int(self.n_failed[j])}


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    """Independent stream for replicate ``b``; does not depend on evaluation order."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(b,)))


def resample_clusters(panel: PanelDataset, rng: np.random.Generator) -> PanelDataset:
    """Draw clusters with replacement; each draw becomes a distinct cluster."""
    codes = panel.cluster_codes
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(panel.n_clusters + 1))
    draw = rng.integers(0, panel.n_clusters, size=panel.n_clusters)
    sizes = bounds[draw + 1] - bounds[draw]
    units = np.concatenate([order[bounds[c]:bounds[c + 1]] for c in draw])
    new_codes = np.repeat(np.arange(len(draw)), sizes)
    return panel.take(units, cluster_codes=new_codes, cluster_ids=new_codes)


def cluster_bootstrap(
    pipeline: Callable[[PanelDataset], Mapping[str, float]],
    panel: PanelDataset,
    spec: BootstrapSpec,
    keys: Sequence[str] | None = None,
) -> BootstrapResult:
    """Re-run ``pipeline`` on ``spec.B`` cluster resamples.

    A replicate that raises a package error counts as failed for every key;
    a NaN value counts as failed for that key only. The SE is the standard
    deviation of the successful replicates and the interval is percentile.

    Raises
    ------
    TooFewClusters
        Fewer than two clusters.
    AllReplicatesFailed
        No replicate produced any finite value.
    """
    if panel.n_clusters < 2:
        raise errors.TooFewClusters("cluster bootstrap needs at least two clusters")
    values = []
    for b in range(spec.B):
        rep = resample_clusters(panel, replicate_rng(spec.seed, b))
        try:
            values.append(dict(pipeline(rep)))
        except REPLICATE_FAILURES:
            values.append({})
    if keys is None:
        keys = sorted({k for v in values for k in v})
    keys = list(keys)
    reps = np.array([[float(v.get(k, np.nan)) for k in keys] for v in values]).reshape(spec.B, len(keys))
    ok = np.isfinite(reps)
    if not ok.any():
        raise errors.AllReplicatesFailed(f"all {spec.B} bootstrap replicates failed")
    alpha = 1 - spec.level
    se = np.full(len(keys), np.nan)
    lo = np.full(len(keys), np.nan)
    hi = np.full(len(keys), np.nan)
    for j in range(len(keys)):
        col = reps[ok[:, j], j]
        if len(col) >= 2:
            se[j] = col.std(ddof=1)
            lo[j], hi[j] = np.quantile(col, [alpha / 2, 1 - alpha / 2])
    return BootstrapResult(keys, reps, se, lo, hi, (~ok).sum(axis=0), spec.level)


def simultaneous_bands(replicates: np.ndarray, estimates: np.ndarray, level: float = 0.95,
                       se: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Sup-t bands from a joint replicate matrix ``(B, k)``.

    The critical value is the ``level`` quantile over replicates of the
    largest studentized absolute deviation across cells. Replicates with any
    missing cell are discarded.

    Returns
    -------
    lo, hi, critical value
    """
    reps = np.atleast_2d(np.asarray(replicates, dtype=float))
    est = np.asarray(estimates, dtype=float)
    reps = reps[np.isfinite(reps).all(axis=1)]
    if len(reps) < 2:
        raise errors.AllReplicatesFailed("fewer than two complete replicates for the band")
    if se is None:
        se = reps.std(axis=0, ddof=1)
    se = np.asarray(se, dtype=float)
    safe = np.where(se > 0, se, np.inf)
    tstat = np.abs(reps - est) / safe
    crit = float(np.quantile(tstat.max(axis=1), level))
    half = np.where(se > 0, crit * se, 0.0)
    return est - half, est + half, crit
