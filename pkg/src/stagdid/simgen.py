"""Simulated staggered-adoption panels with cluster-level entry.

Clusters draw covariate means, units draw covariates around them, and each
cluster draws its entry period from a softmax over periods 3, 4 and 5 driven
by the cluster covariates X4 (three levels) and X5 (binary). Outcomes follow
a two-way model with period-specific covariate slopes plus a treatment
effect surface ``f(g, t)``.

``Normal(m, v)`` parameters below are variances.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass, field, replace

import numpy as np

from . import errors
from .aggregation import aggregate, weights_aggregate, weights_event_time
from .panel import CohortMap, CovariateMeta, PanelDataset, derive_cohorts

ENTRY_PERIODS = (3, 4, 5)
# rows: intercept, X4 level 1, X4 level 2, X4 level 3, X5; columns: entry period 3, 4, 5
DEFAULT_THETA = (
    (-0.87, -0.70, -0.46),
    (1.20, 0.10, 0.65),
    (1.54, 1.26, 0.83),
    (1.90, 1.54, 1.02),
    (-2.57, -2.10, -1.39),
)
X4_PROBS = (0.4, 0.3, 0.3)
X4_LEVELS = ("L1", "L2", "L3")
SCENARIOS = ("constant", "lagged", "grouptimehet", "custom")
TRUTH_SCHEMES = ("cs", "iw", "twostage")


def scenario_presets(name: str, tbar: int = 5) -> dict[tuple[int, int], float]:
    """Effect surface ``f(g, t)`` for entry periods 3..5 and ``t = 1..tbar``.

    ``constant``: 2. ``lagged``: 2 from one period after entry.
    ``grouptimehet``: ``1 + 0.5 (t - g) + 0.25 (5 - g)``, growing with
    exposure and larger for early cohorts. Zero before entry in every case.

    Raises
    ------
    UnknownScenario
    """
    key = name.lower().replace("_", "").replace("-", "")
    if key == "constant":
        rule = lambda g, t: 2.0  # noqa: E731
    elif key == "lagged":
        rule = lambda g, t: 2.0 if t - g >= 1 else 0.0  # noqa: E731
    elif key == "grouptimehet":
        rule = lambda g, t: 1.0 + 0.5 * (t - g) + 0.25 * (5 - g)  # noqa: E731
    else:
        raise errors.UnknownScenario(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS[:3])} or custom")
    return {(g, t): (rule(g, t) if t >= g else 0.0) for g in ENTRY_PERIODS for t in range(1, tbar + 1)}


@dataclass(frozen=True)
class SimConfig:
    n: int = 2000
    n_clusters: int = 100
    tbar: int = 5
    scenario: str = "constant"
    effect: Mapping[tuple[int, int], float] | None = None  # required for "custom"
    theta: tuple = DEFAULT_THETA
    var_unit: float = 0.5
    var_cluster: float = 0.5
    var_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1 or self.n < self.n_clusters:
            raise errors.ConfigError("need 1 <= n_clusters <= n", field="n_clusters")
        if self.tbar < max(ENTRY_PERIODS):
            raise errors.ConfigError(f"tbar must be at least {max(ENTRY_PERIODS)}", field="tbar")
        if np.shape(self.theta) != (5, 3):
            raise errors.ConfigError("theta must be 5 x 3", field="theta")
        for name in ("var_unit", "var_cluster", "var_noise"):
            if getattr(self, name) < 0:
                raise errors.ConfigError("variances must be nonnegative", field=name)
        if self.scenario.lower() == "custom":
            if not self.effect:
                raise errors.ConfigError("custom scenario needs an effect surface", field="effect")
        else:
            scenario_presets(self.scenario, self.tbar)

    def effect_surface(self) -> dict[tuple[int, int], float]:
        if self.scenario.lower() == "custom":
            f = {(g, t): 0.0 for g in ENTRY_PERIODS for t in range(1, self.tbar + 1)}
            f.update({(int(g), int(t)): (float(v) if t >= g else 0.0) for (g, t), v in self.effect.items()})
            return f
        return scenario_presets(self.scenario, self.tbar)


@dataclass
class Covariates:
    cluster: np.ndarray  # cluster index per unit
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    x4: np.ndarray  # per cluster, level 1..3
    x5: np.ndarray  # per cluster, 0/1
    mu: np.ndarray
    nu: np.ndarray
    p: np.ndarray


def cluster_sizes(n: int, n_clusters: int) -> np.ndarray:
    """Split ``n`` units as evenly as possible; earlier clusters take the remainder."""
    sizes = np.full(n_clusters, n // n_clusters)
    sizes[: n % n_clusters] += 1
    return sizes


def gen_covariates(config: SimConfig, rng: np.random.Generator) -> Covariates:
    C = config.n_clusters
    cluster = np.repeat(np.arange(C), cluster_sizes(config.n, C))
    mu = rng.normal(5.0, 2.0, C)
    nu = rng.normal(5.0, 1.0, C)
    p = rng.uniform(0.5, 0.6, C)
    x1 = rng.normal(mu[cluster], 1.0)
    x2 = rng.normal(nu[cluster], 1.0)
    x3 = (rng.random(config.n) < p[cluster]).astype(float)
    x4 = rng.choice(3, size=C, p=X4_PROBS) + 1
    x5 = (rng.random(C) < 0.7).astype(float)
    return Covariates(cluster, x1, x2, x3, x4, x5, mu, nu, p)


def entry_scores(x4: np.ndarray, x5: np.ndarray, theta=DEFAULT_THETA) -> np.ndarray:
    """Linear scores ``theta[0,k] + theta[level,k] + theta[4,k] * X5``, shape (m, 3)."""
    th = np.asarray(theta, dtype=float)
    x4 = np.asarray(x4, dtype=int)
    return th[0][None, :] + th[x4] + th[4][None, :] * np.asarray(x5, dtype=float)[:, None]


def entry_probabilities(x4, x5, theta=DEFAULT_THETA) -> np.ndarray:
    s = entry_scores(np.atleast_1d(x4), np.atleast_1d(x5), theta)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def marginal_entry_shares(theta=DEFAULT_THETA, p_x5: float = 0.7) -> np.ndarray:
    """Population entry shares implied by ``theta`` and the covariate law."""
    out = np.zeros(3)
    for level, pl in zip((1, 2, 3), X4_PROBS):
        for x5, px in ((0, 1 - p_x5), (1, p_x5)):
            out += pl * px * entry_probabilities(level, x5, theta)[0]
    return out


def assign_entry(x4: np.ndarray, x5: np.ndarray, theta, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per cluster over entry periods 3, 4, 5."""
    probs = entry_probabilities(x4, x5, theta)
    u = rng.random(len(probs))
    idx = (u[:, None] >= np.cumsum(probs, axis=1)[:, :-1]).sum(axis=1)
    return np.asarray(ENTRY_PERIODS)[idx]


@dataclass
class TruthTable:
    """True estimands of one generated panel.

    ``f`` holds the effect surface on the realized cohorts; ``event`` and
    ``aggr`` hold the targets under each weighting scheme computed from the
    realized cohort shares.
    """

    f: dict[tuple[int, int], float]
    shares: dict[int, float]
    event: dict[str, dict[int, float]] = field(default_factory=dict)
    aggr: dict[str, float] = field(default_factory=dict)

    def value(self, weights: Mapping[tuple[int, int], float]) -> float:
        """Truth targeted by explicit cell weights; cells before entry count as zero."""
        return float(sum(w * self.f.get(c, 0.0) for c, w in weights.items()))

    def to_json(self) -> str:
        doc = {
            "f": [{"g": g, "t": t, "value": v} for (g, t), v in sorted(self.f.items())],
            "shares": {str(g): s for g, s in sorted(self.shares.items())},
            "event": {k: {str(e): v for e, v in sorted(d.items())} for k, d in self.event.items()},
            "aggr": dict(self.aggr),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TruthTable":
        doc = json.loads(text)
        return cls(
            f={(r["g"], r["t"]): r["value"] for r in doc["f"]},
            shares={int(g): s for g, s in doc["shares"].items()},
            event={k: {int(e): v for e, v in d.items()} for k, d in doc["event"].items()},
            aggr=doc["aggr"],
        )


def truth_table(f: Mapping[tuple[int, int], float], cohorts: CohortMap) -> TruthTable:
    tbar = cohorts.tbar
    f_real = {(g, t): float(f.get((g, t), 0.0)) for g in cohorts.support for t in range(1, tbar + 1)}
    n_treated = sum(cohorts.counts[g] for g in cohorts.support)
    tt = TruthTable(f_real, {g: cohorts.counts[g] / n_treated for g in cohorts.support})
    for scheme in TRUTH_SCHEMES:
        ev = {}
        for ell in range(-(tbar - 2), tbar - 1):
            try:
                ev[ell] = aggregate(f_real, weights_event_time(cohorts, ell, scheme))[0]
            except errors.NoFeasibleCohort:
                continue
        tt.event[scheme] = ev
        tt.aggr[scheme] = aggregate(f_real, weights_aggregate(cohorts, scheme))[0]
    return tt


def _pad(prefix: str, k: np.ndarray, width: int) -> np.ndarray:
    return np.char.add(prefix, np.char.zfill(k.astype(str), width)).astype(object)


def gen_outcomes(config: SimConfig, cov: Covariates, g_cluster: np.ndarray,
                 rng: np.random.Generator) -> tuple[PanelDataset, TruthTable]:
    n, C, T = config.n, config.n_clusters, config.tbar
    t = np.arange(1, T + 1)
    beta = 1.0 + (t - 1) / 5.0
    # every covariate column gets slope beta_t; X4 enters through its three level indicators
    x4_unit = cov.x4[cov.cluster]
    xsum = cov.x1 + cov.x2 + cov.x3 + 1.0 + cov.x5[cov.cluster]
    eta = rng.normal(0.0, math.sqrt(config.var_unit), n)
    xi = rng.normal(0.0, math.sqrt(config.var_cluster), C)
    eps = rng.normal(0.0, math.sqrt(config.var_noise), (n, T))
    y0 = t[None, :] + xsum[:, None] * beta[None, :] + (eta + xi[cov.cluster])[:, None] + eps
    G = g_cluster[cov.cluster]
    f = config.effect_surface()
    fmat = np.array([[f.get((g, s), 0.0) for s in t] for g in ENTRY_PERIODS])
    a = (t[None, :] >= G[:, None]).astype(np.int8)
    y = y0 + a * fmat[G - ENTRY_PERIODS[0]]

    # categorical levels in order of first appearance, as validate_panel would record them
    first = [lv for lv in dict.fromkeys(x4_unit.tolist())]
    level_names = tuple(X4_LEVELS[lv - 1] for lv in first)
    code_of = {lv: i for i, lv in enumerate(first)}
    x4_codes = np.array([code_of[v] for v in x4_unit.tolist()], dtype=np.int64)

    metas = (
        CovariateMeta("X1", "continuous"),
        CovariateMeta("X2", "continuous"),
        CovariateMeta("X3", "binary"),
        CovariateMeta("X4", "categorical", level_names),
        CovariateMeta("X5", "binary"),
    )
    panel = PanelDataset(
        unit_ids=_pad("u", np.arange(1, n + 1), max(5, len(str(n)))),
        cluster_ids=_pad("c", cov.cluster + 1, max(3, len(str(C)))),
        cluster_codes=cov.cluster.astype(np.int64),
        y=y,
        a=a,
        x=(cov.x1, cov.x2, cov.x3, x4_codes, cov.x5[cov.cluster].astype(float)),
        covariates=metas,
    )
    return panel, truth_table(f, derive_cohorts(panel))


def simulate(config: SimConfig, rng: np.random.Generator | None = None) -> tuple[PanelDataset, TruthTable]:
    """Generate one panel and its truth table (seeded from ``config.seed`` unless ``rng`` is given)."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    cov = gen_covariates(config, rng)
    g_cluster = assign_entry(cov.x4, cov.x5, config.theta, rng)
    return gen_outcomes(config, cov, g_cluster, rng)


def with_overrides(config: SimConfig, **kw) -> SimConfig:
    return replace(config, **kw)
