"""Monte-Carlo benchmark: simulate, estimate, score against the truth."""

from __future__ import annotations

import json
import math
import sys
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from . import errors
from .bootstrap import BootstrapSpec
from .panel import EstimandSpec
from .pipeline import METHODS, check_support, estimate
from .simgen import SimConfig, TruthTable, simulate

# nominal weighting scheme each method targets, used for the nominal-truth column
NOMINAL_SCHEME = {"cs-dr": "cs", "cs-ipw": "cs", "cs-or": "cs", "sunab": "iw",
                  "twostage": "twostage", "mundlak": "twostage", "twfe": "twostage"}

GROUP_KEYS = ["scenario", "n", "n_clusters", "method", "estimand"]
METRIC_COLUMNS = GROUP_KEYS + [
    "mean_estimate", "mean_truth", "bias", "abs_bias", "mse", "coverage", "mean_ci_width",
    "sd_estimate", "mc_se", "mean_truth_nominal", "n_ok", "n_failed", "all_failed",
]
RECORD_COLUMNS = ["cell", "rep", "scenario", "n", "n_clusters", "method", "estimand", "estimate",
                  "ci_lo", "ci_hi", "truth", "truth_nominal", "ok", "error"]


@dataclass
class BenchmarkPlan:
    """Grid of simulation settings, methods and estimands.

    ``estimands`` is either one list applied to every method or a mapping
    from method to its own list. ``bootstrap=None`` skips inference (coverage
    is then NaN). ``band`` adds sup-t rows for the group-time methods.
    """

    scenarios: Sequence[str] = ("constant",)
    ns: Sequence[int] = (2000,)
    cluster_counts: Sequence[int] = (100,)
    methods: Sequence[str] = ("cs-dr",)
    estimands: Sequence[str] | Mapping[str, Sequence[str]] = ("aggr",)
    replications: int = 200
    bootstrap: BootstrapSpec | None = None
    band: bool = False
    seed: int = 0
    base: SimConfig = field(default_factory=SimConfig)
    method_options: Mapping[str, Mapping] = field(default_factory=dict)

    def estimands_for(self, method: str) -> list[str]:
        if isinstance(self.estimands, Mapping):
            return list(self.estimands.get(method, ()))
        return list(self.estimands)

    def validate(self) -> None:
        """Raises ConfigError on any invalid entry."""
        if self.replications < 1:
            raise errors.ConfigError("replications must be at least 1", field="replications")
        if not self.methods:
            raise errors.ConfigError("at least one method is required", field="methods")
        for m in self.methods:
            if m not in METHODS:
                raise errors.ConfigError(f"unknown method {m!r}", field="methods")
            keys = self.estimands_for(m)
            if not keys:
                raise errors.ConfigError(f"no estimands for method {m}", field="estimands")
            for k in keys:
                try:
                    check_support(m, EstimandSpec.parse(k))
                except (ValueError, errors.StagDidError) as exc:
                    raise errors.ConfigError(f"{m} / {k}: {exc}", field="estimands") from None
        if self.band and self.bootstrap is None:
            raise errors.ConfigError("simultaneous bands need a bootstrap", field="band")
        for s in self.scenarios:
            self.config(s, self.ns[0], self.cluster_counts[0])
        for n in self.ns:
            for c in self.cluster_counts:
                self.config(self.scenarios[0], n, c)

    def config(self, scenario: str, n: int, n_clusters: int) -> SimConfig:
        try:
            return replace(self.base, scenario=scenario, n=int(n), n_clusters=int(n_clusters))
        except errors.UnknownScenario as exc:
            raise errors.ConfigError(str(exc), field="scenarios") from None

    def grid(self) -> list[SimConfig]:
        return [self.config(s, n, c) for s in self.scenarios for n in self.ns for c in self.cluster_counts]


def _stream(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))


def run_replication(plan: BenchmarkPlan, cell: int, rep: int) -> list[dict]:
    """Simulate one panel and score every method; never raises for estimator failures."""
    cfg = plan.grid()[cell]
    panel, truth = simulate(cfg, np.random.default_rng(_stream(plan.seed, cell, rep)))
    rows = []
    for m_idx, method in enumerate(plan.methods):
        specs = [EstimandSpec.parse(k) for k in plan.estimands_for(method)]
        boot = None
        if plan.bootstrap is not None:
            bseed = int(_stream(plan.seed, cell, rep, m_idx + 1).generate_state(1)[0])
            boot = replace(plan.bootstrap, seed=bseed)
        opts = dict(plan.method_options.get(method, {}))
        band = plan.band and method.startswith("cs-") and any(s.kind == "gt" for s in specs)
        base = {"cell": cell, "rep": rep, "scenario": cfg.scenario, "n": cfg.n, "n_clusters": cfg.n_clusters}
        try:
            table = estimate(panel, method, specs, bootstrap=boot, band=band, **opts)
            weights = {k: v.weights for k, v in table.points.items()}
        except (errors.StagDidError, ArithmeticError, np.linalg.LinAlgError) as exc:
            for s in specs:
                rows.append({**base, "method": method, "estimand": s.key, "estimate": math.nan,
                             "ci_lo": math.nan, "ci_hi": math.nan, "truth": math.nan,
                             "truth_nominal": _nominal(truth, method, s), "ok": False,
                             "error": f"{type(exc).__name__}: {exc}"})
            continue
        for r in table.rows:
            s = EstimandSpec.parse(r.estimand)
            ok = math.isfinite(r.estimate)
            rows.append({**base, "method": r.method, "estimand": r.estimand, "estimate": r.estimate,
                         "ci_lo": r.ci_lo, "ci_hi": r.ci_hi,
                         "truth": truth.value(weights[r.estimand]) if ok else math.nan,
                         "truth_nominal": _nominal(truth, method, s), "ok": ok,
                         "error": "" if ok else "missing estimate"})
    return rows


def _nominal(truth: TruthTable, method: str, spec: EstimandSpec) -> float:
    scheme = NOMINAL_SCHEME[method]
    if spec.kind == "gt":
        return truth.f.get((spec.g, spec.t), math.nan)
    if spec.kind == "event":
        return truth.event[scheme].get(spec.ell, math.nan)
    return truth.aggr[scheme]


def _task(args):
    plan, cell, rep = args
    return run_replication(plan, cell, rep)


def run_benchmark(plan: BenchmarkPlan, workers: int = 1,
                  progress: Callable[[int, int], None] | None = None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Run every (grid cell, replication) and reduce to metrics.

    Replications are independent tasks with pre-assigned RNG streams and the
    reduction runs over records in task order, so results do not depend on
    ``workers``.

    Returns
    -------
    records, metrics
    """
    plan.validate()
    tasks = [(plan, c, r) for c in range(len(plan.grid())) for r in range(plan.replications)]
    results: list[list[dict]] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for i, res in enumerate(ex.map(_task, tasks, chunksize=max(1, len(tasks) // (8 * workers)))):
                results.append(res)
                if progress:
                    progress(i + 1, len(tasks))
    else:
        for i, t in enumerate(tasks):
            results.append(_task(t))
            if progress:
                progress(i + 1, len(tasks))
    records = pd.DataFrame([row for res in results for row in res], columns=RECORD_COLUMNS)
    return records, summarize_records(records)


def summarize_records(records: pd.DataFrame) -> pd.DataFrame:
    """Reduce per-replication records to the metrics table.

    ``bias`` is signed ``mean(estimate - truth)``; ``mse`` is computed as the
    population variance of the errors plus ``bias**2`` so that
    ``mse >= bias**2`` holds exactly.
    """
    out = []
    order = records[GROUP_KEYS].drop_duplicates()
    for key in order.itertuples(index=False):
        sel = records
        for col, val in zip(GROUP_KEYS, key):
            sel = sel[sel[col] == val]
        ok = sel[sel["ok"].astype(bool)]
        n_ok, n_failed = len(ok), len(sel) - len(ok)
        row = dict(zip(GROUP_KEYS, key))
        row.update(n_ok=n_ok, n_failed=n_failed, all_failed=n_ok == 0)
        est = ok["estimate"].to_numpy(float)
        tru = ok["truth"].to_numpy(float)
        if n_ok:
            err = est - tru
            bias = float(err.mean())
            lo, hi = ok["ci_lo"].to_numpy(float), ok["ci_hi"].to_numpy(float)
            has_ci = np.isfinite(lo) & np.isfinite(hi)
            row.update(
                mean_estimate=float(est.mean()),
                mean_truth=float(tru.mean()),
                bias=bias,
                abs_bias=abs(bias),
                mse=float(np.mean((err - bias) ** 2)) + bias ** 2,
                coverage=float(np.mean((lo <= tru) & (tru <= hi))) if has_ci.all() else math.nan,
                mean_ci_width=float(np.mean(hi - lo)) if has_ci.all() else math.nan,
                sd_estimate=float(est.std(ddof=1)) if n_ok > 1 else math.nan,
                mc_se=float(est.std(ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else math.nan,
            )
        else:
            row.update({c: math.nan for c in ("mean_estimate", "mean_truth", "bias", "abs_bias", "mse",
                                              "coverage", "mean_ci_width", "sd_estimate", "mc_se")})
        row["mean_truth_nominal"] = float(sel["truth_nominal"].astype(float).mean())
        out.append(row)
    return pd.DataFrame(out, columns=METRIC_COLUMNS)


# ---------------------------------------------------------------- reporting

PLOT_METRICS = ("coverage", "mse", "abs_bias")


def metrics_to_csv(metrics: pd.DataFrame) -> str:
    return metrics.to_csv(index=False, lineterminator="\n", float_format="%.17g")


def read_metrics_csv(source) -> pd.DataFrame:
    frame = pd.read_csv(source, dtype={"scenario": str, "method": str, "estimand": str},
                        float_precision="round_trip")
    missing = [c for c in METRIC_COLUMNS if c not in frame.columns]
    if missing:
        raise errors.ConfigError(f"metrics file lacks columns {missing}", field="metrics")
    frame["all_failed"] = frame["all_failed"].astype(bool)
    return frame[METRIC_COLUMNS]


def metrics_to_json(metrics: pd.DataFrame) -> str:
    recs = json.loads(metrics.to_json(orient="records", double_precision=15))
    return json.dumps({"metrics": recs}, indent=2)


def plot_data(metrics: pd.DataFrame) -> dict[str, pd.DataFrame]:
    """Long tables per metric: x = n, panel = n_clusters, series = method."""
    out = {}
    for metric in PLOT_METRICS:
        frame = metrics[["scenario", "estimand", "n_clusters", "n", "method", metric]].rename(
            columns={"n_clusters": "panel", "n": "x", "method": "series", metric: "value"})
        out[metric] = frame.sort_values(["scenario", "estimand", "panel", "series", "x"], kind="stable") \
            .reset_index(drop=True)
    return out


def summarize(metrics: pd.DataFrame, fmt: str = "csv") -> dict[str, str]:
    """Render the metrics table and per-metric plot data as text artifacts.

    ``fmt`` selects the table rendering: ``csv``, ``json`` or ``markdown``.
    Plot data is always CSV.
    """
    if metrics.empty:
        raise errors.ConfigError("empty metrics table", field="metrics")
    table = metrics.sort_values(GROUP_KEYS, kind="stable").reset_index(drop=True)
    artifacts = {}
    if fmt == "csv":
        artifacts["table.csv"] = metrics_to_csv(table)
    elif fmt == "json":
        artifacts["table.json"] = metrics_to_json(table)
    elif fmt == "markdown":
        artifacts["table.md"] = _markdown(table)
    else:
        raise errors.ConfigError(f"unknown format {fmt!r}", field="format")
    for metric, frame in plot_data(table).items():
        artifacts[f"plot_{metric}.csv"] = frame.to_csv(index=False, lineterminator="\n", float_format="%.17g")
    return artifacts


def _markdown(frame: pd.DataFrame) -> str:
    cols = list(frame.columns)
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for rec in frame.itertuples(index=False):
        cells = [f"{v:.4g}" if isinstance(v, float) else str(v) for v in rec]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def print_progress(done: int, total: int, stream=None) -> None:
    if done == total or done % max(1, total // 20) == 0:
        print(f"[benchmark] {done}/{total} replications", file=stream or sys.stderr, flush=True)

