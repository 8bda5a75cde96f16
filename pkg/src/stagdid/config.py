"""YAML configuration for simulations and benchmark plans.

Every key is optional; omitted keys take the defaults printed by
``stagdid simulate --print-config`` / ``stagdid benchmark --print-config``.
Errors name the offending key in ``ConfigError.field``.
"""

from __future__ import annotations

from collections.abc import Mapping
from pathlib import Path

import yaml

from . import errors
from .bench import BenchmarkPlan
from .bootstrap import BootstrapSpec
from .pipeline import METHODS
from .simgen import DEFAULT_THETA, SimConfig

SIM_DEFAULTS = {
    "n": 2000,
    "n_clusters": 100,
    "tbar": 5,
    "scenario": "constant",
    "seed": 0,
    "effect": None,
    "theta": [list(r) for r in DEFAULT_THETA],
    "variances": {"unit": 0.5, "cluster": 0.5, "noise": 0.5},
}

BENCH_DEFAULTS = {
    "seed": 0,
    "replications": 200,
    "scenarios": ["constant"],
    "n": [2000],
    "n_clusters": [100],
    "methods": ["cs-dr", "cs-ipw", "sunab", "twostage", "mundlak"],
    "estimands": {
        "cs-dr": ["aggr"],
        "cs-ipw": ["aggr"],
        "sunab": ["aggr"],
        "twostage": ["aggr"],
        "mundlak": ["aggr"],
    },
    "bootstrap": {"B": 99, "level": 0.95},
    "band": False,
    "simulation": {"tbar": 5, "effect": None, "theta": None, "variances": None},
    "method_options": {},
}


def load_yaml(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise errors.ConfigError(f"cannot parse {path}: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, Mapping):
        raise errors.ConfigError("top level must be a mapping")
    return dict(doc)


def _check_keys(block: Mapping, allowed, where: str) -> None:
    for k in block:
        if k not in allowed:
            raise errors.ConfigError(f"unknown key {where}.{k}", field=f"{where}.{k}")


def _int(block, key, where, minimum=None):
    v = block[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise errors.ConfigError(f"{where}.{key} must be an integer", field=f"{where}.{key}")
    if minimum is not None and v < minimum:
        raise errors.ConfigError(f"{where}.{key} must be >= {minimum}", field=f"{where}.{key}")
    return v


def _effect(spec, where):
    if spec is None:
        return None
    out = {}
    try:
        if isinstance(spec, Mapping):
            for k, v in spec.items():
                g, t = (int(s) for s in str(k).split(","))
                out[(g, t)] = float(v)
        else:
            for rec in spec:
                out[(int(rec["g"]), int(rec["t"]))] = float(rec["value"])
    except (TypeError, ValueError, KeyError):
        raise errors.ConfigError(f"{where}.effect must map 'g,t' to a number or list {{g, t, value}}",
                                 field=f"{where}.effect") from None
    return out


def _sim_kwargs(block: Mapping, where: str) -> dict:
    kw = {}
    if block.get("tbar") is not None:
        kw["tbar"] = _int(block, "tbar", where, 5)
    if block.get("effect") is not None:
        kw["effect"] = _effect(block["effect"], where)
    if block.get("theta") is not None:
        try:
            theta = tuple(tuple(float(v) for v in row) for row in block["theta"])
        except (TypeError, ValueError):
            raise errors.ConfigError(f"{where}.theta must be a 5 x 3 numeric table", field=f"{where}.theta") from None
        kw["theta"] = theta
    var = block.get("variances")
    if var is not None:
        if not isinstance(var, Mapping):
            raise errors.ConfigError(f"{where}.variances must be a mapping", field=f"{where}.variances")
        _check_keys(var, ("unit", "cluster", "noise"), f"{where}.variances")
        for k in ("unit", "cluster", "noise"):
            if k in var:
                kw[f"var_{k}"] = float(var[k])
    return kw


def sim_config_from_dict(doc: Mapping) -> SimConfig:
    block = doc.get("simulation", doc)
    if not isinstance(block, Mapping):
        raise errors.ConfigError("simulation must be a mapping", field="simulation")
    _check_keys(block, SIM_DEFAULTS, "simulation")
    merged = {**SIM_DEFAULTS, **block}
    kw = _sim_kwargs(merged, "simulation")
    scenario = merged["scenario"]
    if not isinstance(scenario, str):
        raise errors.ConfigError("simulation.scenario must be a string", field="simulation.scenario")
    try:
        return SimConfig(n=_int(merged, "n", "simulation", 1), n_clusters=_int(merged, "n_clusters", "simulation", 1),
                         scenario=scenario, seed=_int(merged, "seed", "simulation", 0), **kw)
    except errors.UnknownScenario as exc:
        raise errors.ConfigError(str(exc), field="simulation.scenario") from None
    except errors.ConfigError as exc:
        raise errors.ConfigError(str(exc), field=f"simulation.{exc.field}" if exc.field else None) from None


def _list(block, key, where, kind=int):
    v = block[key]
    v = v if isinstance(v, list) else [v]
    try:
        return [kind(x) for x in v]
    except (TypeError, ValueError):
        raise errors.ConfigError(f"{where}.{key} has an invalid entry", field=f"{where}.{key}") from None


def plan_from_dict(doc: Mapping) -> BenchmarkPlan:
    block = doc.get("benchmark", doc)
    if not isinstance(block, Mapping):
        raise errors.ConfigError("benchmark must be a mapping", field="benchmark")
    _check_keys(block, BENCH_DEFAULTS, "benchmark")
    merged = {**BENCH_DEFAULTS, **block}
    where = "benchmark"
    boot = merged["bootstrap"]
    spec = None
    if boot:
        if not isinstance(boot, Mapping):
            raise errors.ConfigError("benchmark.bootstrap must be a mapping or null", field="benchmark.bootstrap")
        _check_keys(boot, ("B", "level"), "benchmark.bootstrap")
        try:
            spec = BootstrapSpec(B=int(boot.get("B", 99)), level=float(boot.get("level", 0.95)))
        except ValueError as exc:
            raise errors.ConfigError(str(exc), field="benchmark.bootstrap") from None
    methods = _list(merged, "methods", where, str)
    for m in methods:
        if m not in METHODS:
            raise errors.ConfigError(f"unknown method {m!r}", field="benchmark.methods")
    estimands = merged["estimands"]
    if isinstance(estimands, Mapping):
        estimands = {str(k): [str(e) for e in v] for k, v in estimands.items()}
    else:
        estimands = _list(merged, "estimands", where, str)
    sim = merged["simulation"] or {}
    if not isinstance(sim, Mapping):
        raise errors.ConfigError("benchmark.simulation must be a mapping", field="benchmark.simulation")
    _check_keys(sim, ("tbar", "effect", "theta", "variances"), "benchmark.simulation")
    scenarios = _list(merged, "scenarios", where, str)
    base_kw = _sim_kwargs(sim, "benchmark.simulation")
    try:
        base = SimConfig(scenario=scenarios[0] if scenarios else "constant", **base_kw)
    except errors.UnknownScenario as exc:
        raise errors.ConfigError(str(exc), field="benchmark.scenarios") from None
    plan = BenchmarkPlan(
        scenarios=scenarios,
        ns=_list(merged, "n", where),
        cluster_counts=_list(merged, "n_clusters", where),
        methods=methods,
        estimands=estimands,
        replications=_int(merged, "replications", where, 1),
        bootstrap=spec,
        band=bool(merged["band"]),
        seed=_int(merged, "seed", where, 0),
        base=base,
        method_options=dict(merged["method_options"] or {}),
    )
    plan.validate()
    return plan


def resolved_sim(config: SimConfig) -> dict:
    return {
        "n": config.n,
        "n_clusters": config.n_clusters,
        "tbar": config.tbar,
        "scenario": config.scenario,
        "seed": config.seed,
        "effect": None if config.effect is None else {f"{g},{t}": v for (g, t), v in sorted(config.effect.items())},
        "theta": [list(r) for r in config.theta],
        "variances": {"unit": config.var_unit, "cluster": config.var_cluster, "noise": config.var_noise},
    }


def resolved_plan(plan: BenchmarkPlan) -> dict:
    sim = resolved_sim(plan.base)
    return {
        "seed": plan.seed,
        "replications": plan.replications,
        "scenarios": list(plan.scenarios),
        "n": list(plan.ns),
        "n_clusters": list(plan.cluster_counts),
        "methods": list(plan.methods),
        "estimands": {m: plan.estimands_for(m) for m in plan.methods},
        "bootstrap": None if plan.bootstrap is None else {"B": plan.bootstrap.B, "level": plan.bootstrap.level},
        "band": plan.band,
        "simulation": {k: sim[k] for k in ("tbar", "effect", "theta", "variances")},
        "method_options": dict(plan.method_options),
    }


def dump_yaml(doc: Mapping) -> str:
    return yaml.safe_dump(dict(doc), sort_keys=False, default_flow_style=None)
