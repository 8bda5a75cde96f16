import io
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from stagdid import bench, errors
from stagdid.bootstrap import BootstrapSpec
from stagdid.simgen import SimConfig

NOISELESS = SimConfig(n=300, n_clusters=30, var_unit=0.0, var_cluster=0.0, var_noise=0.0)


def small_plan(**kw):
    base = dict(ns=(300,), cluster_counts=(30,), methods=("cs-dr", "mundlak"), replications=2,
                base=SimConfig(n=300, n_clusters=30), seed=7)
    base.update(kw)
    return bench.BenchmarkPlan(**base)


def test_noiseless_single_replication():
    plan = small_plan(replications=1, base=NOISELESS, methods=("cs-dr", "cs-or", "mundlak"))
    records, metrics = bench.run_benchmark(plan)
    assert records["ok"].all()
    err = (records["estimate"] - records["truth"]).to_numpy()
    assert_allclose(err, 0.0, atol=1e-8)
    assert_allclose(metrics["abs_bias"], np.abs(err), atol=1e-15)
    assert_allclose(metrics["mse"], metrics["bias"] ** 2, rtol=1e-12, atol=1e-30)


def record_frame(est, truth, lo=None, hi=None, ok=None):
    k = len(est)
    return pd.DataFrame({
        "cell": 0, "rep": range(k), "scenario": "constant", "n": 100, "n_clusters": 10, "method": "cs-dr",
        "estimand": "aggr", "estimate": est, "ci_lo": lo if lo is not None else [math.nan] * k,
        "ci_hi": hi if hi is not None else [math.nan] * k, "truth": truth, "truth_nominal": truth,
        "ok": ok if ok is not None else [True] * k, "error": "",
    })[bench.RECORD_COLUMNS]


def test_metrics_by_hand():
    est = [1.0, 2.0, 4.0]
    truth = [2.0, 2.0, 2.0]
    m = bench.summarize_records(record_frame(est, truth, lo=[0.5, 1.5, 3.5], hi=[2.5, 2.5, 4.5])).iloc[0]
    assert_allclose(m["bias"], 1 / 3)
    assert_allclose(m["mse"], (1 + 0 + 4) / 3)
    assert_allclose(m["coverage"], 2 / 3)
    assert_allclose(m["mean_estimate"], 7 / 3)
    assert math.isnan(bench.summarize_records(record_frame(est, truth)).iloc[0]["coverage"])


def test_failures_counted_and_flagged():
    m = bench.summarize_records(record_frame([1.0, math.nan], [1.0, 1.0], ok=[True, False])).iloc[0]
    assert m["n_ok"] == 1 and m["n_failed"] == 1 and not m["all_failed"]
    m = bench.summarize_records(record_frame([math.nan], [1.0], ok=[False])).iloc[0]
    assert m["all_failed"] and math.isnan(m["bias"])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=30))
def test_mse_at_least_bias_squared(pairs):
    est, truth = zip(*pairs)
    m = bench.summarize_records(record_frame(list(est), list(truth))).iloc[0]
    assert m["mse"] >= m["bias"] ** 2
    # mean estimate is recoverable from the bias and the mean truth
    assert_allclose(m["mean_estimate"], m["bias"] + m["mean_truth"], atol=1e-12 * (1 + abs(m["mean_truth"])) + 1e-9)


def test_metrics_csv_round_trip():
    _, metrics = bench.run_benchmark(small_plan(bootstrap=BootstrapSpec(B=9)))
    text = bench.metrics_to_csv(metrics)
    back = bench.read_metrics_csv(io.StringIO(text))
    pd.testing.assert_frame_equal(back, metrics, check_dtype=False)
    assert bench.metrics_to_csv(back) == text
    assert {"n_failed", "all_failed"} <= set(metrics.columns)


def test_worker_count_does_not_change_metrics():
    plan = small_plan(bootstrap=BootstrapSpec(B=9), replications=3)
    _, m1 = bench.run_benchmark(plan, workers=1)
    _, m2 = bench.run_benchmark(plan, workers=2)
    assert bench.metrics_to_csv(m1) == bench.metrics_to_csv(m2)


def test_coverage_in_unit_interval():
    _, metrics = bench.run_benchmark(small_plan(bootstrap=BootstrapSpec(B=19), replications=3))
    assert metrics["coverage"].between(0, 1).all()


def test_estimator_failure_recorded_not_raised():
    # a missing cell makes the strict group-time estimand fail for this method only
    plan = small_plan(methods=("mundlak", "cs-dr"), estimands={"mundlak": ["gt:5:5"], "cs-dr": ["aggr"]},
                      replications=1)
    records, metrics = bench.run_benchmark(plan)
    mund = records[records["method"] == "mundlak"]
    assert not mund["ok"].any() and mund["error"].str.len().gt(0).all()
    assert metrics.set_index("method").loc["mundlak", "all_failed"]
    assert records[records["method"] == "cs-dr"]["ok"].all()


def test_plan_validation():
    with pytest.raises(errors.ConfigError, match="method"):
        small_plan(methods=()).validate()
    with pytest.raises(errors.ConfigError):
        small_plan(methods=("nope",)).validate()
    with pytest.raises(errors.ConfigError):
        small_plan(estimands=("event:-1",)).validate()
    with pytest.raises(errors.ConfigError):
        small_plan(replications=0).validate()
    with pytest.raises(errors.ConfigError):
        small_plan(scenarios=("wavy",)).validate()
    with pytest.raises(errors.ConfigError):
        small_plan(band=True).validate()


def test_summarize_artifacts():
    _, metrics = bench.run_benchmark(small_plan(replications=1))
    for fmt, name in (("csv", "table.csv"), ("json", "table.json"), ("markdown", "table.md")):
        arts = bench.summarize(metrics, fmt)
        assert name in arts
        assert {"plot_coverage.csv", "plot_mse.csv", "plot_abs_bias.csv"} <= set(arts)
    plot = pd.read_csv(io.StringIO(bench.summarize(metrics)["plot_mse.csv"]))
    assert list(plot.columns) == ["scenario", "estimand", "panel", "x", "series", "value"]
    with pytest.raises(errors.ConfigError):
        bench.summarize(metrics, "xlsx")
    with pytest.raises(errors.ConfigError):
        bench.summarize(metrics.iloc[:0])
