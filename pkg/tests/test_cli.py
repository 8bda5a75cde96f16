import json
import time

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from stagdid import cli, manifest
from stagdid.bench import read_metrics_csv


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(cli.main, [str(a) for a in args], catch_exceptions=False)


def error_doc(result):
    line = [ln for ln in result.stderr.splitlines() if ln.startswith("error: ")][-1]
    return json.loads(line[len("error: "):])


def write(path, text):
    path.write_text(text)
    return path


MINIMAL = "simulation:\n  n: 500\n  n_clusters: 30\n  scenario: constant\n  seed: 3\n"


def test_simulate_rows_and_manifest(runner, tmp_path):
    conf = write(tmp_path / "sim.yaml", MINIMAL)
    res = invoke(runner, "simulate", "--config", conf, "--out", tmp_path / "a")
    assert res.exit_code == 0, res.stderr
    frame = pd.read_csv(tmp_path / "a" / "panel.csv")
    assert len(frame) == 2500
    man = manifest.RunManifest.read(tmp_path / "a" / "manifest.json")
    assert man.seed == 3 and str(conf) in man.inputs
    assert set(man.outputs) == {"panel.csv", "truth.json"}
    assert man.outputs["panel.csv"] == manifest.file_digest(tmp_path / "a" / "panel.csv")
    assert b"\r\n" not in (tmp_path / "a" / "panel.csv").read_bytes()


def test_simulate_identical_bytes(runner, tmp_path):
    conf = write(tmp_path / "sim.yaml", MINIMAL)
    for d in ("a", "b"):
        assert invoke(runner, "simulate", "--config", conf, "--out", tmp_path / d).exit_code == 0
    for f in ("panel.csv", "truth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_bad_scenario_names_field(runner, tmp_path):
    conf = write(tmp_path / "sim.yaml", MINIMAL.replace("constant", "sideways"))
    res = invoke(runner, "simulate", "--config", conf, "--out", tmp_path / "a")
    assert res.exit_code == 2
    assert error_doc(res)["field"] == "simulation.scenario"
    assert not (tmp_path / "a").exists()


def test_simulate_print_config(runner):
    res = invoke(runner, "simulate", "--print-config")
    assert res.exit_code == 0 and "scenario: constant" in res.stdout


def test_config_errors(runner, tmp_path):
    res = invoke(runner, "simulate", "--config", write(tmp_path / "bad.yaml", "simulation: [1, 2\n"), "--out", tmp_path)
    assert res.exit_code == 2
    res = invoke(runner, "simulate", "--config", write(tmp_path / "k.yaml", "simulation:\n  colour: red\n"),
                 "--out", tmp_path)
    assert res.exit_code == 2 and error_doc(res)["field"] == "simulation.colour"
    assert invoke(runner, "simulate", "--config", tmp_path / "absent.yaml", "--out", tmp_path).exit_code == 3


TOY = "unit_id,cluster_id,time,y,a\nu1,c1,1,1,0\nu1,c1,2,4,1\nu2,c2,1,1,0\nu2,c2,2,2,0\n"


@pytest.mark.parametrize("method", ["cs-dr", "cs-ipw", "cs-or", "sunab", "twostage", "mundlak", "twfe"])
def test_estimate_two_by_two(runner, tmp_path, method):
    panel = write(tmp_path / "toy.csv", TOY)
    est = "event:0" if method == "sunab" else "aggr"
    res = invoke(runner, "estimate", panel, "--method", method, "--estimand", est, "--out", tmp_path / "o")
    assert res.exit_code == 0, res.stderr
    table = pd.read_csv(tmp_path / "o" / "effects.csv")
    assert len(table) == 1
    np.testing.assert_allclose(table["estimate"].iloc[0], 2.0, atol=1e-12)
    doc = json.loads((tmp_path / "o" / "effects.json").read_text())
    assert "warnings" in doc
    assert (tmp_path / "o" / "manifest.json").exists()


def test_estimate_negative_event_time_mundlak(runner, tmp_path):
    panel = write(tmp_path / "toy.csv", TOY)
    res = invoke(runner, "estimate", panel, "--method", "mundlak", "--estimand", "event:-1", "--out", tmp_path / "o")
    assert res.exit_code == 2
    assert "negative event time unsupported" in error_doc(res)["message"]


def test_estimate_sunab_single_cohort(runner, tmp_path):
    rows = ["unit_id,cluster_id,time,y,a"]
    for i in range(4):
        for t in range(1, 4):
            rows.append(f"u{i},c{i},{t},{i + t + (t >= 2)},{int(t >= 2)}")
    panel = write(tmp_path / "p.csv", "\n".join(rows) + "\n")
    res = invoke(runner, "estimate", panel, "--method", "sunab", "--estimand", "event:0", "--out", tmp_path / "o")
    assert res.exit_code == 4
    assert error_doc(res)["error"] == "NoReferenceCohort"


def test_estimate_schema_violation(runner, tmp_path):
    panel = write(tmp_path / "bad.csv", "unit_id,time,y\nu1,1,0\n")
    res = invoke(runner, "estimate", panel, "--method", "cs-dr", "--out", tmp_path / "o")
    assert res.exit_code == 2


def test_estimate_bootstrap_and_band(runner, tmp_path):
    conf = write(tmp_path / "sim.yaml", MINIMAL)
    invoke(runner, "simulate", "--config", conf, "--out", tmp_path / "s")
    args = ["estimate", tmp_path / "s" / "panel.csv", "--method", "cs-dr", "--estimand", "gt:3:3",
            "--estimand", "gt:4:4", "--bootstrap", 19, "--seed", 1, "--band", "--categorical", "X4"]
    r1 = invoke(runner, *args, "--out", tmp_path / "o1")
    r2 = invoke(runner, *args, "--out", tmp_path / "o2")
    assert r1.exit_code == 0, r1.stderr
    t = pd.read_csv(tmp_path / "o1" / "effects.csv")
    assert list(t["method"]) == ["cs-dr", "cs-dr", "cs-dr+band", "cs-dr+band"]
    assert (t["ci_hi"] >= t["ci_lo"]).all()
    assert (tmp_path / "o1" / "effects.csv").read_bytes() == (tmp_path / "o2" / "effects.csv").read_bytes()


PLAN = """benchmark:
  seed: 5
  replications: 2
  scenarios: [constant]
  n: [300]
  n_clusters: [30]
  methods: [cs-dr, mundlak]
  bootstrap: {B: 9}
"""


def test_benchmark_workers_identical_and_fast(runner, tmp_path):
    plan = write(tmp_path / "plan.yaml", PLAN)
    t0 = time.perf_counter()
    r1 = invoke(runner, "benchmark", plan, "--out", tmp_path / "w1", "--workers", 1, "--quiet")
    assert time.perf_counter() - t0 < 10
    r2 = invoke(runner, "benchmark", plan, "--out", tmp_path / "w2", "--workers", 2, "--quiet")
    assert r1.exit_code == 0 and r2.exit_code == 0, r1.stderr + r2.stderr
    assert (tmp_path / "w1" / "metrics.csv").read_bytes() == (tmp_path / "w2" / "metrics.csv").read_bytes()
    assert (tmp_path / "w1" / "manifest.json").exists()


def test_benchmark_progress_and_plan_error(runner, tmp_path):
    res = invoke(runner, "benchmark", write(tmp_path / "plan.yaml", PLAN), "--out", tmp_path / "o")
    assert "[benchmark] 2/2" in res.stderr
    bad = write(tmp_path / "bad.yaml", PLAN.replace("[cs-dr, mundlak]", "[]"))
    assert invoke(runner, "benchmark", bad, "--out", tmp_path / "x").exit_code == 2


def test_benchmark_interrupted_leaves_nothing(runner, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise KeyboardInterrupt

    monkeypatch.setattr(cli, "run_benchmark", boom)
    res = runner.invoke(cli.main, ["benchmark", str(write(tmp_path / "plan.yaml", PLAN)), "--out",
                                   str(tmp_path / "o")])
    assert res.exit_code != 0
    assert not (tmp_path / "o").exists() or not any((tmp_path / "o").iterdir())


def test_atomic_write_cleans_up(tmp_path, monkeypatch):
    def broken(fd):
        raise KeyboardInterrupt

    monkeypatch.setattr(manifest.os, "fsync", broken)
    with pytest.raises(KeyboardInterrupt):
        manifest.write_atomic(tmp_path / "x.csv", "a,b\n" * 1000)
    assert list(tmp_path.iterdir()) == []


def test_report_one_cell_round_trip_and_format(runner, tmp_path):
    plan = write(tmp_path / "plan.yaml", PLAN.replace("[cs-dr, mundlak]", "[cs-dr]"))
    invoke(runner, "benchmark", plan, "--out", tmp_path / "b", "--quiet")
    res = invoke(runner, "report", tmp_path / "b" / "metrics.csv", "--out", tmp_path / "r1")
    assert res.exit_code == 0, res.stderr
    table = read_metrics_csv(tmp_path / "r1" / "table.csv")
    assert len(table) == 1
    invoke(runner, "report", tmp_path / "r1" / "table.csv", "--out", tmp_path / "r2")
    assert (tmp_path / "r1" / "table.csv").read_bytes() == (tmp_path / "r2" / "table.csv").read_bytes()
    for name in ("plot_coverage.csv", "plot_mse.csv", "plot_abs_bias.csv", "manifest.json"):
        assert (tmp_path / "r1" / name).exists()
    assert invoke(runner, "report", tmp_path / "b" / "metrics.csv", "--format", "pdf",
                  "--out", tmp_path / "r3").exit_code == 2
    md = invoke(runner, "report", tmp_path / "b" / "metrics.csv", "--format", "markdown", "--out", tmp_path / "r4")
    assert md.exit_code == 0 and (tmp_path / "r4" / "table.md").read_text().startswith("| scenario")


def test_report_unparseable(runner, tmp_path):
    res = invoke(runner, "report", write(tmp_path / "m.csv", "a,b\n1,2\n"), "--out", tmp_path / "r")
    assert res.exit_code == 2


def test_run_returns_exit_code(tmp_path):
    assert cli.run(["report", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "r")]) == 3
    assert cli.run(["simulate", "--print-config"]) == 0
