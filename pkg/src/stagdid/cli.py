"""Command-line front end.

Exit codes: 0 success, 2 user or configuration error, 3 I/O error,
4 estimation failure. Every command writes its artifacts atomically next to
a ``manifest.json`` recording the version, resolved configuration, seed and
input digests.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import pandas as pd

from . import config as cfg
from . import errors
from .bench import metrics_to_csv, print_progress, read_metrics_csv, run_benchmark, summarize
from .bootstrap import BootstrapSpec
from .manifest import RunManifest
from .panel import ControlGroup, EstimandSpec, panel_to_csv, read_panel_csv
from .pipeline import METHODS, estimate
from .simgen import simulate as simulate_panel

EXIT_OK, EXIT_USER, EXIT_IO, EXIT_ESTIMATION = 0, 2, 3, 4

USER_ERRORS = (errors.ConfigError, errors.PanelError, errors.UnsupportedEstimand, errors.NegativeEventTime,
               errors.UnknownScenario, errors.EmptyWindow, pd.errors.ParserError, pd.errors.EmptyDataError)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, USER_ERRORS):
        return EXIT_USER
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (errors.EstimationError, errors.KernelError, errors.StagDidError)):
        return EXIT_ESTIMATION
    if isinstance(exc, ValueError):
        return EXIT_USER
    raise exc


class _Group(click.Group):
    """Maps library exceptions to the exit-code contract."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except Exception as exc:
            code = exit_code(exc)
            doc = {"error": type(exc).__name__, "message": str(exc)}
            field = getattr(exc, "field", None)
            if field:
                doc["field"] = field
            click.echo(f"error: {json.dumps(doc)}", err=True)
            ctx.exit(code)


@click.group(cls=_Group)
@click.version_option(package_name="stagdid")
def main():
    """Staggered-adoption difference-in-differences estimation and benchmarking."""


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML with a simulation: block.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
@click.option("--print-config", is_flag=True, help="Print the resolved configuration and exit.")
def simulate(config_path, out_dir, seed, print_config):
    """Generate one panel (panel.csv) and its true estimands (truth.json)."""
    doc = cfg.load_yaml(config_path) if config_path else {}
    config = cfg.sim_config_from_dict(doc)
    if seed is not None:
        config = cfg.SimConfig(**{**config.__dict__, "seed": seed})
    resolved = {"simulation": cfg.resolved_sim(config)}
    if print_config:
        click.echo(cfg.dump_yaml(resolved), nl=False)
        return
    if not out_dir:
        raise click.UsageError("--out is required")
    panel, truth = simulate_panel(config)
    man = RunManifest("simulate", resolved, config.seed)
    if config_path:
        man.add_input(config_path)
    man.write(out_dir, {"panel.csv": panel_to_csv(panel), "truth.json": truth.to_json() + "\n"})
    click.echo(f"wrote {panel.n_units * panel.tbar} rows to {Path(out_dir) / 'panel.csv'}", err=True)


@main.command("estimate")
@click.argument("panel_path", type=click.Path(dir_okay=False))
@click.option("--method", type=click.Choice(METHODS), required=True)
@click.option("--estimand", "estimands", multiple=True, default=("aggr",), show_default=True,
              help="aggr, event:<l> or gt:<g>:<t>; repeatable.")
@click.option("--bootstrap", "B", type=int, default=0, show_default=True,
              help="Cluster-bootstrap replicates; 0 uses analytic SEs where available.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--level", type=float, default=0.95, show_default=True)
@click.option("--band", is_flag=True, help="Add sup-t simultaneous bands over group-time estimands.")
@click.option("--control-group", type=click.Choice([c.value for c in ControlGroup]),
              default=ControlGroup.NOT_YET_TREATED.value, show_default=True)
@click.option("--anticipation", type=int, default=0, show_default=True)
@click.option("--overlap", type=click.Choice(["trim", "error"]), default="trim", show_default=True,
              help="CS handling of fitted propensities near one.")
@click.option("--categorical", multiple=True, help="Covariate column to treat as categorical; repeatable.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def estimate_cmd(panel_path, method, estimands, B, seed, level, band, control_group, anticipation, overlap,
                 categorical, out_dir):
    """Estimate effects on a CSV panel; writes effects.csv and effects.json."""
    specs = [EstimandSpec.parse(e, anticipation=anticipation, control_group=control_group) for e in estimands]
    panel = read_panel_csv(panel_path, categorical=categorical)
    boot = BootstrapSpec(B=B, seed=seed, level=level) if B > 0 else None
    options = {"overlap": overlap} if method.startswith("cs-") else {}
    table = estimate(panel, method, specs, bootstrap=boot, band=band, level=level, **options)
    resolved = {
        "panel": str(panel_path), "method": method, "estimands": list(estimands), "bootstrap": B, "seed": seed,
        "level": level, "band": band, "control_group": control_group, "anticipation": anticipation,
        "overlap": overlap, "categorical": list(categorical),
    }
    man = RunManifest("estimate", resolved, seed)
    man.add_input(panel_path)
    man.write(out_dir, {"effects.csv": table.to_csv(), "effects.json": table.to_json() + "\n"})
    for w in table.warnings:
        click.echo(f"warning: {w}", err=True)
    click.echo(table.to_frame().to_string(index=False))


@main.command()
@click.argument("plan_path", type=click.Path(dir_okay=False), required=False)
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
@click.option("--workers", type=int, envvar="STAGDID_WORKERS", default=1, show_default=True,
              help="Worker processes (env STAGDID_WORKERS); results do not depend on it.")
@click.option("--print-config", is_flag=True, help="Print the resolved plan and exit.")
@click.option("--quiet", is_flag=True, help="No progress on standard error.")
def benchmark(plan_path, out_dir, workers, print_config, quiet):
    """Run a Monte Carlo plan; writes records.csv and metrics.csv."""
    doc = cfg.load_yaml(plan_path) if plan_path else {}
    plan = cfg.plan_from_dict(doc)
    resolved = {"benchmark": cfg.resolved_plan(plan)}
    if print_config:
        click.echo(cfg.dump_yaml(resolved), nl=False)
        return
    if not out_dir:
        raise click.UsageError("--out is required")
    if workers < 1:
        raise click.BadParameter("must be >= 1", param_hint="--workers")
    records, metrics = run_benchmark(plan, workers=workers, progress=None if quiet else print_progress)
    man = RunManifest("benchmark", resolved, plan.seed)
    if plan_path:
        man.add_input(plan_path)
    man.write(out_dir, {
        "records.csv": records.to_csv(index=False, lineterminator="\n", float_format="%.17g"),
        "metrics.csv": metrics_to_csv(metrics),
    })


@main.command()
@click.argument("metrics_path", type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json", "markdown"]), default="csv", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def report(metrics_path, fmt, out_dir):
    """Render a metrics table and per-metric plot data."""
    metrics = read_metrics_csv(metrics_path)
    artifacts = summarize(metrics, fmt)
    man = RunManifest("report", {"metrics": str(metrics_path), "format": fmt}, None)
    man.add_input(metrics_path)
    man.write(out_dir, artifacts)


def run(argv=None) -> int:
    """Invoke the CLI and return its exit code instead of exiting."""
    try:
        rv = main.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.ClickException as exc:
        exc.show()
        return exc.exit_code
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
