"""Batch command-line surface: scenario ingestion, run orchestration, export.

Exit codes: 0 success, 2 schema error, 3 infeasibility halt (partial bundle
written and flagged), 4 I/O error.
"""

from __future__ import annotations

import dataclasses
import sys

import click

from . import cosim
from .figures import render_figures
from .scenario_io import SchemaError, parse_scenario, write_result_bundle

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4


def _apply_overrides(scenario, xi, epsilon, seed, horizon):
    """Rebuild the scenario with CLI overrides; overrides beat file values."""
    changes = {}
    if xi is not None:
        changes["xi"] = xi
    if epsilon is not None:
        changes["epsilon"] = epsilon
    if seed is not None:
        changes["seed"] = seed
    if horizon is not None:
        if horizon > scenario.horizon_min:
            raise SchemaError(
                [f"override: horizon {horizon} min exceeds the scenario's "
                 f"{scenario.horizon_min} min of profile data"]
            )
        steps = horizon // scenario.dt_s_min
        n_pm = horizon // scenario.dt_p_min
        changes["horizon_min"] = horizon
        changes["profiles_p"] = {k: v[:steps] for k, v in scenario.profiles_p.items()}
        changes["profiles_q"] = {k: v[:steps] for k, v in scenario.profiles_q.items()}
        changes["lmp_p"] = scenario.lmp_p[:n_pm]
        changes["lmp_q"] = scenario.lmp_q[:n_pm]
    if not changes:
        return scenario, changes
    try:
        return dataclasses.replace(scenario, **changes), changes
    except cosim.ScenarioError as exc:
        raise SchemaError([f"override: {exc}"]) from exc


@click.group()
def main() -> None:
    """Local electricity market simulator."""


@main.command("run")
@click.argument("scenario_path", type=click.Path(exists=False, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--xi", type=float, default=None, help="Override the electrical-objective weight.")
@click.option("--epsilon", type=float, default=None, help="Override the SM degradation tolerance.")
@click.option("--seed", type=int, default=None, help="Override the scenario RNG seed.")
@click.option("--horizon", type=int, default=None, help="Override the horizon in minutes.")
@click.option(
    "--no-lem-baseline", is_flag=True, default=False,
    help="Skip the no-LEM power-flow baseline (without-LEM columns become nan).",
)
@click.option("--figures/--no-figures", default=True, help="Render report figures.")
def run_command(scenario_path, out_dir, xi, epsilon, seed, horizon, no_lem_baseline, figures):
    """Run SCENARIO end to end and write the result bundle to --out."""
    try:
        scenario = parse_scenario(scenario_path)
        scenario, overrides = _apply_overrides(scenario, xi, epsilon, seed, horizon)
    except SchemaError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_SCHEMA)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)

    log = cosim.run(scenario, compute_baseline=not no_lem_baseline)
    metrics = cosim.compute_metrics(log, scenario)
    try:
        paths = write_result_bundle(log, metrics, scenario, out_dir, effective_config=overrides)
        if figures and log.pm_records:
            paths.extend(render_figures(out_dir))
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)

    for p in paths:
        click.echo(p)
    if log.halted:
        click.echo(f"run halted: {log.halt_reason}", err=True)
        sys.exit(EXIT_INFEASIBLE)
    sys.exit(EXIT_OK)


@main.command("report")
@click.argument("bundle_dir", type=click.Path(file_okay=False))
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False))
def report_command(bundle_dir, out_dir):
    """Re-render figures from an existing result bundle."""
    try:
        paths = render_figures(bundle_dir, out_dir)
    except FileNotFoundError as exc:
        click.echo(f"missing bundle file: {exc}", err=True)
        sys.exit(EXIT_IO)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)
    for p in paths:
        click.echo(p)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
