"""Command-line entry points.

    lexinet run --scenario net.json --strategy lexi --out results/
    lexinet validate --scenario net.json
    lexinet solve-once --scenario net.json --dump-problems probs/
    lexinet oracle --problems probs/
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .harness import (
    RESERVED_STRATEGIES,
    STRATEGIES,
    UnsupportedStrategy,
    dump_problems,
    emit_metrics,
    load_problems,
    run_closed_loop,
    solve_step,
    solve_summary,
)
from .network import MissingJunction
from .problem_builder import apply_smoothness_cost
from .reference_solver import (
    assemble_global,
    solve_centralized,
    solve_lexicographic_centralized,
)
from .scenario import ParseError, ValidationError, load_scenario


@click.group()
def main() -> None:
    """Distributed two-stage traffic control on store-and-forward networks."""


def _load(path: str):
    try:
        return load_scenario(path)
    except (ParseError, ValidationError, MissingJunction) as e:
        raise click.ClickException(str(e)) from e


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
@click.option(
    "--strategy",
    required=True,
    type=click.Choice(STRATEGIES + RESERVED_STRATEGIES),
)
@click.option("--theta", type=float, default=None, help="Queue weight for --strategy weighted.")
@click.option("--k", "horizon", type=int, default=None, help="Override the scenario horizon.")
@click.option("--seed", type=int, default=None, help="Override the scenario noise seed.")
@click.option("--out", "outdir", required=True, type=click.Path(file_okay=False))
@click.option(
    "--dump-convergence",
    "dump_steps",
    type=int,
    multiple=True,
    help="Also write convergence_<t>.csv for these steps.",
)
def run(scenario_path, strategy, theta, horizon, seed, outdir, dump_steps):
    """Simulate a scenario under one control strategy."""
    scenario = _load(scenario_path)
    try:
        log = run_closed_loop(
            scenario,
            strategy,
            theta=theta,
            horizon=horizon,
            seed=seed,
            collect_convergence=dump_steps,
        )
    except UnsupportedStrategy as e:
        raise click.ClickException(str(e)) from e
    files = emit_metrics(log, outdir)
    diverged = sum(1 for rec in log.steps if rec.diverged)
    click.echo(f"{len(log.steps)} steps, served {log.cumulative_served():.1f} veh")
    click.echo(
        f"final queue {sum(log.states[-1].q.values()):.1f} veh, diverged steps {diverged}"
    )
    for f in files:
        click.echo(f"wrote {f}")


@main.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
def validate(scenario_path):
    """Check a scenario file; non-zero exit on problems."""
    try:
        scenario = load_scenario(scenario_path)
    except ParseError as e:
        click.echo(f"parse error: {e}")
        sys.exit(1)
    except (ValidationError,) as e:
        click.echo("invalid scenario:")
        for issue in getattr(e, "issues", ()):
            click.echo(f"  {issue}")
        sys.exit(1)
    except MissingJunction as e:
        click.echo(f"invalid scenario: junction {e} has no agent assignment")
        sys.exit(1)
    net = scenario.net
    click.echo(
        f"ok: {len(net.junctions)} junctions, {len(net.links)} links, "
        f"{len(scenario.partition.agents)} agents, {scenario.n_steps} steps, K={scenario.K}"
    )


@main.command("solve-once")
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True))
@click.option("--dump-problems", "dumpdir", required=True, type=click.Path(file_okay=False))
def solve_once(scenario_path, dumpdir):
    """Solve one control interval from the initial state and dump everything."""
    scenario = _load(scenario_path)
    sol = solve_step(scenario, scenario.initial_state(), 0, "lexi")
    dumpdir = Path(dumpdir)
    dumpdir.mkdir(parents=True, exist_ok=True)
    if sol.problems_pc is not None:
        dump_problems(sol.problems_pc, dumpdir / "problems_pc.json")
        plain = apply_smoothness_cost(sol.problems_pc, scenario.params)
        dump_problems(plain, dumpdir / "problems_tsc.json")
    if sol.problems_stage2 is not None:
        dump_problems(sol.problems_stage2, dumpdir / "problems_lifted.json")
    (dumpdir / "solution.json").write_text(json.dumps(solve_summary(sol)))
    click.echo(f"wrote problem dumps to {dumpdir}")
    if sol.diverged:
        click.echo("warning: distributed solve did not converge")
    else:
        summary = solve_summary(sol)
        click.echo(
            f"phi1 {summary['phi1']:.6f}, stage-two cost {summary['stage2_cost']:.6f}, "
            f"iterations {summary['iters_pc']}+{summary['iters_stage2']}"
        )


@main.command()
@click.option("--problems", "dumpdir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--rtol", type=float, default=1e-4, show_default=True, help="Relative agreement required.")
def oracle(dumpdir, rtol):
    """Re-solve dumped problems centrally and compare with the dumped results."""
    dumpdir = Path(dumpdir)
    summary = json.loads((dumpdir / "solution.json").read_text())
    problems_pc = load_problems(dumpdir / "problems_pc.json")
    problems_tsc = load_problems(dumpdir / "problems_tsc.json")

    pc_global = assemble_global(problems_pc)
    sol_pc = solve_centralized(pc_global)
    ok = True
    if "phi1" in summary:
        gap = abs(sol_pc.cost - summary["phi1"])
        tol = rtol * (1.0 + abs(sol_pc.cost))
        verdict = "ok" if gap <= tol else "MISMATCH"
        ok &= gap <= tol
        click.echo(
            f"stage one: centralized {sol_pc.cost:.9g}, distributed {summary['phi1']:.9g}, "
            f"gap {gap:.2e} [{verdict}]"
        )
    else:
        click.echo(f"stage one: centralized {sol_pc.cost:.9g} (no distributed value dumped)")

    lexi = solve_lexicographic_centralized(pc_global, assemble_global(problems_tsc))
    if "stage2_cost" in summary:
        gap = abs(lexi.cost - summary["stage2_cost"])
        tol = rtol * (1.0 + abs(lexi.cost))
        verdict = "ok" if gap <= tol else "MISMATCH"
        ok &= gap <= tol
        click.echo(
            f"stage two: centralized {lexi.cost:.9g}, distributed {summary['stage2_cost']:.9g}, "
            f"gap {gap:.2e} [{verdict}]"
        )
    else:
        click.echo(f"stage two: centralized {lexi.cost:.9g} (no distributed value dumped)")
    if not ok:
        sys.exit(1)


if __name__ == "__main__":  # pragma: no cover
    main()
