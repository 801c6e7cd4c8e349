"""Closed-loop evaluation: strategies, the run loop, and metric files.

Three strategies are implemented.  ``fixed`` applies a fixed-time signal
plan and meters nothing (the plant's physical clamps do all the work).
``weighted`` solves one distributed QP per interval, trading queue cost
against network smoothness at weight ``theta``.  ``lexi`` solves the
two-stage problem: queues first, then smoothness subject to the stage-one
optimum.  The name ``max-pressure`` is reserved for comparison against a
backpressure controller and currently refuses to run.

A run produces a :class:`RunLog`; :func:`emit_metrics` renders it to
``steps.csv``, ``occupancy.csv`` and optional ``convergence_<t>.csv``
traces, all with 9 significant digits so repeated runs are byte-identical.
"""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .admm_solver import AgentIterate, ConvergenceReport, SolverConfig, dist_sol
from .dynamics import ControlInput, PlantFlows, TrafficState, step_plant
from .network import Network
from .problem_builder import (
    ControlParams,
    ExtractionDiagnostics,
    LocalProblem,
    NegativeControlWarning,
    VariableLayout,
    build_pc_problem,
    build_weighted_problem,
    extract_first_step_controls,
    extract_plan,
    lift_tsc_problem,
    objective_value,
    phi1_value,
)
from .scenario import Scenario

__all__ = [
    "UnsupportedStrategy",
    "StepSolve",
    "StepRecord",
    "RunLog",
    "default_plan",
    "fixed_time_control",
    "lp_config",
    "qp_config",
    "weighted_config",
    "solve_step",
    "run_closed_loop",
    "emit_metrics",
    "dump_problems",
    "load_problems",
]

STRATEGIES = ("fixed", "weighted", "lexi")
RESERVED_STRATEGIES = ("max-pressure", "max_pressure")


class UnsupportedStrategy(Exception):
    pass


def lp_config(params: ControlParams) -> SolverConfig:
    return SolverConfig(rho=params.rho_lp, tol=params.tol, s_max=params.s_max, g_scale=1.0)


def qp_config(params: ControlParams) -> SolverConfig:
    return SolverConfig(rho=params.rho_qp, tol=params.tol, s_max=params.s_max, g_scale=0.1)


def weighted_config(params: ControlParams) -> SolverConfig:
    # theta multiplies the queue term, so the objective is linear-dominated;
    # the QP penalty stalls on it while the LP penalty converges.
    return SolverConfig(rho=params.rho_lp, tol=params.tol, s_max=params.s_max, g_scale=0.1)


def default_plan(scenario: Scenario) -> dict[str, float]:
    """Fixed-time plan: the scenario's, else equal splits of usable green."""
    if scenario.fixed_time_plan:
        plan = dict(scenario.fixed_time_plan)
        for p in scenario.net.phase:
            plan.setdefault(p, 0.0)
        return plan
    plan = {}
    for j in scenario.net.junctions:
        if j.is_internal and j.phases:
            share = scenario.net.green_budget(j.id) / len(j.phases)
            for p in j.phases:
                plan[p.id] = share
    return plan


def fixed_time_control(
    scenario: Scenario, state: TrafficState, t: int
) -> ControlInput:
    """Uncontrolled baseline: release queues greedily, serve every green.

    Queue discharge is capped only by what is waiting (queue plus nominal
    arrivals) and the source link's free space; outflows are commanded at
    the full service rate of the plan's greens (destination links at their
    exit cap).  The plant clamps everything else.
    """
    net = scenario.net
    plan = default_plan(scenario)
    demand = scenario.demand_at(t)
    f_u = {}
    for z in net.source_links:
        link = net.link[z]
        e_net = scenario.e_in.get(z, 0.0) - scenario.e_out.get(z, 0.0)
        space = max(0.0, link.capacity - state.n[z] - e_net)
        f_u[z] = min(state.q[z] + demand.get(z, 0.0), space)
    f_d = {}
    for z in net.link_ids:
        link = net.link[z]
        if net.is_destination(z):
            f_d[z] = link.exit_rate if link.exit_rate is not None else link.capacity
        else:
            f_d[z] = link.saturation_flow * sum(
                plan.get(p, 0.0) for p in net.phases_serving[z]
            )
    return ControlInput(f_d=f_d, f_u=f_u, g=dict(plan))


@dataclass
class StepSolve:
    """Everything one control interval's optimisation produced."""

    control: ControlInput
    plan: list[ControlInput] | None
    diagnostics: ExtractionDiagnostics | None
    problems_pc: dict[int, LocalProblem] | None = None
    solutions_pc: dict[int, np.ndarray] | None = None
    report_pc: ConvergenceReport | None = None
    problems_stage2: dict[int, LocalProblem] | None = None
    solutions_stage2: dict[int, np.ndarray] | None = None
    report_stage2: ConvergenceReport | None = None
    diverged: bool = False

    @property
    def iters_pc(self) -> int:
        return self.report_pc.iterations if self.report_pc else 0

    @property
    def iters_stage2(self) -> int:
        return self.report_stage2.iterations if self.report_stage2 else 0

    @property
    def residual(self) -> float:
        vals = [
            r.final_residual for r in (self.report_pc, self.report_stage2) if r is not None
        ]
        return max(vals) if vals else 0.0


def solve_step(
    scenario: Scenario,
    state: TrafficState,
    t: int,
    strategy: str,
    theta: float | None = None,
    horizon: int | None = None,
    warm_pc: Mapping[int, AgentIterate] | None = None,
    warm_stage2: Mapping[int, AgentIterate] | None = None,
) -> StepSolve:
    """Solve one control interval from an arbitrary state.

    For ``lexi`` both stages run; a stage that hits its iteration cap marks
    the result diverged and extraction falls back to the caller (the run
    loop reuses the previous interval's controls).  ``fixed`` never
    solves.
    """
    if strategy in RESERVED_STRATEGIES:
        raise UnsupportedStrategy("strategy 'max-pressure' is unsupported — see docs")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")

    if strategy == "fixed":
        return StepSolve(control=fixed_time_control(scenario, state, t), plan=None, diagnostics=None)

    params = scenario.params
    if theta is not None:
        params = dataclasses.replace(params, theta=theta)
    forecast = scenario.forecast(t, horizon)
    net, partition = scenario.net, scenario.partition

    if strategy == "weighted":
        problems = build_weighted_problem(state, forecast, net, partition, params)
        xs, report = dist_sol(problems, weighted_config(params), initial=warm_stage2)
        out = StepSolve(
            control=None,  # type: ignore[arg-type]  (set below)
            plan=None,
            diagnostics=None,
            problems_stage2=problems,
            solutions_stage2=xs,
            report_stage2=report,
            diverged=not report.converged,
        )
        if report.converged:
            out.control, out.diagnostics = extract_first_step_controls(xs, problems)
            out.plan = extract_plan(xs, problems)
        return out

    # lexi
    problems_pc = build_pc_problem(state, forecast, net, partition, params)
    xs_pc, report_pc = dist_sol(problems_pc, lp_config(params), initial=warm_pc)
    out = StepSolve(
        control=None,  # type: ignore[arg-type]
        plan=None,
        diagnostics=None,
        problems_pc=problems_pc,
        solutions_pc=xs_pc,
        report_pc=report_pc,
        diverged=not report_pc.converged,
    )
    if not report_pc.converged:
        return out
    lifted = lift_tsc_problem(xs_pc, problems_pc, params)
    warm = warm_stage2
    if warm is not None and any(
        warm[i].x.shape[0] != lifted[i].width for i in lifted if i in warm
    ):
        warm = None
    xs2, report2 = dist_sol(lifted, qp_config(params), initial=warm)
    out.problems_stage2 = lifted
    out.solutions_stage2 = xs2
    out.report_stage2 = report2
    out.diverged = not report2.converged
    if report2.converged:
        out.control, out.diagnostics = extract_first_step_controls(xs2, lifted)
        out.plan = extract_plan(xs2, lifted)
    return out


@dataclass
class StepRecord:
    t: int
    control: ControlInput
    flows: PlantFlows
    phi1: float  # queue total after the step
    phi2: float  # vehicles held back: n before minus realised outflow
    phi3: float  # sum of n^2 / capacity after the step
    served: float
    queue_total: float
    iters_pc: int
    iters_stage2: int
    residual: float
    diverged: bool
    plan: list[ControlInput] | None


@dataclass
class RunLog:
    strategy: str
    theta: float | None
    seed: int
    K: int
    scenario: Scenario
    states: list[TrafficState] = field(default_factory=list)  # length steps+1
    steps: list[StepRecord] = field(default_factory=list)
    convergence: dict[int, list[tuple[str, ConvergenceReport]]] = field(default_factory=dict)

    def cumulative_served(self) -> float:
        return sum(rec.served for rec in self.steps)

    def total_demand_arrived(self) -> float:
        return sum(sum(rec.flows.d.values()) for rec in self.steps)


def run_closed_loop(
    scenario: Scenario,
    strategy: str,
    theta: float | None = None,
    horizon: int | None = None,
    seed: int | None = None,
    noise: float | None = None,
    collect_convergence: Sequence[int] = (),
    steps: int | None = None,
) -> RunLog:
    """Simulate the scenario under one strategy.

    The plant sees noisy demand (multiplicative, seeded); the controller
    sees the nominal forecast.  ``seed``, ``noise``, ``horizon`` and
    ``steps`` override the scenario's values when given.  A diverged solve
    falls back to the previous interval's controls (the fixed-time controls
    on a first-interval failure).  Two runs with identical inputs are
    byte-identical.
    """
    if strategy in RESERVED_STRATEGIES:
        raise UnsupportedStrategy("strategy 'max-pressure' is unsupported — see docs")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")

    K = scenario.K if horizon is None else horizon
    n_steps = scenario.n_steps if steps is None else min(steps, scenario.n_steps)
    use_seed = scenario.seed if seed is None else seed
    use_noise = scenario.noise if noise is None else noise
    rng = np.random.default_rng(use_seed)
    collect = set(collect_convergence)

    log = RunLog(strategy=strategy, theta=theta, seed=use_seed, K=K, scenario=scenario)
    state = scenario.initial_state()
    log.states.append(state.copy())

    warm_pc: Mapping[int, AgentIterate] | None = None
    warm_stage2: Mapping[int, AgentIterate] | None = None
    prev_control: ControlInput | None = None

    with warnings.catch_warnings():
        # one notice per run is plenty; the per-step counts land in the log
        warnings.simplefilter("once", NegativeControlWarning)
        for t in range(n_steps):
            sol = solve_step(
                scenario,
                state,
                t,
                strategy,
                theta=theta,
                horizon=K,
                warm_pc=warm_pc,
                warm_stage2=warm_stage2,
            )
            if sol.report_pc is not None:
                warm_pc = sol.report_pc.final_iterates
            if sol.report_stage2 is not None:
                warm_stage2 = sol.report_stage2.final_iterates

            if sol.diverged or sol.control is None:
                control = (
                    prev_control
                    if prev_control is not None
                    else fixed_time_control(scenario, state, t)
                )
                plan = None
            else:
                control = sol.control
                plan = sol.plan
            prev_control = control

            forecast_now = scenario.forecast(t, max(K, 1)).slice(0)
            next_state, flows = step_plant(
                scenario.net, state, forecast_now, control, noise=use_noise, rng=rng
            )

            phi2 = sum(state.n[z] - flows.f_d[z] for z in scenario.net.link_ids)
            phi3 = sum(
                next_state.n[z] ** 2 / scenario.net.link[z].capacity
                for z in scenario.net.link_ids
            )
            queue_total = sum(next_state.q.values())
            log.steps.append(
                StepRecord(
                    t=t,
                    control=control,
                    flows=flows,
                    phi1=queue_total,
                    phi2=phi2,
                    phi3=phi3,
                    served=flows.served,
                    queue_total=queue_total,
                    iters_pc=sol.iters_pc,
                    iters_stage2=sol.iters_stage2,
                    residual=sol.residual,
                    diverged=sol.diverged,
                    plan=plan,
                )
            )
            if t in collect:
                traces = []
                if sol.report_pc is not None:
                    traces.append(("pc", sol.report_pc))
                if sol.report_stage2 is not None:
                    traces.append(
                        ("tsc" if strategy == "lexi" else "qp", sol.report_stage2)
                    )
                log.convergence[t] = traces

            state = next_state
            log.states.append(state.copy())

    return log


# ---------------------------------------------------------------------------
# metric files


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def emit_metrics(log: RunLog, outdir: str | Path) -> list[Path]:
    """Write steps.csv, occupancy.csv and any collected convergence traces."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    steps_path = outdir / "steps.csv"
    with steps_path.open("w") as fh:
        fh.write("t,phi1,phi2,phi3,served,queue_total,iters_pc,iters_tsc,residual\n")
        for rec in log.steps:
            fh.write(
                ",".join(
                    [
                        str(rec.t),
                        _fmt(rec.phi1),
                        _fmt(rec.phi2),
                        _fmt(rec.phi3),
                        _fmt(rec.served),
                        _fmt(rec.queue_total),
                        str(rec.iters_pc),
                        str(rec.iters_stage2),
                        _fmt(rec.residual),
                    ]
                )
                + "\n"
            )
    written.append(steps_path)

    net = log.scenario.net
    samples_per_step = max(1, int(round(net.cycle / 10.0)))
    occ_path = outdir / "occupancy.csv"
    with occ_path.open("w") as fh:
        fh.write("t10,count_gt_0.6,count_gt_0.8\n")
        sample = 0
        for t in range(len(log.steps)):
            state = log.states[t]  # state prevailing during step t
            c6 = sum(
                1 for z in net.link_ids if state.n[z] / net.link[z].capacity > 0.6
            )
            c8 = sum(
                1 for z in net.link_ids if state.n[z] / net.link[z].capacity > 0.8
            )
            for _ in range(samples_per_step):
                sample += 1
                fh.write(f"{sample},{c6},{c8}\n")
    written.append(occ_path)

    for t, traces in sorted(log.convergence.items()):
        path = outdir / f"convergence_{t}.csv"
        with path.open("w") as fh:
            fh.write("stage,iteration,residual,cost\n")
            for stage, report in traces:
                for s, r, cost in report.rows():
                    fh.write(f"{stage},{s},{_fmt(r)},{_fmt(cost)}\n")
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# problem dump / reload (for the centralized oracle CLI)


def _problem_to_dict(prob: LocalProblem) -> dict:
    lay = prob.layout
    return {
        "agent": prob.agent,
        "layout": {
            "K": lay.K,
            "n_links": list(lay.n_links),
            "q_links": list(lay.q_links),
            "fd_links": list(lay.fd_links),
            "fu_links": list(lay.fu_links),
            "g_phases": list(lay.g_phases),
        },
        "W": prob.W.tolist(),
        "w": prob.w.tolist(),
        "U": prob.U.tolist(),
        "u": prob.u.tolist(),
        "V": prob.V.tolist(),
        "v": prob.v.tolist(),
        "couplings": {str(j): C.tolist() for j, C in prob.couplings.items()},
        "c": prob.c.tolist(),
        "objective_constant": prob.objective_constant,
        "virtuals": {str(j): pos for j, pos in prob.virtuals.items()},
    }


def _problem_from_dict(raw: dict) -> LocalProblem:
    lay_raw = raw["layout"]
    lay = VariableLayout(
        agent=raw["agent"],
        K=lay_raw["K"],
        n_links=tuple(lay_raw["n_links"]),
        q_links=tuple(lay_raw["q_links"]),
        fd_links=tuple(lay_raw["fd_links"]),
        fu_links=tuple(lay_raw["fu_links"]),
        g_phases=tuple(lay_raw["g_phases"]),
    )
    width = len(raw["w"])

    def arr(key, cols=width):
        a = np.asarray(raw[key], dtype=float)
        return a.reshape((0, cols)) if a.size == 0 else a

    return LocalProblem(
        agent=raw["agent"],
        layout=lay,
        W=arr("W"),
        w=np.asarray(raw["w"], dtype=float),
        U=arr("U"),
        u=np.asarray(raw["u"], dtype=float),
        V=arr("V"),
        v=np.asarray(raw["v"], dtype=float),
        couplings={int(j): arr_from(C, width) for j, C in raw["couplings"].items()},
        c=np.asarray(raw["c"], dtype=float),
        objective_constant=raw["objective_constant"],
        virtuals={int(j): pos for j, pos in raw["virtuals"].items()},
    )


def arr_from(data, cols: int) -> np.ndarray:
    a = np.asarray(data, dtype=float)
    return a.reshape((0, cols)) if a.size == 0 else a


def dump_problems(problems: Mapping[int, LocalProblem], path: str | Path) -> None:
    payload = {"agents": {str(i): _problem_to_dict(p) for i, p in problems.items()}}
    Path(path).write_text(json.dumps(payload))


def load_problems(path: str | Path) -> dict[int, LocalProblem]:
    raw = json.loads(Path(path).read_text())
    return {int(i): _problem_from_dict(p) for i, p in raw["agents"].items()}


def solve_summary(sol: StepSolve) -> dict:
    """Scalar facts about one solved interval, for the solve-once dump."""
    out: dict = {"diverged": sol.diverged}
    if sol.solutions_pc is not None:
        out["phi1"] = phi1_value(sol.problems_pc, sol.solutions_pc)
        out["iters_pc"] = sol.iters_pc
        out["residual_pc"] = sol.report_pc.final_residual
        out["solutions_pc"] = {str(i): x.tolist() for i, x in sol.solutions_pc.items()}
    if sol.solutions_stage2 is not None:
        out["stage2_cost"] = objective_value(sol.problems_stage2, sol.solutions_stage2)
        out["phi1_stage2"] = phi1_value(sol.problems_stage2, sol.solutions_stage2)
        out["iters_stage2"] = sol.iters_stage2
        out["residual_stage2"] = sol.report_stage2.final_residual
        out["solutions_stage2"] = {
            str(i): x.tolist() for i, x in sol.solutions_stage2.items()
        }
    return out
