"""Per-agent optimisation problems for the two-stage traffic controller.

Each agent owns the junctions of its subnetwork and builds a *local* problem

    min  1/2 x_i' W_i x_i + w_i' x_i
    s.t. U_i x_i  = u_i          (dynamics over the horizon)
         V_i x_i <= v_i          (operational constraint families)
         C_ij x_i ~ C_ji x_j     (consensus on shared-link copies)

over its stacked decision vector.  Per interval ``k`` the blocks are, in
order: link occupancies ``n(t+k+1)``, origin queues ``q(t+k+1)``, outflows
``f_d(t+k)``, queue discharges ``f_u(t+k)`` and phase greens ``g(t+k)``;
intervals are stacked k-major.  A variable appears in an agent's vector iff
the link/junction touches one of its junctions, so copies of shared-link
``n``/``f_d`` variables exist at both end agents and the selector matrices
``C_ij`` tie them together.

Stage one minimises the total time vehicles spend in origin queues (a pure
LP); stage two re-optimises network smoothness subject to stage one's
optimum, enforced through one extra equality row per agent and one virtual
exchange variable per neighbour pair (see :func:`lift_tsc_problem`).

Every constraint row is built by exactly one agent (ownership rules below)
and rows are rescaled to unit max-coefficient so residual tolerances mean
the same thing across families.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dynamics import ControlInput, ExogenousForecast, TrafficState
from .network import Network, Partition

__all__ = [
    "ControlParams",
    "VariableLayout",
    "LocalProblem",
    "BuildContext",
    "InfeasibleDetected",
    "NotConverged",
    "NegativeControlWarning",
    "ExtractionDiagnostics",
    "layout_variables",
    "build_pc_problem",
    "build_weighted_problem",
    "apply_smoothness_cost",
    "lift_tsc_problem",
    "extract_plan",
    "extract_first_step_controls",
    "objective_value",
    "phi1_value",
]


class InfeasibleDetected(Exception):
    """The measured state makes the stage problem provably infeasible."""


class NotConverged(Exception):
    """Stage-one solutions are too loose to anchor the lexicographic stage."""


class NegativeControlWarning(UserWarning):
    """An extracted control was negative beyond numerical dust."""


@dataclass(frozen=True)
class ControlParams:
    """Tuning knobs shared by the controller stages."""

    alpha: float = 0.25  # weight of the (n - f_d) smoothing term
    beta: float = 0.01  # weight of the quadratic queue term in stage two
    theta: float = 5000.0  # queue weight of the single-stage weighted cost
    gamma_default: float = 0.5  # retention fraction for links that set none
    rho_lp: float = 1.0  # ADMM penalty, stage one
    rho_qp: float = 0.1  # ADMM penalty, stage two / weighted
    tol: float | None = None  # stopping tolerance; None -> 1e-5 / rho
    s_max: int = 5000  # ADMM iteration cap


# ---------------------------------------------------------------------------
# variable layout


_KINDS = ("n", "q", "fd", "fu", "g")


@dataclass(frozen=True)
class VariableLayout:
    """Index map for one agent's stacked decision vector.

    Parameters
    ----------
    agent : int
        Agent number (1-based).
    K : int
        Horizon length in intervals.
    n_links, q_links, fd_links, fu_links, g_phases : tuple of str
        Ids carried per interval for each block, already sorted.
    """

    agent: int
    K: int
    n_links: tuple[str, ...]
    q_links: tuple[str, ...]
    fd_links: tuple[str, ...]
    fu_links: tuple[str, ...]
    g_phases: tuple[str, ...]
    index: Mapping[tuple[str, str, int], int] = field(repr=False, default=None)

    def __post_init__(self):
        if self.index is None:
            idx: dict[tuple[str, str, int], int] = {}
            pos = 0
            for k in range(self.K):
                for kind, ids in zip(_KINDS, self.blocks):
                    for ident in ids:
                        idx[(kind, ident, k)] = pos
                        pos += 1
            object.__setattr__(self, "index", idx)

    @property
    def blocks(self) -> tuple[tuple[str, ...], ...]:
        return (self.n_links, self.q_links, self.fd_links, self.fu_links, self.g_phases)

    @property
    def width(self) -> int:
        return len(self.index)

    @property
    def stride(self) -> int:
        """Variables per interval."""
        return sum(len(b) for b in self.blocks)

    def pos(self, kind: str, ident: str, k: int) -> int:
        return self.index[(kind, ident, k)]

    def has(self, kind: str, ident: str) -> bool:
        return self.K > 0 and (kind, ident, 0) in self.index

    def entries(self) -> list[tuple[str, str, int]]:
        return list(self.index.keys())


def layout_variables(
    net: Network, partition: Partition, K: int
) -> dict[int, VariableLayout]:
    """Assign every agent its stacked decision vector.

    An agent carries ``n``/``f_d`` for each link touching one of its
    junctions (so shared links are carried by both end agents), ``q``/``f_u``
    for source links departing its boundary junctions, and greens for the
    phases of its internal junctions.

    Returns
    -------
    dict of int -> VariableLayout
    """
    out: dict[int, VariableLayout] = {}
    for i in partition.agents:
        links = partition.links_of(i)
        sources = tuple(
            z for z in links
            if net.is_source(z) and partition.agent_of_source(z) == i
        )
        phases = tuple(
            p
            for j in partition.internal_junctions(i)
            for p in net.phases_of_junction[j]
        )
        out[i] = VariableLayout(
            agent=i,
            K=K,
            n_links=links,
            q_links=sources,
            fd_links=links,
            fu_links=sources,
            g_phases=phases,
        )
    return out


# ---------------------------------------------------------------------------
# local problems


@dataclass
class BuildContext:
    """Snapshot of what the builder saw, kept for the lift and extraction."""

    net: Network
    partition: Partition
    state: TrafficState
    forecast: ExogenousForecast


@dataclass
class LocalProblem:
    """One agent's share of a stage problem (see module docstring)."""

    agent: int
    layout: VariableLayout
    W: np.ndarray
    w: np.ndarray
    U: np.ndarray
    u: np.ndarray
    V: np.ndarray
    v: np.ndarray
    couplings: dict[int, np.ndarray]
    c: np.ndarray
    objective_constant: float = 0.0
    eq_meta: list = field(default_factory=list)
    ineq_meta: list = field(default_factory=list)
    coupling_meta: dict[int, list] = field(default_factory=dict)
    virtuals: dict[int, int] = field(default_factory=dict)
    ctx: BuildContext | None = None

    @property
    def width(self) -> int:
        return self.W.shape[0]

    @property
    def neighbors(self) -> tuple[int, ...]:
        return tuple(sorted(self.couplings))


class _Rows:
    """Accumulates sparse rows, then emits dense arrays with unit-norm rows."""

    def __init__(self) -> None:
        self.coeffs: list[dict[int, float]] = []
        self.rhs: list[float] = []
        self.meta: list = []

    def add(self, coeffs: dict[int, float], rhs: float, meta) -> None:
        self.coeffs.append(coeffs)
        self.rhs.append(rhs)
        self.meta.append(meta)

    def emit(self, width: int, scale: bool = True) -> tuple[np.ndarray, np.ndarray]:
        A = np.zeros((len(self.coeffs), width))
        b = np.array(self.rhs, dtype=float)
        for r, row in enumerate(self.coeffs):
            for pos, val in row.items():
                A[r, pos] += val
        if scale and len(b):
            norms = np.max(np.abs(A), axis=1)
            norms[norms == 0] = 1.0
            A /= norms[:, None]
            b /= norms
        return A, b


def _coupling_rows(
    layouts: Mapping[int, VariableLayout], partition: Partition, i: int
) -> tuple[dict[int, np.ndarray], dict[int, list]]:
    """Selector matrices picking agent i's copies of shared-link variables.

    Row order is identical at both end agents: shared links sorted, then
    interval, then (n, f_d).  Consensus drives the two copies to equality.
    """
    lay = layouts[i]
    couplings: dict[int, np.ndarray] = {}
    meta: dict[int, list] = {}
    for j in partition.neighbors[i]:
        rows = []
        m = []
        for z in partition.shared(i, j):
            for k in range(lay.K):
                for kind in ("n", "fd"):
                    rows.append(lay.pos(kind, z, k))
                    m.append((kind, z, k))
        C = np.zeros((len(rows), lay.width))
        for r, pos in enumerate(rows):
            C[r, pos] = 1.0
        couplings[j] = C
        meta[j] = m
    return couplings, meta


def _check_stage_feasible(
    net: Network, state: TrafficState, forecast: ExogenousForecast
) -> None:
    """Cheap necessary conditions caught before handing the LP to a solver."""
    for z_id in net.link_ids:
        link = net.link[z_id]
        floor = state.n[z_id] - link.gamma * link.capacity
        if floor > 1e-9:
            if net.is_destination(z_id):
                cap = link.exit_rate if link.exit_rate is not None else np.inf
            else:
                cap = link.saturation_flow * net.green_budget(link.dest)
            if floor > cap + 1e-9:
                raise InfeasibleDetected(
                    f"link {z_id}: must release {floor:.3f} veh but can serve "
                    f"at most {cap:.3f}"
                )
        # At the first interval the occupancy is measured, not chosen, so an
        # uncontrolled net outflow larger than what is sitting on a non-source
        # link leaves no admissible departure flow at all.
        if not net.is_source(z_id):
            avail = state.n[z_id] + forecast.e_net(0, z_id)
            if avail < -1e-9:
                raise InfeasibleDetected(
                    f"link {z_id}: exogenous outflow drains {-avail:.3f} veh "
                    f"more than the link holds"
                )


def build_pc_problem(
    state: TrafficState,
    forecast: ExogenousForecast,
    net: Network,
    partition: Partition,
    params: ControlParams | None = None,
) -> dict[int, LocalProblem]:
    """Assemble the stage-one (queue-relief) LP, split across agents.

    The cost is the total vehicle count left waiting in origin queues over
    the horizon, ``sum_k sum_z q_z(t+k+1)``; W is zero and w equals the
    queue indicator ``c``.  Constraint families and their owning agent:

    ==================  =====================================  ==========
    family              row                                    owner
    ==================  =====================================  ==========
    (dynamics)          link / queue conservation              sigma
    cycle_budget        sum of greens <= T - L                 junction
    green_nonneg        g >= 0                                 junction
    flow_available      0 <= f_d <= n + f_u + e                tau (source links: sigma)
    junction_inflow     arrivals <= capacity - n - e           sigma
    source_inflow       0 <= f_u <= capacity - n - e           sigma
    service_rate        f_d <= S * sum of permitted greens     tau
    queue_nonneg        q >= 0                                 sigma
    exit_rate           f_d <= exit cap                        tau
    retention           n - f_d <= gamma * capacity            tau
    ==================  =====================================  ==========

    Raises
    ------
    InfeasibleDetected
        When the measured state already contradicts the retention floor.
    """
    params = params or ControlParams()
    _check_stage_feasible(net, state, forecast)
    K = forecast.K
    layouts = layout_variables(net, partition, K)
    ctx = BuildContext(net, partition, state.copy(), forecast)
    problems: dict[int, LocalProblem] = {}

    for i in partition.agents:
        lay = layouts[i]
        nv = lay.width
        eq = _Rows()
        ineq = _Rows()

        def n_term(coeffs: dict, z: str, k: int, coef: float) -> float:
            """Add coef * n_z(t+k); returns the rhs shift (measured at k=0)."""
            if k == 0:
                return -coef * state.n[z]
            coeffs[lay.pos("n", z, k - 1)] = coeffs.get(lay.pos("n", z, k - 1), 0.0) + coef
            return 0.0

        own_junctions = set(partition.junctions_of[i])
        for z in lay.n_links:
            link = net.link[z]
            sigma_own = link.source in own_junctions
            tau_own = link.dest in own_junctions
            is_src = net.is_source(z)
            is_dst = net.is_destination(z)
            for k in range(K):
                e_net = forecast.e_net(k, z)
                if sigma_own:
                    # conservation of link z over interval k
                    coeffs = {lay.pos("n", z, k): 1.0, lay.pos("fd", z, k): 1.0}
                    rhs = e_net + n_term(coeffs, z, k, -1.0)
                    if is_src:
                        coeffs[lay.pos("fu", z, k)] = -1.0
                    for w in net.upstream[z]:
                        r = net.link[w].turn_ratios[z]
                        p = lay.pos("fd", w, k)
                        coeffs[p] = coeffs.get(p, 0.0) - r
                    eq.add(coeffs, rhs, ("link", z, k))
                    if is_src:
                        coeffs = {lay.pos("q", z, k): 1.0, lay.pos("fu", z, k): 1.0}
                        rhs = forecast.d[k].get(z, 0.0)
                        if k == 0:
                            rhs += state.q[z]
                        else:
                            coeffs[lay.pos("q", z, k - 1)] = -1.0
                        eq.add(coeffs, rhs, ("queue", z, k))

                # inequality families, each owned by exactly one agent
                if (is_src and sigma_own) or (not is_src and tau_own):
                    coeffs = {lay.pos("fd", z, k): 1.0}
                    rhs = e_net + n_term(coeffs, z, k, -1.0)
                    if is_src:
                        coeffs[lay.pos("fu", z, k)] = -1.0
                    ineq.add(coeffs, rhs, ("flow_available", z, k))
                    ineq.add({lay.pos("fd", z, k): -1.0}, 0.0, ("flow_available", z, k))
                if sigma_own and not is_src:
                    coeffs = {}
                    rhs = link.capacity - e_net + n_term(coeffs, z, k, 1.0)
                    for w in net.upstream[z]:
                        r = net.link[w].turn_ratios[z]
                        p = lay.pos("fd", w, k)
                        coeffs[p] = coeffs.get(p, 0.0) + r
                    ineq.add(coeffs, rhs, ("junction_inflow", z, k))
                if sigma_own and is_src:
                    coeffs = {lay.pos("fu", z, k): 1.0}
                    rhs = link.capacity - e_net + n_term(coeffs, z, k, 1.0)
                    ineq.add(coeffs, rhs, ("source_inflow", z, k))
                    ineq.add({lay.pos("fu", z, k): -1.0}, 0.0, ("source_inflow", z, k))
                    ineq.add({lay.pos("q", z, k): -1.0}, 0.0, ("queue_nonneg", z, k))
                if tau_own and not is_dst:
                    coeffs = {lay.pos("fd", z, k): 1.0}
                    for p in net.phases_serving[z]:
                        pp = lay.pos("g", p, k)
                        coeffs[pp] = coeffs.get(pp, 0.0) - link.saturation_flow
                    ineq.add(coeffs, 0.0, ("service_rate", z, k))
                if tau_own and is_dst:
                    ineq.add(
                        {lay.pos("fd", z, k): 1.0},
                        link.exit_rate,
                        ("exit_rate", z, k),
                    )
                if tau_own:
                    coeffs = {lay.pos("fd", z, k): -1.0}
                    rhs = link.gamma * link.capacity + n_term(coeffs, z, k, 1.0)
                    ineq.add(coeffs, rhs, ("retention", z, k))

        for jid in partition.internal_junctions(i):
            budget = net.green_budget(jid)
            for k in range(K):
                coeffs = {
                    lay.pos("g", p, k): 1.0 for p in net.phases_of_junction[jid]
                }
                ineq.add(coeffs, budget, ("cycle_budget", jid, k))
                for p in net.phases_of_junction[jid]:
                    ineq.add({lay.pos("g", p, k): -1.0}, 0.0, ("green_nonneg", p, k))

        U, u = eq.emit(nv)
        V, v = ineq.emit(nv)
        couplings, cmeta = _coupling_rows(layouts, partition, i)
        c = np.zeros(nv)
        for z in lay.q_links:
            for k in range(K):
                c[lay.pos("q", z, k)] = 1.0
        problems[i] = LocalProblem(
            agent=i,
            layout=lay,
            W=np.zeros((nv, nv)),
            w=c.copy(),
            U=U,
            u=u,
            V=V,
            v=v,
            couplings=couplings,
            c=c,
            eq_meta=eq.meta,
            ineq_meta=ineq.meta,
            coupling_meta=cmeta,
            ctx=ctx,
        )
    return problems


# ---------------------------------------------------------------------------
# stage-two cost and the lexicographic lift


def _smoothness_cost(
    problem: LocalProblem, alpha: float, beta: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """Quadratic network cost owned by this agent.

    Charges ``n(t+k+1)^2 / capacity`` plus ``alpha * (n(t+k) - f_d(t+k))``
    for every link departing one of the agent's junctions, and
    ``beta * q(t+k+1)^2`` for its origin queues.  Link costs follow the
    upstream (sigma) agent so shared links are charged exactly once
    network-wide.  Returns (H, h, constant).
    """
    lay = problem.layout
    ctx = problem.ctx
    net, partition = ctx.net, ctx.partition
    own = set(partition.junctions_of[problem.agent])
    H = np.zeros((lay.width, lay.width))
    h = np.zeros(lay.width)
    const = 0.0
    for z in lay.n_links:
        link = net.link[z]
        if link.source not in own:
            continue
        for k in range(lay.K):
            p = lay.pos("n", z, k)
            H[p, p] += 2.0 / link.capacity
            h[lay.pos("fd", z, k)] += -alpha
            if k == 0:
                const += alpha * ctx.state.n[z]
            else:
                h[lay.pos("n", z, k - 1)] += alpha
    if beta:
        for z in lay.q_links:
            for k in range(lay.K):
                p = lay.pos("q", z, k)
                H[p, p] += 2.0 * beta
    return H, h, const


def build_weighted_problem(
    state: TrafficState,
    forecast: ExogenousForecast,
    net: Network,
    partition: Partition,
    params: ControlParams,
) -> dict[int, LocalProblem]:
    """Single-stage compromise QP: ``theta * queues + 0.25 * (n - f_d) + n^2/capacity``.

    Same feasible set as the stage-one LP; only the cost differs.  The
    queue-relief term keeps its indicator ``c`` so solutions can still be
    scored on pure queue cost.
    """
    problems = build_pc_problem(state, forecast, net, partition, params)
    for prob in problems.values():
        H, h, const = _smoothness_cost(prob, alpha=0.25, beta=0.0)
        prob.W = H
        prob.w = params.theta * prob.c + h
        prob.objective_constant = const
    return problems


def apply_smoothness_cost(
    problems: Mapping[int, LocalProblem], params: ControlParams
) -> dict[int, LocalProblem]:
    """Stage-two cost on the stage-one feasible set, without the anchor.

    Used by centralized references, which can enforce the stage-one optimum
    as one global equality instead of per-agent anchors and virtuals.
    """
    out: dict[int, LocalProblem] = {}
    for i, prob in problems.items():
        H, h, const = _smoothness_cost(prob, params.alpha, params.beta)
        out[i] = replace_cost(prob, W=H, w=h, constant=const)
    return out


def replace_cost(
    prob: LocalProblem, W: np.ndarray, w: np.ndarray, constant: float
) -> LocalProblem:
    """Copy of a local problem with a different objective."""
    return LocalProblem(
        agent=prob.agent,
        layout=prob.layout,
        W=W,
        w=w,
        U=prob.U,
        u=prob.u,
        V=prob.V,
        v=prob.v,
        couplings=prob.couplings,
        c=prob.c,
        objective_constant=constant,
        eq_meta=prob.eq_meta,
        ineq_meta=prob.ineq_meta,
        coupling_meta=prob.coupling_meta,
        virtuals=dict(prob.virtuals),
        ctx=prob.ctx,
    )


def lift_tsc_problem(
    pc_solutions: Mapping[int, np.ndarray],
    problems: Mapping[int, LocalProblem],
    params: ControlParams,
    residual_tol: float = 1e-3,
) -> dict[int, LocalProblem]:
    """Build the stage-two QP anchored to stage one's optimum.

    Stage two minimises the smoothness cost subject to all stage-one
    constraints *and* the requirement that total queue cost stays at the
    stage-one optimum.  Globally that anchor is one scalar equality; to keep
    it agent-local each agent gets a virtual exchange variable per
    neighbour, and its share of the anchor becomes

        c_i' x_i + sum_j v_ij  =  c_i' x_i^(1)

    while consensus enforces ``v_ij + v_ji = 0`` pairwise, so the virtuals
    telescope away and the per-agent anchors sum to the global one.
    Dropping the virtuals from an optimum of the lifted problem yields an
    optimum of the anchored problem.

    Parameters
    ----------
    pc_solutions : mapping of agent -> solution vector of stage one
    problems : mapping of agent -> stage-one LocalProblem
    params : ControlParams (alpha, beta)
    residual_tol : float
        Maximum stage-one equality/consensus residual accepted before the
        anchor value is considered meaningless.

    Raises
    ------
    NotConverged
        When stage-one solutions violate their constraints or disagree on
        shared copies beyond ``residual_tol``.
    """
    for i, prob in problems.items():
        x = np.asarray(pc_solutions[i], dtype=float)[: prob.layout.width]
        res = np.max(np.abs(prob.U @ x - prob.u)) if prob.U.size else 0.0
        if res > residual_tol:
            raise NotConverged(f"agent {i}: stage-one dynamics residual {res:.2e}")
    for i, prob in problems.items():
        for j, C in prob.couplings.items():
            if j < i:
                continue
            xi = np.asarray(pc_solutions[i], dtype=float)[: prob.layout.width]
            xj = np.asarray(pc_solutions[j], dtype=float)[: problems[j].layout.width]
            gap = np.max(np.abs(C @ xi - problems[j].couplings[i] @ xj)) if C.size else 0.0
            if gap > residual_tol:
                raise NotConverged(f"pair ({i},{j}): shared copies differ by {gap:.2e}")

    lifted: dict[int, LocalProblem] = {}
    for i, prob in problems.items():
        lay = prob.layout
        nv = lay.width
        nbrs = prob.neighbors
        ext = nv + len(nbrs)
        virtuals = {j: nv + a for a, j in enumerate(nbrs)}

        H, h, const = _smoothness_cost(prob, params.alpha, params.beta)
        W = np.zeros((ext, ext))
        W[:nv, :nv] = H
        w = np.zeros(ext)
        w[:nv] = h

        share = float(prob.c @ np.asarray(pc_solutions[i], dtype=float)[:nv])
        anchor = np.zeros(ext)
        anchor[:nv] = prob.c
        for j in nbrs:
            anchor[virtuals[j]] = 1.0
        U = np.zeros((prob.U.shape[0] + 1, ext))
        U[: prob.U.shape[0], :nv] = prob.U
        U[-1] = anchor
        u = np.concatenate([prob.u, [share]])

        V = np.zeros((prob.V.shape[0], ext))
        V[:, :nv] = prob.V

        couplings: dict[int, np.ndarray] = {}
        cmeta: dict[int, list] = {}
        for j in nbrs:
            C_old = prob.couplings[j]
            C = np.zeros((C_old.shape[0] + 1, ext))
            C[: C_old.shape[0], :nv] = C_old
            # +1 at the lower-indexed end, -1 at the higher-indexed end:
            # copies-equal consensus then enforces v_ij + v_ji = 0.
            C[-1, virtuals[j]] = 1.0 if i < j else -1.0
            couplings[j] = C
            cmeta[j] = list(prob.coupling_meta[j]) + [("virtual", f"{i}-{j}", -1)]

        c = np.zeros(ext)
        c[:nv] = prob.c
        lifted[i] = LocalProblem(
            agent=i,
            layout=lay,
            W=W,
            w=w,
            U=U,
            u=u,
            V=V,
            v=prob.v.copy(),
            couplings=couplings,
            c=c,
            objective_constant=const,
            eq_meta=list(prob.eq_meta) + [("anchor", str(i), -1)],
            ineq_meta=list(prob.ineq_meta),
            coupling_meta=cmeta,
            virtuals=virtuals,
            ctx=prob.ctx,
        )
    return lifted


# ---------------------------------------------------------------------------
# objective helpers and control extraction


def objective_value(
    problems: Mapping[int, LocalProblem], solutions: Mapping[int, np.ndarray]
) -> float:
    """Total cost ``sum_i 1/2 x'Wx + w'x + const`` of a solution bundle."""
    total = 0.0
    for i, prob in problems.items():
        x = np.asarray(solutions[i], dtype=float)
        total += 0.5 * x @ prob.W @ x + prob.w @ x + prob.objective_constant
    return float(total)


def phi1_value(
    problems: Mapping[int, LocalProblem], solutions: Mapping[int, np.ndarray]
) -> float:
    """Queue cost ``sum_i c_i' x_i`` of a solution bundle."""
    return float(
        sum(prob.c @ np.asarray(solutions[i], dtype=float) for i, prob in problems.items())
    )


@dataclass
class ExtractionDiagnostics:
    """Side information from control extraction."""

    per_link_green: dict[str, float]  # f_d / S per internally-served link
    discrepancy: dict[str, float]  # |copy difference| per shared link
    clamped: list[tuple[str, str, float]]  # (kind, id, original value)


def extract_plan(
    solutions: Mapping[int, np.ndarray],
    problems: Mapping[int, LocalProblem],
) -> list[ControlInput]:
    """Read the full K-interval control plan out of a solution bundle.

    Shared-link outflows are taken from the downstream (tau) agent's copy;
    queue discharges and greens have a single owner by construction.
    """
    some = next(iter(problems.values()))
    net, partition = some.ctx.net, some.ctx.partition
    K = some.layout.K
    lay = {i: problems[i].layout for i in problems}
    xs = {i: np.asarray(solutions[i], dtype=float) for i in problems}

    plan: list[ControlInput] = []
    for k in range(K):
        f_d = {
            z: float(xs[partition.agent_of_dest(z)][lay[partition.agent_of_dest(z)].pos("fd", z, k)])
            for z in net.link_ids
        }
        f_u = {
            z: float(xs[partition.agent_of_source(z)][lay[partition.agent_of_source(z)].pos("fu", z, k)])
            for z in net.source_links
        }
        g = {}
        for p, jid in net.phase_junction.items():
            i = partition.assignment[jid]
            g[p] = float(xs[i][lay[i].pos("g", p, k)])
        plan.append(ControlInput(f_d=f_d, f_u=f_u, g=g))
    return plan


def extract_first_step_controls(
    solutions: Mapping[int, np.ndarray],
    problems: Mapping[int, LocalProblem],
) -> tuple[ControlInput, ExtractionDiagnostics]:
    """First-interval controls to apply to the plant, plus diagnostics.

    Values below -1e-6 trigger a :class:`NegativeControlWarning`; all
    negatives are clamped to zero either way.  Diagnostics report the
    disagreement between shared-link copies and the implied per-link green
    time ``f_d / S`` for links served by a signal.
    """
    some = next(iter(problems.values()))
    net, partition = some.ctx.net, some.ctx.partition
    ctrl = extract_plan(solutions, problems)[0]

    discrepancy: dict[str, float] = {}
    lay = {i: problems[i].layout for i in problems}
    xs = {i: np.asarray(solutions[i], dtype=float) for i in problems}
    for z in net.link_ids:
        i, j = partition.agent_of_source(z), partition.agent_of_dest(z)
        if i == j:
            continue
        discrepancy[z] = abs(
            float(xs[i][lay[i].pos("fd", z, 0)]) - float(xs[j][lay[j].pos("fd", z, 0)])
        )

    clamped: list[tuple[str, str, float]] = []

    def visit(kind: str, values: dict[str, float]) -> dict[str, float]:
        out = {}
        for ident, val in values.items():
            if val < 0.0:
                if val < -1e-6:
                    clamped.append((kind, ident, val))
                val = 0.0
            out[ident] = val
        return out

    f_d = visit("fd", ctrl.f_d)
    f_u = visit("fu", ctrl.f_u)
    g = visit("g", ctrl.g)
    if clamped:
        worst = min(v for _, _, v in clamped)
        warnings.warn(
            f"{len(clamped)} extracted control(s) negative (worst {worst:.2e}); clamped to 0",
            NegativeControlWarning,
        )

    per_link_green = {
        z: f_d[z] / net.link[z].saturation_flow
        for z in net.link_ids
        if net.junction[net.link[z].dest].is_internal
    }
    return ControlInput(f_d=f_d, f_u=f_u, g=g), ExtractionDiagnostics(
        per_link_green=per_link_green,
        discrepancy=discrepancy,
        clamped=clamped,
    )
