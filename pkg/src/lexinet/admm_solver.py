"""Distributed solver: proximal ADMM over synchronous message rounds.

Each agent keeps a primal iterate ``x``, slacks ``y`` (one per inequality
row) with multipliers ``lam``, and per-neighbour consensus slacks ``y_ij``
with multipliers ``lam_ij`` for its copies of shared variables.  One
iteration runs, for every agent:

1. an equality-constrained proximal step (:func:`proximal_x_update`) that
   solves the local KKT system exactly — dynamics therefore hold at every
   iterate, only inequalities and consensus relax;
2. the closed-form slack/multiplier updates (:func:`slack_dual_update`),
   which need exactly one message per neighbour: the vector
   ``C_ij x_i - lam_ij / rho``.  The consensus slack is the average of the
   two endpoints' messages, so both hold the same value afterwards;
3. a local convergence flag — residuals within tolerance *and* the
   proximal step settled — agreed globally via ``N`` synchronous rounds
   of min-consensus over the neighbour graph.

Messages travel over a :class:`Transport`; the bundled
:class:`SynchronousBus` delivers exactly-once and in order, which is what
the convergence argument assumes.  With ``workers > 1`` agents are stepped
by a thread pool between barriers; results are bitwise identical to the
sequential schedule because agents only write their own state.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .problem_builder import LocalProblem

__all__ = [
    "SolverConfig",
    "AgentIterate",
    "AgentFactorization",
    "ConvergenceReport",
    "SingularKKT",
    "MissingMessage",
    "TransportFailure",
    "Transport",
    "SynchronousBus",
    "proximal_x_update",
    "slack_dual_update",
    "coupling_message",
    "min_consensus_rounds",
    "min_consensus_terminate",
    "dist_sol",
]


class SingularKKT(Exception):
    """The local KKT system cannot be factorised (dependent equality rows)."""


class MissingMessage(Exception):
    """A neighbour's consensus message did not arrive for this round."""


class TransportFailure(Exception):
    """The message transport rejected a send."""


@dataclass(frozen=True)
class SolverConfig:
    """Iteration parameters.

    ``tol=None`` resolves to ``1e-5 / rho`` so looser penalties get looser
    stopping thresholds, matching how the residuals scale.
    """

    rho: float = 1.0
    tol: float | None = None
    s_max: int = 5000
    g_scale: float = 1.0  # proximal weight G = g_scale * I
    workers: int = 1

    @property
    def tolerance(self) -> float:
        return self.tol if self.tol is not None else 1e-5 / self.rho


@dataclass
class AgentIterate:
    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    y_nb: dict[int, np.ndarray]
    lam_nb: dict[int, np.ndarray]

    @classmethod
    def zeros(cls, problem: LocalProblem) -> "AgentIterate":
        return cls(
            x=np.zeros(problem.width),
            y=np.zeros(problem.V.shape[0]),
            lam=np.zeros(problem.V.shape[0]),
            y_nb={j: np.zeros(C.shape[0]) for j, C in problem.couplings.items()},
            lam_nb={j: np.zeros(C.shape[0]) for j, C in problem.couplings.items()},
        )

    def copy(self) -> "AgentIterate":
        return AgentIterate(
            self.x.copy(),
            self.y.copy(),
            self.lam.copy(),
            {j: v.copy() for j, v in self.y_nb.items()},
            {j: v.copy() for j, v in self.lam_nb.items()},
        )


class AgentFactorization:
    """Cached factorisations for one agent's proximal KKT system.

    The proximal Hessian ``W + g I + rho (V'V + sum_j C'C)`` is positive
    definite for any ``g > 0``, so a Cholesky factorisation exists; the
    equality block is then handled through the Schur complement
    ``U Wt^-1 U'``, which is factorised once as well.  Raises
    :class:`SingularKKT` when the Schur complement is numerically rank
    deficient (duplicate or dependent equality rows).
    """

    def __init__(self, problem: LocalProblem, config: SolverConfig):
        self.problem = problem
        self.config = config
        nv = problem.width
        Wt = problem.W + config.g_scale * np.eye(nv)
        if problem.V.size:
            Wt = Wt + config.rho * (problem.V.T @ problem.V)
        for C in problem.couplings.values():
            Wt = Wt + config.rho * (C.T @ C)
        try:
            self._chol = cho_factor(Wt)
        except LinAlgError as e:  # pragma: no cover - g_scale <= 0 misuse
            raise SingularKKT(f"agent {problem.agent}: proximal Hessian not PD") from e
        self._has_eq = problem.U.shape[0] > 0
        if self._has_eq:
            self._Winv_Ut = cho_solve(self._chol, problem.U.T)
            S = problem.U @ self._Winv_Ut
            try:
                self._schur = cho_factor(S)
            except LinAlgError as e:
                raise SingularKKT(
                    f"agent {problem.agent}: dependent equality rows"
                ) from e
            if np.min(np.diag(self._schur[0])) ** 2 <= 1e-12:
                raise SingularKKT(
                    f"agent {problem.agent}: equality block numerically rank deficient"
                )

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """x minimising the proximal objective subject to ``U x = u``.

        Solves ``Wt x = rhs - U' mu`` with ``mu`` from the Schur system
        ``(U Wt^-1 U') mu = U Wt^-1 rhs - u``.
        """
        t = cho_solve(self._chol, rhs)
        if not self._has_eq:
            return t
        mu = cho_solve(self._schur, self.problem.U @ t - self.problem.u)
        return t - self._Winv_Ut @ mu


def proximal_x_update(
    problem: LocalProblem,
    iterate: AgentIterate,
    config: SolverConfig,
    fact: AgentFactorization | None = None,
) -> np.ndarray:
    """One agent's exact proximal step.

    Minimises the local augmented Lagrangian plus ``g/2 ||x - x(s)||^2``
    over ``{x : U x = u}`` with all slacks and multipliers frozen.  The
    stationarity right-hand side is

        -w + g x(s) + V'(lam + rho (y + v)) + sum_j C'(lam_ij + rho y_ij)
    """
    fact = fact or AgentFactorization(problem, config)
    rho = config.rho
    rhs = -problem.w + config.g_scale * iterate.x
    if problem.V.size:
        rhs = rhs + problem.V.T @ (iterate.lam + rho * (iterate.y + problem.v))
    for j, C in problem.couplings.items():
        rhs = rhs + C.T @ (iterate.lam_nb[j] + rho * iterate.y_nb[j])
    return fact.solve(rhs)


def coupling_message(
    problem: LocalProblem, iterate: AgentIterate, neighbor: int, rho: float
) -> np.ndarray:
    """What this agent sends to ``neighbor``: ``C_ij x - lam_ij / rho``."""
    return problem.couplings[neighbor] @ iterate.x - iterate.lam_nb[neighbor] / rho


def slack_dual_update(
    problem: LocalProblem,
    iterate: AgentIterate,
    inbox: Mapping[int, np.ndarray],
    config: SolverConfig,
) -> AgentIterate:
    """Closed-form slack and multiplier updates after an x step.

    ``iterate.x`` must already hold ``x(s+1)``.  Inequality slacks project
    onto the non-positive orthant; consensus slacks average the local
    message with the neighbour's (both ends compute the same value).
    Raises :class:`MissingMessage` when a neighbour's vector is absent or
    of the wrong length.
    """
    rho = config.rho
    out = iterate.copy()
    if problem.V.size:
        r = problem.V @ iterate.x - problem.v
        out.y = np.minimum(0.0, r - iterate.lam / rho)
        out.lam = iterate.lam - rho * (r - out.y)
    for j in problem.couplings:
        if j not in inbox:
            raise MissingMessage(f"agent {problem.agent}: no message from {j}")
        theirs = np.asarray(inbox[j], dtype=float)
        mine = coupling_message(problem, iterate, j, rho)
        if theirs.shape != mine.shape:
            raise MissingMessage(
                f"agent {problem.agent}: message from {j} has shape "
                f"{theirs.shape}, expected {mine.shape}"
            )
        out.y_nb[j] = 0.5 * (mine + theirs)
        out.lam_nb[j] = iterate.lam_nb[j] - rho * (
            problem.couplings[j] @ iterate.x - out.y_nb[j]
        )
    return out


def local_residual(problem: LocalProblem, iterate: AgentIterate) -> float:
    """Worst infeasibility the stopping rule looks at for one agent."""
    res = 0.0
    if problem.V.size:
        res = float(np.max(np.abs(problem.V @ iterate.x - iterate.y - problem.v)))
    for j, C in problem.couplings.items():
        if C.size:
            res = max(res, float(np.max(np.abs(C @ iterate.x - iterate.y_nb[j]))))
    return res


def residual_sum(problem: LocalProblem, iterate: AgentIterate) -> float:
    """Summed residual contribution, the quantity usually plotted."""
    total = 0.0
    if problem.V.size:
        total += float(np.max(np.abs(problem.V @ iterate.x - iterate.y - problem.v)))
    for j, C in problem.couplings.items():
        if C.size:
            total += float(np.max(np.abs(C @ iterate.x - iterate.y_nb[j])))
    return total


# ---------------------------------------------------------------------------
# flag consensus


def min_consensus_rounds(
    flags: Sequence[int],
    neighbors: Mapping[int, Sequence[int]],
    rounds: int | None = None,
) -> list[int]:
    """Synchronous min-consensus over an undirected neighbour graph.

    Every round each node replaces its value by the minimum over its closed
    neighbourhood.  After ``len(flags)`` rounds (the default) every node of
    a connected graph holds the global minimum.
    """
    values = list(flags)
    n = len(values)
    for _ in range(n if rounds is None else rounds):
        values = [
            min([values[i]] + [values[j] for j in neighbors.get(i, ())])
            for i in range(n)
        ]
    return values


def min_consensus_terminate(
    flags: Sequence[int], neighbors: Mapping[int, Sequence[int]]
) -> bool:
    """True iff all agents agree to stop (global minimum flag is 1)."""
    final = min_consensus_rounds(flags, neighbors)
    return min(final) == 1 if final else True


# ---------------------------------------------------------------------------
# transport


class Transport(Protocol):
    """Point-to-point message channel between agents."""

    def send(self, src: int, dst: int, tag, payload) -> None: ...

    def collect(self, dst: int, tag) -> dict[int, object]: ...


class SynchronousBus:
    """In-process transport with exactly-once, in-order delivery."""

    def __init__(self, agents: Sequence[int]):
        self._mail: dict[int, dict] = {i: {} for i in agents}

    def send(self, src: int, dst: int, tag, payload) -> None:
        if dst not in self._mail:
            raise TransportFailure(f"no such agent: {dst}")
        self._mail[dst][(src, tag)] = payload

    def collect(self, dst: int, tag) -> dict[int, object]:
        box = self._mail[dst]
        got = {src: box.pop((src, t)) for (src, t) in list(box) if t == tag}
        return got


# ---------------------------------------------------------------------------
# the full loop


@dataclass
class ConvergenceReport:
    """Per-iteration trace of one distributed solve."""

    converged: bool
    iterations: int
    rho: float
    tol: float
    max_residuals: list[float] = field(default_factory=list)
    sum_residuals: list[float] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    final_iterates: dict[int, AgentIterate] = field(default_factory=dict, repr=False)

    @property
    def final_residual(self) -> float:
        return self.max_residuals[-1] if self.max_residuals else float("nan")

    def rows(self):
        for s, (r, c) in enumerate(zip(self.max_residuals, self.costs), start=1):
            yield s, r, c


def _validate_problems(problems: Mapping[int, LocalProblem]) -> None:
    for i, prob in problems.items():
        if prob.agent != i:
            raise ValueError(f"problem keyed {i} says it belongs to agent {prob.agent}")
        for j, C in prob.couplings.items():
            if j not in problems:
                raise ValueError(f"agent {i} couples to unknown agent {j}")
            back = problems[j].couplings.get(i)
            if back is None:
                raise ValueError(f"coupling {i}->{j} has no reverse direction")
            if back.shape[0] != C.shape[0]:
                raise ValueError(
                    f"coupling ({i},{j}): {C.shape[0]} rows one way, "
                    f"{back.shape[0]} the other"
                )


def dist_sol(
    problems: Mapping[int, LocalProblem],
    config: SolverConfig,
    transport: Transport | None = None,
    initial: Mapping[int, AgentIterate] | None = None,
) -> tuple[dict[int, np.ndarray], ConvergenceReport]:
    """Run the distributed solve to consensus or the iteration cap.

    Parameters
    ----------
    problems : mapping of agent -> LocalProblem
        Couplings must be pairwise consistent (same row counts both ways).
    config : SolverConfig
    transport : Transport, optional
        Defaults to an in-process :class:`SynchronousBus`.
    initial : mapping of agent -> AgentIterate, optional
        Warm-start iterates (for example the previous control interval's);
        zeros otherwise.

    Returns
    -------
    (solutions, report)
        ``solutions[i]`` is agent i's final primal vector.  ``report``
        carries the residual/cost trace and the final iterates for warm
        starting.  ``report.converged`` is False when ``s_max`` was hit;
        the best-so-far iterates are still returned.
    """
    _validate_problems(problems)
    agents = sorted(problems)
    pos = {i: a for a, i in enumerate(agents)}
    nbr_graph = {
        pos[i]: tuple(pos[j] for j in problems[i].neighbors) for i in agents
    }
    transport = transport or SynchronousBus(agents)
    tol = config.tolerance

    facts = {i: AgentFactorization(problems[i], config) for i in agents}
    if initial is not None:
        for i in agents:
            if i not in initial or initial[i].x.shape[0] != problems[i].width:
                raise ValueError(f"warm-start iterate for agent {i} missing or mis-sized")
        iterates = {i: initial[i].copy() for i in agents}
    else:
        iterates = {i: AgentIterate.zeros(problems[i]) for i in agents}

    pool = None
    if config.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        pool = ThreadPoolExecutor(max_workers=config.workers)

    def each(fn):
        if pool is None:
            return [fn(i) for i in agents]
        return list(pool.map(fn, agents))

    report = ConvergenceReport(False, 0, config.rho, tol)
    try:
        for s in range(config.s_max):
            xs = each(lambda i: proximal_x_update(problems[i], iterates[i], config, facts[i]))
            steps = {}
            for i, x in zip(agents, xs):
                steps[i] = float(np.max(np.abs(x - iterates[i].x))) if x.size else 0.0
                iterates[i].x = x

            def exchange(i):
                for j in problems[i].neighbors:
                    transport.send(i, j, ("msg", s), coupling_message(problems[i], iterates[i], j, config.rho))

            each(exchange)
            updated = each(
                lambda i: slack_dual_update(
                    problems[i], iterates[i], transport.collect(i, ("msg", s)), config
                )
            )
            for i, it in zip(agents, updated):
                iterates[i] = it

            locals_ = [local_residual(problems[i], iterates[i]) for i in agents]
            report.max_residuals.append(max(locals_))
            report.sum_residuals.append(
                sum(residual_sum(problems[i], iterates[i]) for i in agents)
            )
            report.costs.append(
                sum(
                    0.5 * iterates[i].x @ problems[i].W @ iterates[i].x
                    + problems[i].w @ iterates[i].x
                    + problems[i].objective_constant
                    for i in agents
                )
            )
            report.iterations = s + 1

            # The coupling residual alone can vanish transiently: the pair
            # duals sum to zero after one iteration, so it equals half the
            # copy gap and crosses zero whenever the copies cross.  Requiring
            # the proximal step length to settle as well rules that out; at a
            # true fixed point both are zero.
            flags = [
                1 if r <= tol and steps[i] <= tol else 0
                for i, r in zip(agents, locals_)
            ]
            # flag consensus over the transport, one value per round
            n_rounds = len(agents)
            for rnd in range(n_rounds):
                def tell(i):
                    for j in problems[i].neighbors:
                        transport.send(i, j, ("flag", s, rnd), flags[pos[i]])

                each(tell)
                incoming = [transport.collect(i, ("flag", s, rnd)) for i in agents]
                flags = [
                    min([flags[pos[i]]] + list(incoming[pos[i]].values()))
                    for i in agents
                ]
            if flags and min(flags) == 1:
                report.converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    report.final_iterates = {i: iterates[i] for i in agents}
    return {i: iterates[i].x for i in agents}, report
