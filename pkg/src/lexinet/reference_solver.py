"""Centralized reference solutions for checking the distributed solver.

The per-agent problems are reassembled into one monolithic program: local
blocks go on the diagonal, and every consensus coupling becomes an explicit
equality ``C_ij x_i - C_ji x_j = 0``.  The monolith is then handed to an
off-the-shelf solver of a *different* algorithm family — simplex/interior
point — so agreement with the ADMM iteration is meaningful evidence rather
than the same code run twice.  Nothing in this module may import the
distributed update path.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .problem_builder import LocalProblem

__all__ = [
    "GlobalProblem",
    "CentralizedSolution",
    "LexiSolution",
    "Infeasible",
    "Unbounded",
    "MaxIterations",
    "assemble_global",
    "solve_centralized",
    "solve_lexicographic_centralized",
]


class Infeasible(Exception):
    """No point satisfies the constraints."""


class Unbounded(Exception):
    """The cost decreases without bound over the feasible set."""


class MaxIterations(Exception):
    """The backend stopped before reaching its optimality tolerances."""


@dataclass
class GlobalProblem:
    """One monolithic QP/LP equivalent to a bundle of local problems."""

    W: np.ndarray
    w: np.ndarray
    U: np.ndarray
    u: np.ndarray
    V: np.ndarray
    v: np.ndarray
    c: np.ndarray
    constant: float
    offsets: dict[int, int]  # agent -> first column of its block
    widths: dict[int, int]

    @property
    def width(self) -> int:
        return self.W.shape[0]

    def split(self, x: np.ndarray) -> dict[int, np.ndarray]:
        """Cut a monolithic solution back into per-agent vectors."""
        return {
            i: x[off : off + self.widths[i]] for i, off in self.offsets.items()
        }

    @property
    def is_lp(self) -> bool:
        return not np.any(self.W)


def assemble_global(problems: Mapping[int, LocalProblem]) -> GlobalProblem:
    """Stack local problems and pin shared copies to each other.

    Consensus couplings appear once per (ordered) pair as
    ``C_ij x_i - C_ji x_j = 0``; everything else is block diagonal /
    concatenated.  Column order follows ascending agent number.
    """
    agents = sorted(problems)
    offsets: dict[int, int] = {}
    widths: dict[int, int] = {}
    off = 0
    for i in agents:
        offsets[i] = off
        widths[i] = problems[i].width
        off += widths[i]
    total = off

    def lift_cols(A: np.ndarray, agent: int) -> np.ndarray:
        out = np.zeros((A.shape[0], total))
        out[:, offsets[agent] : offsets[agent] + widths[agent]] = A
        return out

    U_blocks = [lift_cols(problems[i].U, i) for i in agents if problems[i].U.size]
    u_parts = [problems[i].u for i in agents if problems[i].U.size]
    for i in agents:
        for j in problems[i].neighbors:
            if j < i:
                continue
            C_ij, C_ji = problems[i].couplings[j], problems[j].couplings[i]
            rows = lift_cols(C_ij, i) - lift_cols(C_ji, j)
            U_blocks.append(rows)
            u_parts.append(np.zeros(rows.shape[0]))
    V_blocks = [lift_cols(problems[i].V, i) for i in agents if problems[i].V.size]
    v_parts = [problems[i].v for i in agents if problems[i].V.size]

    W = np.zeros((total, total))
    w = np.zeros(total)
    c = np.zeros(total)
    for i in agents:
        s = slice(offsets[i], offsets[i] + widths[i])
        W[s, s] = problems[i].W
        w[s.start : s.stop] = problems[i].w
        c[s.start : s.stop] = problems[i].c
    return GlobalProblem(
        W=W,
        w=w,
        U=np.vstack(U_blocks) if U_blocks else np.zeros((0, total)),
        u=np.concatenate(u_parts) if u_parts else np.zeros(0),
        V=np.vstack(V_blocks) if V_blocks else np.zeros((0, total)),
        v=np.concatenate(v_parts) if v_parts else np.zeros(0),
        c=c,
        constant=sum(problems[i].objective_constant for i in agents),
        offsets=offsets,
        widths=widths,
    )


@dataclass
class CentralizedSolution:
    x: np.ndarray
    cost: float
    eq_residual: float
    ineq_residual: float


def _feasibility_certificate(problem: GlobalProblem) -> bool:
    """True iff some point satisfies the constraint blocks (phase-one LP)."""
    from scipy.optimize import linprog

    res = linprog(
        c=np.zeros(problem.width),
        A_ub=problem.V if problem.V.size else None,
        b_ub=problem.v if problem.V.size else None,
        A_eq=problem.U if problem.U.size else None,
        b_eq=problem.u if problem.U.size else None,
        bounds=(None, None),
        method="highs",
    )
    return res.status != 2


def _kkt_verified(problem: GlobalProblem, res, tol: float) -> bool:
    """Check stationarity, feasibility and complementarity of a QP iterate."""
    if res.get("x") is None:
        return False
    x = np.asarray(res["x"], dtype=float).ravel()
    y = np.asarray(res["y"], dtype=float).ravel() if problem.U.size else np.zeros(0)
    z = np.asarray(res["z"], dtype=float).ravel()
    stat = problem.W @ x + problem.w
    if problem.U.size:
        stat = stat + problem.U.T @ y
    if problem.V.size:
        stat = stat + problem.V.T @ z
    slack = problem.v - problem.V @ x if problem.V.size else np.zeros(0)
    checks = [
        np.max(np.abs(stat), initial=0.0),
        np.max(np.abs(problem.U @ x - problem.u), initial=0.0) if problem.U.size else 0.0,
        np.max(-slack, initial=0.0),
        np.max(np.abs(z * slack), initial=0.0),
        np.max(-z, initial=0.0),
    ]
    return max(checks) <= tol


def solve_centralized(problem: GlobalProblem, tol: float = 1e-9) -> CentralizedSolution:
    """Solve the monolith with an independent backend.

    LPs (``W == 0``) go to HiGHS, QPs to an interior-point cone solver.
    Raises :class:`Infeasible`, :class:`Unbounded` or :class:`MaxIterations`
    as reported by the backend; any other backend failure surfaces as
    ``RuntimeError``.  An ``unknown`` QP status is accepted when the iterate
    passes an explicit KKT check at 1e-7.
    """
    if problem.is_lp:
        from scipy.optimize import linprog

        res = linprog(
            c=problem.w,
            A_ub=problem.V if problem.V.size else None,
            b_ub=problem.v if problem.V.size else None,
            A_eq=problem.U if problem.U.size else None,
            b_eq=problem.u if problem.U.size else None,
            bounds=(None, None),
            method="highs",
        )
        if res.status == 2:
            raise Infeasible(res.message)
        if res.status == 3:
            raise Unbounded(res.message)
        if res.status == 1:
            raise MaxIterations(res.message)
        if res.status != 0:
            raise RuntimeError(f"LP backend failed: {res.message}")
        x = np.asarray(res.x, dtype=float)
    else:
        from cvxopt import matrix, solvers

        opts = {
            "show_progress": False,
            "abstol": tol,
            "reltol": tol,
            "feastol": max(tol, 1e-10),
            # badly scaled objectives (large linear term over tiny curvature)
            # need well over the stock 100 iterations
            "maxiters": 500,
        }
        args = dict(
            P=matrix(problem.W),
            q=matrix(problem.w),
            G=matrix(problem.V),
            h=matrix(problem.v),
        )
        if problem.U.size:
            args["A"] = matrix(problem.U)
            args["b"] = matrix(problem.u)
        try:
            res = solvers.qp(**args, options=opts)
        except ValueError as e:
            # coneqp assumes a strictly feasible start and fails with a bare
            # ValueError otherwise; certify which side broke before giving up
            if not _feasibility_certificate(problem):
                raise Infeasible("QP backend: no feasible point") from e
            raise RuntimeError(f"QP backend failed: {e}") from e
        if res["status"] == "primal infeasible":
            raise Infeasible("QP backend: primal infeasible")
        if res["status"] == "dual infeasible":
            raise Unbounded("QP backend: dual infeasible")
        if res["status"] != "optimal":
            # On singular curvature the relative gap can stall a decade or two
            # above reltol while the iterate itself is long converged, so
            # "unknown" is only a failure if the KKT conditions really fail.
            if not _feasibility_certificate(problem):
                raise Infeasible("QP backend: no feasible point")
            if not _kkt_verified(problem, res, tol=1e-7):
                raise MaxIterations(
                    f"QP backend stopped with status {res['status']!r}"
                )
        x = np.asarray(res["x"], dtype=float).ravel()

    cost = float(0.5 * x @ problem.W @ x + problem.w @ x + problem.constant)
    eq_res = float(np.max(np.abs(problem.U @ x - problem.u))) if problem.U.size else 0.0
    ineq_res = (
        float(np.max(np.maximum(problem.V @ x - problem.v, 0.0)))
        if problem.V.size
        else 0.0
    )
    return CentralizedSolution(x=x, cost=cost, eq_residual=eq_res, ineq_residual=ineq_res)


@dataclass
class LexiSolution:
    phi1: float  # stage-one optimum (queue cost)
    x: np.ndarray  # stage-two solution
    cost: float  # stage-two cost at the solution
    anchor_residual: float  # |c'x - phi1|


def solve_lexicographic_centralized(
    pc: GlobalProblem, tsc: GlobalProblem, tol: float = 1e-9
) -> LexiSolution:
    """Two-stage reference: stage-one optimum pinned into stage two.

    Solves the stage-one LP, appends the single global equality
    ``c' x = phi1_opt`` to the stage-two monolith and solves that.  The
    anchor must hold to 1e-8 at the returned point.
    """
    sol1 = solve_centralized(pc, tol)
    phi1 = float(pc.c @ sol1.x)
    anchored = replace(
        tsc,
        U=np.vstack([tsc.U, tsc.c[None, :]]) if tsc.U.size else tsc.c[None, :],
        u=np.concatenate([tsc.u, [phi1]]),
    )
    sol2 = solve_centralized(anchored, tol)
    gap = abs(float(tsc.c @ sol2.x) - phi1)
    if gap > 1e-8:
        raise MaxIterations(f"stage-two anchor violated by {gap:.2e}")
    return LexiSolution(phi1=phi1, x=sol2.x, cost=sol2.cost, anchor_residual=gap)
