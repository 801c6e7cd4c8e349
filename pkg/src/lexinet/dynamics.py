"""Store-and-forward traffic dynamics and constraint checking.

State lives on links: ``n`` vehicles on each road link, ``q`` vehicles in the
origin queue attached to each source link.  Over one control interval a link
gains its queue discharge (source links), exogenous inflow and a fixed share
of each upstream link's outflow, and loses its own outflow plus exogenous
sinks:

    n[z] += e_in[z] - e_out[z] + sum_w r[w,z] * f_d[w] - f_d[z] + f_u[z]
    q[z] += d[z] - f_u[z]                      (source links only)

:func:`predict_trajectory` iterates this map verbatim — it is exactly the
linear model the optimisation stages constrain.  :func:`step_plant` is the
closed-loop "reality": it perturbs demand, then clamps commanded flows to
physical limits (availability, receiving space, service rate, exit caps,
cycle budget) before applying the same bookkeeping.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .network import Network

__all__ = [
    "TrafficState",
    "ExogenousForecast",
    "ControlInput",
    "PlantFlows",
    "Violation",
    "DimensionMismatch",
    "predict_trajectory",
    "step_plant",
    "check_feasibility",
]


class DimensionMismatch(Exception):
    """Controls and forecast disagree on the horizon length."""


@dataclass
class TrafficState:
    """Vehicles on links (``n``) and in origin queues (``q``)."""

    n: dict[str, float]
    q: dict[str, float]

    @classmethod
    def zeros(cls, net: Network) -> "TrafficState":
        return cls(
            n={z: 0.0 for z in net.link_ids},
            q={z: 0.0 for z in net.source_links},
        )

    def copy(self) -> "TrafficState":
        return TrafficState(dict(self.n), dict(self.q))

    def total_vehicles(self) -> float:
        return sum(self.n.values()) + sum(self.q.values())


@dataclass
class ExogenousForecast:
    """Per-interval exogenous data over a horizon of ``K`` intervals.

    ``d`` is origin demand (vehicles per interval, keyed by source link),
    ``e_in``/``e_out`` are measured exogenous in-/outflows on links (vehicles
    per interval).  Missing keys mean zero.
    """

    K: int
    d: tuple[Mapping[str, float], ...]
    e_in: tuple[Mapping[str, float], ...]
    e_out: tuple[Mapping[str, float], ...]

    @classmethod
    def constant(
        cls,
        K: int,
        d: Mapping[str, float] | None = None,
        e_in: Mapping[str, float] | None = None,
        e_out: Mapping[str, float] | None = None,
    ) -> "ExogenousForecast":
        return cls(
            K=K,
            d=tuple(dict(d or {}) for _ in range(K)),
            e_in=tuple(dict(e_in or {}) for _ in range(K)),
            e_out=tuple(dict(e_out or {}) for _ in range(K)),
        )

    def slice(self, k: int) -> "ExogenousForecast":
        """Horizon-1 forecast holding interval ``k`` only."""
        return ExogenousForecast(
            K=1, d=(self.d[k],), e_in=(self.e_in[k],), e_out=(self.e_out[k],)
        )

    def e_net(self, k: int, link_id: str) -> float:
        return self.e_in[k].get(link_id, 0.0) - self.e_out[k].get(link_id, 0.0)


@dataclass
class ControlInput:
    """One interval's decisions: link outflows, queue discharges, greens."""

    f_d: dict[str, float]
    f_u: dict[str, float]
    g: dict[str, float]

    @classmethod
    def zeros(cls, net: Network) -> "ControlInput":
        return cls(
            f_d={z: 0.0 for z in net.link_ids},
            f_u={z: 0.0 for z in net.source_links},
            g={p: 0.0 for p in net.phase},
        )


def _advance(
    net: Network,
    state: TrafficState,
    f_d: Mapping[str, float],
    f_u: Mapping[str, float],
    d: Mapping[str, float],
    e_in: Mapping[str, float],
    e_out: Mapping[str, float],
) -> TrafficState:
    """One exact application of the conservation equations (no clamping)."""
    n = dict(state.n)
    q = dict(state.q)
    for z_id in net.link_ids:
        inflow = sum(
            net.link[w].turn_ratios.get(z_id, 0.0) * f_d.get(w, 0.0)
            for w in net.upstream[z_id]
        )
        n[z_id] = (
            state.n[z_id]
            + e_in.get(z_id, 0.0)
            - e_out.get(z_id, 0.0)
            + inflow
            - f_d.get(z_id, 0.0)
            + f_u.get(z_id, 0.0)
        )
    for z_id in net.source_links:
        q[z_id] = state.q[z_id] + d.get(z_id, 0.0) - f_u.get(z_id, 0.0)
    return TrafficState(n, q)


def predict_trajectory(
    net: Network,
    state: TrafficState,
    forecast: ExogenousForecast,
    controls: Sequence[ControlInput],
) -> list[TrafficState]:
    """Roll the (purely linear) model forward under planned controls.

    Returns the K predicted states, one per interval after the current one.
    Raises :class:`DimensionMismatch` when ``len(controls) != forecast.K``.
    No clamping whatsoever happens here; infeasible plans produce negative
    or over-capacity states, which is exactly what
    :func:`check_feasibility` looks for.
    """
    if len(controls) != forecast.K:
        raise DimensionMismatch(
            f"{len(controls)} control intervals against horizon {forecast.K}"
        )
    out: list[TrafficState] = []
    current = state
    for k in range(forecast.K):
        current = _advance(
            net,
            current,
            controls[k].f_d,
            controls[k].f_u,
            forecast.d[k],
            forecast.e_in[k],
            forecast.e_out[k],
        )
        out.append(current)
    return out


@dataclass
class PlantFlows:
    """What actually happened during one plant interval."""

    d: dict[str, float]  # realised (noisy) demand
    f_u: dict[str, float]
    f_d: dict[str, float]
    e_out: dict[str, float]
    g: dict[str, float]  # greens after cycle-budget normalisation
    inflow: dict[str, float]  # realised arrivals onto each link
    scale: dict[str, float]  # receiving-space scale factor per link
    served: float  # vehicles that left through destination links

    def total_inflow(self) -> float:
        return sum(self.d.values())


def step_plant(
    net: Network,
    state: TrafficState,
    exo: ExogenousForecast,
    control: ControlInput,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[TrafficState, PlantFlows]:
    """Apply one interval of commanded controls to the physical network.

    Uses interval ``k=0`` of ``exo``.  Demand is perturbed multiplicatively,
    ``d * (1 + eps)`` with ``eps ~ U(-noise, +noise)`` drawn per source link
    (sorted id order, one generator call), then commands are clamped in a
    fixed order chosen so no clamp can undo another's guarantee:

    1. greens: negative phases to zero, then each junction's phases scaled
       down together if they exceed the cycle budget;
    2. queue discharge ``f_u``: at most queue + realised arrivals, at most
       the link's free space;
    3. exogenous sink ``e_out``: at most what is on the link;
    4. outflow ``f_d``: at most availability, the green service rate
       (internal downstream ends) and the exit cap (destination links);
    5. receiving space: arrivals onto a full link are scaled down
       proportionally across all feeding movements, which reduces the
       upstream links' realised outflows accordingly.

    Post-conditions (with exogenous ``e_in`` respecting free space): every
    ``n`` stays within ``[0, capacity]``, queues stay non-negative, vehicle
    mass balances exactly, and a feasible noise-free plan passes through
    unclamped.  Returns the next state and a :class:`PlantFlows` record.
    """
    if noise < 0:
        raise ValueError("noise must be non-negative")
    if noise > 0 and rng is None:
        raise ValueError("noise > 0 needs a random generator")

    e_in = exo.e_in[0]
    e_out_cmd = exo.e_out[0]

    d_real: dict[str, float] = {}
    sources = net.source_links
    eps = rng.uniform(-noise, noise, size=len(sources)) if noise > 0 else np.zeros(len(sources))
    for z_id, e in zip(sources, eps):
        d_real[z_id] = exo.d[0].get(z_id, 0.0) * (1.0 + float(e))

    # 1. greens
    g_real = {p: max(0.0, control.g.get(p, 0.0)) for p in net.phase}
    for j in net.junctions:
        if not j.is_internal or not j.phases:
            continue
        total = sum(g_real[p.id] for p in j.phases)
        budget = net.green_budget(j.id)
        if total > budget > 0:
            for p in j.phases:
                g_real[p.id] *= budget / total
        elif budget <= 0:
            for p in j.phases:
                g_real[p.id] = 0.0

    # 2. queue discharge
    f_u_real: dict[str, float] = {}
    for z_id in sources:
        link = net.link[z_id]
        space = link.capacity - state.n[z_id] - e_in.get(z_id, 0.0) + e_out_cmd.get(z_id, 0.0)
        f_u_real[z_id] = min(
            max(0.0, control.f_u.get(z_id, 0.0)),
            state.q[z_id] + d_real[z_id],
            max(0.0, space),
        )

    # 3. exogenous sinks
    e_out_real: dict[str, float] = {}
    for z_id in net.link_ids:
        have = state.n[z_id] + e_in.get(z_id, 0.0) + f_u_real.get(z_id, 0.0)
        e_out_real[z_id] = min(max(0.0, e_out_cmd.get(z_id, 0.0)), have)

    # 4. outflow caps that do not depend on other links
    f_d_avail: dict[str, float] = {}
    for z_id in net.link_ids:
        link = net.link[z_id]
        avail = max(
            0.0,
            state.n[z_id] + e_in.get(z_id, 0.0) + f_u_real.get(z_id, 0.0) - e_out_real[z_id],
        )
        cap = min(max(0.0, control.f_d.get(z_id, 0.0)), avail)
        if net.is_destination(z_id):
            if link.exit_rate is not None:
                cap = min(cap, link.exit_rate)
        else:
            service = link.saturation_flow * sum(
                g_real[p] for p in net.phases_serving[z_id]
            )
            cap = min(cap, service)
        f_d_avail[z_id] = cap

    # 5. receiving space
    scale: dict[str, float] = {}
    for z_id in net.link_ids:
        inflow_cmd = sum(
            net.link[w].turn_ratios.get(z_id, 0.0) * f_d_avail[w]
            for w in net.upstream[z_id]
        )
        recv = max(
            0.0,
            net.link[z_id].capacity
            - state.n[z_id]
            - e_in.get(z_id, 0.0)
            + e_out_real[z_id],
        )
        scale[z_id] = 1.0 if inflow_cmd <= recv or inflow_cmd <= 0 else recv / inflow_cmd

    inflow_real: dict[str, float] = {z: 0.0 for z in net.link_ids}
    f_d_real: dict[str, float] = {}
    for w_id in net.link_ids:
        link = net.link[w_id]
        if net.is_destination(w_id):
            f_d_real[w_id] = f_d_avail[w_id]
            continue
        sent = 0.0
        for z_id, ratio in link.turn_ratios.items():
            part = scale[z_id] * ratio * f_d_avail[w_id]
            inflow_real[z_id] += part
            sent += part
        f_d_real[w_id] = sent

    n_next: dict[str, float] = {}
    for z_id in net.link_ids:
        val = (
            state.n[z_id]
            + e_in.get(z_id, 0.0)
            - e_out_real[z_id]
            + inflow_real[z_id]
            + f_u_real.get(z_id, 0.0)
            - f_d_real[z_id]
        )
        n_next[z_id] = 0.0 if -1e-12 < val < 0.0 else val
    q_next: dict[str, float] = {}
    for z_id in sources:
        val = state.q[z_id] + d_real[z_id] - f_u_real[z_id]
        q_next[z_id] = 0.0 if -1e-12 < val < 0.0 else val

    served = sum(f_d_real[z] for z in net.destination_links)
    flows = PlantFlows(
        d=d_real,
        f_u=f_u_real,
        f_d=f_d_real,
        e_out=e_out_real,
        g=g_real,
        inflow=inflow_real,
        scale=scale,
        served=served,
    )
    return TrafficState(n_next, q_next), flows


# ---------------------------------------------------------------------------
# constraint checking


@dataclass(frozen=True)
class Violation:
    """One broken constraint instance on a planned trajectory."""

    family: str
    subject: str
    step: int
    slack: float  # by how much the constraint is exceeded

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return f"{self.family}[{self.subject}] at k={self.step}: exceeded by {self.slack:.3e}"


#: family name -> short description, in reporting order
FAMILIES = {
    "cycle_budget": "sum of phase greens within the usable cycle time",
    "green_nonneg": "phase greens non-negative",
    "flow_available": "outflow within [0, vehicles available on the link]",
    "junction_inflow": "arrivals onto a link within its free space",
    "source_inflow": "queue discharge within [0, free space on the source link]",
    "service_rate": "outflow within green time times saturation flow",
    "queue_nonneg": "origin queues non-negative",
    "exit_rate": "destination outflow within the exit cap",
    "retention": "vehicles retained on a link within gamma * capacity",
}


def check_feasibility(
    net: Network,
    state: TrafficState,
    forecast: ExogenousForecast,
    controls: Sequence[ControlInput],
    tol: float = 1e-6,
) -> list[Violation]:
    """Evaluate every model constraint on a planned control sequence.

    The trajectory is rolled out with :func:`predict_trajectory`; every
    constraint family is then checked at every interval and one
    :class:`Violation` is emitted per instance exceeded by more than
    ``tol``.  An empty list certifies the plan.
    """
    K = forecast.K
    traj = [state] + predict_trajectory(net, state, forecast, controls)
    out: list[Violation] = []

    def check(family: str, subject: str, step: int, excess: float) -> None:
        if excess > tol:
            out.append(Violation(family, subject, step, excess))

    for k in range(K):
        g = controls[k].g
        for j in net.junctions:
            if not j.is_internal:
                continue
            total = sum(g.get(p.id, 0.0) for p in j.phases)
            check("cycle_budget", j.id, k, total - net.green_budget(j.id))
            for p in j.phases:
                check("green_nonneg", p.id, k, -g.get(p.id, 0.0))

    for k in range(K):
        ctrl = controls[k]
        for z_id in net.link_ids:
            link = net.link[z_id]
            f_d = ctrl.f_d.get(z_id, 0.0)
            f_u = ctrl.f_u.get(z_id, 0.0) if z_id in state.q else 0.0
            avail = traj[k].n[z_id] + f_u + forecast.e_net(k, z_id)
            check("flow_available", z_id, k, f_d - avail)
            check("flow_available", z_id, k, -f_d)
            free = link.capacity - traj[k].n[z_id] - forecast.e_net(k, z_id)
            if net.junction[link.source].is_internal:
                arrivals = sum(
                    net.link[w].turn_ratios.get(z_id, 0.0) * ctrl.f_d.get(w, 0.0)
                    for w in net.upstream[z_id]
                )
                check("junction_inflow", z_id, k, arrivals - free)
            if net.is_source(z_id):
                check("source_inflow", z_id, k, ctrl.f_u.get(z_id, 0.0) - free)
                check("source_inflow", z_id, k, -ctrl.f_u.get(z_id, 0.0))
            if net.junction[link.dest].is_internal:
                service = link.saturation_flow * sum(
                    ctrl.g.get(p, 0.0) for p in net.phases_serving[z_id]
                )
                check("service_rate", z_id, k, f_d - service)
            if net.is_destination(z_id) and link.exit_rate is not None:
                check("exit_rate", z_id, k, f_d - link.exit_rate)
            check("retention", z_id, k, traj[k].n[z_id] - f_d - link.gamma * link.capacity)

    for k in range(1, K + 1):
        for z_id in net.source_links:
            check("queue_nonneg", z_id, k, -traj[k].q[z_id])

    return out
