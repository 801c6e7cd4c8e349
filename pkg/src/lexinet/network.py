"""Road network model: junctions, signalised phases, links and agent partitions.

A network is a directed graph of road links between junctions.  Junctions are
either ``internal`` (signalised, carry phases) or ``boundary`` (gates where
traffic enters from origin queues or leaves the modelled area).  Links whose
upstream junction is a boundary are *source links* (they have an origin queue
attached); links whose downstream junction is a boundary are *destination
links* (traffic crossing them leaves the network).

Everything here is deliberately dumb data + derived lookups; model semantics
(dynamics, constraints) live in :mod:`lexinet.dynamics` and
:mod:`lexinet.problem_builder`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

__all__ = [
    "Phase",
    "Junction",
    "RoadLink",
    "Network",
    "NetworkIssue",
    "ValidationReport",
    "validate_network",
    "Partition",
    "MissingJunction",
    "build_partition",
    "natural_key",
]

INTERNAL = "internal"
BOUNDARY = "boundary"

_RATIO_TOL = 1e-9


def natural_key(ident: str) -> tuple:
    """Sort key that orders purely numeric ids numerically ("9" < "10")."""
    return (0, int(ident), "") if ident.isdigit() else (1, 0, ident)


def _sorted_ids(ids: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(ids, key=natural_key))


@dataclass(frozen=True)
class Phase:
    """A signal phase: the set of incoming links it grants right of way to."""

    id: str
    links: tuple[str, ...]


@dataclass(frozen=True)
class Junction:
    id: str
    kind: str  # INTERNAL or BOUNDARY
    lost_time: float = 0.0
    phases: tuple[Phase, ...] = ()

    @property
    def is_internal(self) -> bool:
        return self.kind == INTERNAL


@dataclass(frozen=True)
class RoadLink:
    """A directed road link.

    Attributes:
        source, dest: junction ids (upstream / downstream end).
        capacity: maximum number of vehicles the link can store (n_bar).
        saturation_flow: service rate while green, vehicles per second.
        gamma: retention fraction; at most ``gamma * capacity`` vehicles may
            be planned to stay on the link from one interval to the next.
        turn_ratios: downstream link id -> fraction of this link's outflow
            that continues onto it.  Empty for destination links.
        exit_rate: hard cap on outflow per interval; required for
            destination links and must be left unset elsewhere.
    """

    id: str
    source: str
    dest: str
    capacity: float
    saturation_flow: float
    gamma: float = 0.5
    turn_ratios: Mapping[str, float] = field(default_factory=dict)
    exit_rate: float | None = None


@dataclass(frozen=True)
class Network:
    junctions: tuple[Junction, ...]
    links: tuple[RoadLink, ...]
    cycle: float  # control interval / signal cycle length in seconds

    # -- basic lookups -----------------------------------------------------

    @cached_property
    def junction(self) -> dict[str, Junction]:
        return {j.id: j for j in self.junctions}

    @cached_property
    def link(self) -> dict[str, RoadLink]:
        return {z.id: z for z in self.links}

    @cached_property
    def link_ids(self) -> tuple[str, ...]:
        return _sorted_ids(z.id for z in self.links)

    @cached_property
    def junction_ids(self) -> tuple[str, ...]:
        return _sorted_ids(j.id for j in self.junctions)

    # -- derived structure -------------------------------------------------

    @cached_property
    def in_links(self) -> dict[str, tuple[str, ...]]:
        """Junction id -> incoming link ids."""
        acc: dict[str, list[str]] = {j.id: [] for j in self.junctions}
        for z in self.links:
            if z.dest in acc:
                acc[z.dest].append(z.id)
        return {j: _sorted_ids(v) for j, v in acc.items()}

    @cached_property
    def out_links(self) -> dict[str, tuple[str, ...]]:
        """Junction id -> outgoing link ids."""
        acc: dict[str, list[str]] = {j.id: [] for j in self.junctions}
        for z in self.links:
            if z.source in acc:
                acc[z.source].append(z.id)
        return {j: _sorted_ids(v) for j, v in acc.items()}

    @cached_property
    def source_links(self) -> tuple[str, ...]:
        """Links entering the network from a boundary junction."""
        return _sorted_ids(
            z.id
            for z in self.links
            if (j := self.junction.get(z.source)) is not None and not j.is_internal
        )

    @cached_property
    def destination_links(self) -> tuple[str, ...]:
        """Links through which traffic leaves the network."""
        return _sort_dest(self)

    @cached_property
    def upstream(self) -> dict[str, tuple[str, ...]]:
        """Link id -> links feeding into it (w with r_{w,z} > 0)."""
        acc: dict[str, list[str]] = {z.id: [] for z in self.links}
        for w in self.links:
            for z_id, ratio in w.turn_ratios.items():
                if ratio > 0 and z_id in acc:
                    acc[z_id].append(w.id)
        return {z: _sorted_ids(v) for z, v in acc.items()}

    @cached_property
    def phases_of_junction(self) -> dict[str, tuple[str, ...]]:
        return {j.id: tuple(p.id for p in j.phases) for j in self.junctions}

    @cached_property
    def phase(self) -> dict[str, Phase]:
        return {p.id: p for j in self.junctions for p in j.phases}

    @cached_property
    def phase_junction(self) -> dict[str, str]:
        return {p.id: j.id for j in self.junctions for p in j.phases}

    @cached_property
    def phases_serving(self) -> dict[str, tuple[str, ...]]:
        """Link id -> phases that grant it right of way (P_z)."""
        acc: dict[str, list[str]] = {z.id: [] for z in self.links}
        for j in self.junctions:
            for p in j.phases:
                for z_id in p.links:
                    if z_id in acc:
                        acc[z_id].append(p.id)
        return {z: tuple(sorted(v)) for z, v in acc.items()}

    def is_source(self, link_id: str) -> bool:
        return link_id in set(self.source_links)

    def is_destination(self, link_id: str) -> bool:
        return link_id in set(self.destination_links)

    def green_budget(self, junction_id: str) -> float:
        """Usable green time per cycle at a junction (T - L)."""
        return self.cycle - self.junction[junction_id].lost_time


def _sort_dest(net: Network) -> tuple[str, ...]:
    return _sorted_ids(
        z.id
        for z in net.links
        if (j := net.junction.get(z.dest)) is not None and not j.is_internal
    )


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class NetworkIssue:
    kind: str
    subject: str
    message: str

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return f"[{self.kind}] {self.subject}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[NetworkIssue, ...]

    @property
    def ok(self) -> bool:
        return not self.issues

    def by_kind(self, kind: str) -> tuple[NetworkIssue, ...]:
        return tuple(i for i in self.issues if i.kind == kind)

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        if self.ok:
            return "network ok"
        return "\n".join(str(i) for i in self.issues)


def validate_network(net: Network) -> ValidationReport:
    """Check structural consistency of a network.

    Returns a report of diagnostics rather than raising: a half-built or
    hand-edited scenario should produce a readable list of everything wrong
    with it in one pass.

    Checked, among others: id uniqueness, dangling junction/link references,
    turn-ratio normalisation, phases only at internal junctions and only for
    their own incoming links, and reachability (every link reachable from a
    source link and able to reach a destination link).
    """
    issues: list[NetworkIssue] = []
    add = lambda kind, subject, msg: issues.append(NetworkIssue(kind, subject, msg))

    if net.cycle <= 0:
        add("cycle", "-", f"cycle must be positive, got {net.cycle}")

    seen_j: set[str] = set()
    for j in net.junctions:
        if j.id in seen_j:
            add("duplicate-junction", j.id, "junction id appears more than once")
        seen_j.add(j.id)
        if j.kind not in (INTERNAL, BOUNDARY):
            add("junction-kind", j.id, f"unknown kind {j.kind!r}")
        if j.lost_time < 0 or j.lost_time >= net.cycle:
            add("lost-time", j.id, f"lost time {j.lost_time} outside [0, cycle)")
        if j.is_internal and not j.phases:
            add("no-phase", j.id, "internal junction has no phases")
        if not j.is_internal and j.phases:
            add("phase-at-boundary", j.id, "boundary junction cannot carry phases")

    seen_z: set[str] = set()
    seen_p: set[str] = set()
    for z in net.links:
        if z.id in seen_z:
            add("duplicate-link", z.id, "link id appears more than once")
        seen_z.add(z.id)
        for end in (z.source, z.dest):
            if end not in net.junction:
                add("unknown-junction", z.id, f"references undefined junction {end!r}")
        if z.source == z.dest:
            add("self-loop", z.id, "link starts and ends at the same junction")
        if z.capacity <= 0:
            add("capacity", z.id, f"capacity must be positive, got {z.capacity}")
        if z.saturation_flow <= 0:
            add("saturation", z.id, f"saturation flow must be positive, got {z.saturation_flow}")
        if not 0 < z.gamma <= 1:
            add("gamma", z.id, f"gamma must lie in (0, 1], got {z.gamma}")

    for j in net.junctions:
        for p in j.phases:
            if p.id in seen_p:
                add("duplicate-phase", p.id, "phase id appears more than once")
            seen_p.add(p.id)
            if not p.links:
                add("empty-phase", p.id, "phase permits no links")
            for z_id in p.links:
                if z_id not in net.link:
                    add("unknown-link", p.id, f"phase references undefined link {z_id!r}")
                elif net.link[z_id].dest != j.id:
                    add(
                        "phase-link-mismatch",
                        p.id,
                        f"link {z_id} does not arrive at junction {j.id}",
                    )

    dest_set = set(net.destination_links)
    for z in net.links:
        total = 0.0
        for w_id, ratio in z.turn_ratios.items():
            if w_id not in net.link:
                add("unknown-link", z.id, f"turn ratio targets undefined link {w_id!r}")
                continue
            if net.link[w_id].source != z.dest:
                add(
                    "ratio-target",
                    z.id,
                    f"turn target {w_id} does not depart from junction {z.dest}",
                )
            if ratio < 0:
                add("ratio-negative", z.id, f"turn ratio to {w_id} is negative")
            total += ratio
        if z.id in dest_set:
            if z.turn_ratios:
                add("ratio-at-exit", z.id, "destination link cannot have turn ratios")
            if z.exit_rate is None or z.exit_rate <= 0:
                add("exit-rate", z.id, "destination link needs a positive exit_rate")
        else:
            if z.exit_rate is not None:
                add("exit-rate", z.id, "exit_rate only applies to destination links")
            if z.dest in net.junction and abs(total - 1.0) > _RATIO_TOL:
                add("ratio-sum", z.id, f"turn ratios sum to {total!r}, expected 1")

    if not net.source_links:
        add("no-source", "-", "network has no source links")
    if not dest_set:
        add("no-destination", "-", "network has no destination links")

    # Reachability over the turn graph (edge w -> z iff r_{w,z} > 0).
    fwd: set[str] = set(net.source_links)
    frontier = list(fwd)
    while frontier:
        w = frontier.pop()
        for z_id, ratio in net.link[w].turn_ratios.items():
            if ratio > 0 and z_id in net.link and z_id not in fwd:
                fwd.add(z_id)
                frontier.append(z_id)
    bwd: set[str] = set(dest_set)
    frontier = list(bwd)
    while frontier:
        z = frontier.pop()
        for w in net.upstream.get(z, ()):
            if w not in bwd:
                bwd.add(w)
                frontier.append(w)
    for z_id in net.link_ids:
        if z_id not in fwd:
            add("unreachable-forward", z_id, "no source link can reach this link")
        if z_id not in bwd:
            add("unreachable-backward", z_id, "no destination link reachable from here")

    return ValidationReport(tuple(issues))


# ---------------------------------------------------------------------------
# partitioning


class MissingJunction(Exception):
    """A junction has no agent assignment."""


@dataclass(frozen=True)
class Partition:
    """Assignment of junctions to agents and the induced link structure.

    ``cross[(i, j)]`` holds the links leaving agent i's junctions for agent
    j's (a directed notion); two agents are neighbours iff either direction
    is non-empty.  Shared links are exactly the union of both directions.
    """

    net: Network
    assignment: Mapping[str, int]
    agents: tuple[int, ...]
    junctions_of: Mapping[int, tuple[str, ...]]
    interior: Mapping[int, tuple[str, ...]]
    cross: Mapping[tuple[int, int], tuple[str, ...]]

    @cached_property
    def neighbors(self) -> dict[int, tuple[int, ...]]:
        acc: dict[int, set[int]] = {i: set() for i in self.agents}
        for (i, j), links in self.cross.items():
            if links:
                acc[i].add(j)
                acc[j].add(i)
        return {i: tuple(sorted(v)) for i, v in acc.items()}

    def internal_junctions(self, agent: int) -> tuple[str, ...]:
        return tuple(
            j for j in self.junctions_of[agent] if self.net.junction[j].is_internal
        )

    def boundary_junctions(self, agent: int) -> tuple[str, ...]:
        return tuple(
            j for j in self.junctions_of[agent] if not self.net.junction[j].is_internal
        )

    def shared(self, i: int, j: int) -> tuple[str, ...]:
        return _sorted_ids(self.cross.get((i, j), ()) + self.cross.get((j, i), ()))

    def links_of(self, agent: int) -> tuple[str, ...]:
        """All links with at least one endpoint at one of the agent's junctions."""
        own = set(self.interior[agent])
        for (i, j), links in self.cross.items():
            if agent in (i, j):
                own.update(links)
        return _sorted_ids(own)

    def agent_of_source(self, link_id: str) -> int:
        return self.assignment[self.net.link[link_id].source]

    def agent_of_dest(self, link_id: str) -> int:
        return self.assignment[self.net.link[link_id].dest]

    def is_shared(self, link_id: str) -> bool:
        return self.agent_of_source(link_id) != self.agent_of_dest(link_id)


def build_partition(net: Network, assignment: Mapping[str, int]) -> Partition:
    """Group junctions into agent subnetworks.

    ``assignment`` maps every junction id to an agent number; agents must be
    exactly 1..N (dense).  Raises :class:`MissingJunction` if any junction is
    left unassigned and ``ValueError`` for unknown junctions or sparse agent
    numbering.
    """
    for j in net.junctions:
        if j.id not in assignment:
            raise MissingJunction(j.id)
    for j_id in assignment:
        if j_id not in net.junction:
            raise ValueError(f"assignment references unknown junction {j_id!r}")

    agents = sorted(set(assignment.values()))
    if not agents or agents != list(range(1, len(agents) + 1)):
        raise ValueError(f"agent ids must be dense 1..N, got {agents}")

    junctions_of = {
        i: _sorted_ids(j for j, a in assignment.items() if a == i) for i in agents
    }
    interior: dict[int, list[str]] = {i: [] for i in agents}
    cross: dict[tuple[int, int], list[str]] = {}
    for z in net.links:
        i, j = assignment[z.source], assignment[z.dest]
        if i == j:
            interior[i].append(z.id)
        else:
            cross.setdefault((i, j), []).append(z.id)

    return Partition(
        net=net,
        assignment=dict(assignment),
        agents=tuple(agents),
        junctions_of=junctions_of,
        interior={i: _sorted_ids(v) for i, v in interior.items()},
        cross={k: _sorted_ids(v) for k, v in sorted(cross.items())},
    )
