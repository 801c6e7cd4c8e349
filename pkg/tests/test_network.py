import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lexinet.network import (
    Junction,
    MissingJunction,
    Network,
    Phase,
    RoadLink,
    build_partition,
    natural_key,
    validate_network,
)
from netgen import chain_network, random_network, random_partition


def test_natural_key_orders_numeric_ids_numerically():
    ids = ["10", "9", "2", "B1", "A"]
    assert sorted(ids, key=natural_key) == ["2", "9", "10", "A", "B1"]


# ---------------------------------------------------------------------------
# validate_network


def test_minimal_chain_is_valid():
    report = validate_network(chain_network())
    assert report.ok
    assert report.issues == ()


def test_ratio_sum_violation_names_the_link():
    net = chain_network()
    bad = tuple(
        z if z.id != "in" else RoadLink(
            "in", "B1", "J1", z.capacity, z.saturation_flow,
            turn_ratios={"out": 0.7},
        )
        for z in net.links
    )
    report = validate_network(Network(net.junctions, bad, net.cycle))
    assert not report.ok
    kinds = {i.kind: i for i in report.issues}
    assert "ratio-sum" in kinds
    assert kinds["ratio-sum"].subject == "in"


def test_bundled_four_junction_network_is_valid(four_junction_scenario):
    net = four_junction_scenario.net
    assert validate_network(net).ok
    assert len(net.links) == 31
    assert len(net.junctions) == 11
    assert len(net.source_links) == 11
    assert len(net.destination_links) == 7


def _issue_kinds(net):
    return {i.kind for i in validate_network(net).issues}


def test_unknown_junction_reference():
    net = chain_network()
    links = net.links + (
        RoadLink("ghost", "J1", "nowhere", 10.0, 1.0, exit_rate=5.0),
    )
    assert "unknown-junction" in _issue_kinds(Network(net.junctions, links, net.cycle))


def test_self_loop_rejected():
    net = chain_network()
    links = net.links + (RoadLink("loop", "J1", "J1", 10.0, 1.0, turn_ratios={"out": 1.0}),)
    assert "self-loop" in _issue_kinds(Network(net.junctions, links, net.cycle))


def test_boundary_junction_with_phases_rejected():
    net = chain_network()
    juncs = tuple(
        Junction("B1", "boundary", 0.0, (Phase("px", ("in",)),)) if j.id == "B1" else j
        for j in net.junctions
    )
    assert "phase-at-boundary" in _issue_kinds(Network(juncs, net.links, net.cycle))


def test_internal_junction_without_phases_rejected():
    net = chain_network()
    juncs = tuple(
        Junction("J1", "internal", 4.0, ()) if j.id == "J1" else j for j in net.junctions
    )
    assert "no-phase" in _issue_kinds(Network(juncs, net.links, net.cycle))


def test_phase_serving_foreign_link_rejected():
    # "out" departs J1, so a phase at J1 cannot grant it right of way
    net = chain_network()
    juncs = tuple(
        Junction("J1", "internal", 4.0, (Phase("p1", ("in", "out")),))
        if j.id == "J1"
        else j
        for j in net.junctions
    )
    assert "phase-link-mismatch" in _issue_kinds(Network(juncs, net.links, net.cycle))


def test_ratio_pointing_away_from_dest_junction_rejected():
    net = chain_network(cycle=60.0)
    extra = (
        Junction("J2", "internal", 4.0, (Phase("p2", ("mid",)),)),
        Junction("B3", "boundary"),
    )
    links = (
        RoadLink("in", "B1", "J1", 60.0, 1.0, turn_ratios={"mid": 1.0}),
        # target "far" departs J2, not J1: invalid movement for "out"... built on "in2"
        RoadLink("in2", "B1", "J1", 60.0, 1.0, turn_ratios={"far": 1.0}),
        RoadLink("mid", "J1", "J2", 60.0, 1.0, turn_ratios={"far": 1.0}),
        RoadLink("far", "J2", "B3", 60.0, 1.0, exit_rate=20.0),
        RoadLink("out", "J1", "B2", 60.0, 1.0, exit_rate=20.0),
    )
    juncs = (
        Junction("J1", "internal", 4.0, (Phase("p1", ("in", "in2")),)),
    ) + extra + tuple(j for j in net.junctions if j.id != "J1")
    kinds = _issue_kinds(Network(juncs, links, net.cycle))
    assert "ratio-target" in kinds


def test_destination_link_needs_exit_rate_and_no_ratios():
    net = chain_network()
    links = tuple(
        RoadLink("out", "J1", "B2", z.capacity, z.saturation_flow)  # no exit_rate
        if z.id == "out"
        else z
        for z in net.links
    )
    assert "exit-rate" in _issue_kinds(Network(net.junctions, links, net.cycle))


def test_exit_rate_on_interior_link_rejected():
    net = chain_network()
    links = tuple(
        RoadLink(
            "in", "B1", "J1", z.capacity, z.saturation_flow,
            turn_ratios={"out": 1.0}, exit_rate=10.0,
        )
        if z.id == "in"
        else z
        for z in net.links
    )
    assert "exit-rate" in _issue_kinds(Network(net.junctions, links, net.cycle))


def test_unreachable_links_flagged():
    net = chain_network()
    extra_juncs = net.junctions + (
        Junction("J9", "internal", 4.0, (Phase("p9", ("iso",)),)),
        Junction("J8", "internal", 4.0, (Phase("p8", ("osi",)),)),
    )
    # iso/osi form a 2-cycle pocket no source feeds and no destination drains
    links = net.links + (
        RoadLink("iso", "J8", "J9", 10.0, 1.0, turn_ratios={"osi": 1.0}),
        RoadLink("osi", "J9", "J8", 10.0, 1.0, turn_ratios={"iso": 1.0}),
    )
    kinds = _issue_kinds(Network(extra_juncs, links, net.cycle))
    assert "unreachable-forward" in kinds
    assert "unreachable-backward" in kinds


def test_parameter_range_checks():
    net = chain_network()
    links = (
        RoadLink("in", "B1", "J1", -5.0, 0.0, gamma=1.5, turn_ratios={"out": 1.0}),
        net.links[1],
    )
    kinds = _issue_kinds(Network(net.junctions, links, net.cycle))
    assert {"capacity", "saturation", "gamma"} <= kinds


def test_lost_time_must_fit_in_cycle():
    net = chain_network(lost_time=61.0)
    assert "lost-time" in _issue_kinds(net)


# ---------------------------------------------------------------------------
# structural accessors


def test_incoming_outgoing_and_source_destination_classification():
    net = chain_network()
    assert net.in_links["J1"] == ("in",)
    assert net.out_links["J1"] == ("out",)
    assert net.source_links == ("in",)
    assert net.destination_links == ("out",)
    assert net.is_source("in") and not net.is_source("out")
    assert net.is_destination("out") and not net.is_destination("in")
    # no upstream feeders for a source link; none downstream of a destination
    assert net.upstream.get("in", ()) == ()
    assert net.link["out"].turn_ratios == {}


def test_upstream_inverts_turn_ratios(four_junction_scenario):
    net = four_junction_scenario.net
    for z in net.links:
        for w_id, ratio in z.turn_ratios.items():
            assert ratio == 0 or z.id in net.upstream[w_id]
    for w_id, feeders in net.upstream.items():
        for z_id in feeders:
            assert net.link[z_id].turn_ratios.get(w_id, 0.0) > 0


def test_green_budget(four_junction_scenario):
    net = four_junction_scenario.net
    assert net.green_budget("J1") == pytest.approx(56.0)


# ---------------------------------------------------------------------------
# partition


def test_four_junction_partition_cross_links(four_junction_scenario):
    part = four_junction_scenario.partition
    assert part.agents == (1, 2, 3)
    assert part.cross[(1, 2)] == ("7",)
    assert part.cross[(2, 1)] == ("5", "6")
    assert part.cross[(1, 3)] == ("21", "22")
    assert part.cross[(3, 1)] == ("19", "20")
    assert part.cross[(2, 3)] == ("13", "14")
    assert part.cross[(3, 2)] == ("15",)
    assert part.neighbors == {1: (2, 3), 2: (1, 3), 3: (1, 2)}


def test_single_agent_partition_has_no_neighbors():
    net = chain_network()
    part = build_partition(net, {"J1": 1, "B1": 1, "B2": 1})
    assert part.agents == (1,)
    assert part.neighbors == {1: ()}
    assert part.cross == {}
    assert part.links_of(1) == ("in", "out")


def test_two_agent_chain_split_matches_endpoint_classification():
    net = chain_network()
    part = build_partition(net, {"J1": 1, "B1": 1, "B2": 2})
    # oracle: classify every link by its endpoints' agents
    for z in net.links:
        i = part.assignment[z.source]
        j = part.assignment[z.dest]
        if i == j:
            assert z.id in part.interior[i]
        else:
            assert z.id in part.cross[(i, j)]
    assert part.shared(1, 2) == ("out",)
    assert part.is_shared("out") and not part.is_shared("in")
    assert part.agent_of_source("out") == 1
    assert part.agent_of_dest("out") == 2


def test_missing_junction_raises():
    net = chain_network()
    with pytest.raises(MissingJunction):
        build_partition(net, {"J1": 1, "B1": 1})


def test_unknown_junction_in_assignment_raises():
    net = chain_network()
    with pytest.raises(ValueError, match="unknown junction"):
        build_partition(net, {"J1": 1, "B1": 1, "B2": 1, "J9": 2})


def test_sparse_agent_numbering_raises():
    net = chain_network()
    with pytest.raises(ValueError, match="dense"):
        build_partition(net, {"J1": 1, "B1": 1, "B2": 3})


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_partition_properties_on_random_networks(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng)
    part = random_partition(rng, net)

    # neighbour symmetry
    for i in part.agents:
        for j in part.neighbors[i]:
            assert i in part.neighbors[j]
            assert part.shared(i, j) == part.shared(j, i)

    # interior and cross sets tile the link set exactly
    seen: list[str] = []
    for i in part.agents:
        seen.extend(part.interior[i])
    for links in part.cross.values():
        seen.extend(links)
    assert sorted(seen) == sorted(net.link_ids)
    assert len(seen) == len(net.link_ids)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_networks_satisfy_adjacency_invariants(seed):
    net = random_network(np.random.default_rng(seed))
    assert validate_network(net).ok
    for z in net.links:
        downstream = set(z.turn_ratios)
        assert (downstream == set()) == net.is_destination(z.id)
        if downstream:
            assert downstream <= set(net.out_links[z.dest])
            assert sum(z.turn_ratios.values()) == pytest.approx(1.0, abs=1e-9)
        assert (net.upstream.get(z.id, ()) == ()) == net.is_source(z.id)
