"""Scenario files: JSON in, validated simulation setup out.

A scenario bundles a network, its agent partition, piecewise-constant
demand profiles, exogenous in/outflows, the noise level and solver/cost
parameters.  Parsing is strict: unknown keys anywhere are rejected
(:class:`ParseError`), and anything structurally fine but semantically
broken — bad turn ratios, unreachable links, demand gaps — collects into a
single :class:`ValidationError` carrying the full list of findings.

Rates in files are vehicles per hour; everything downstream works in
vehicles per control interval (``rate * cycle_s / 3600``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .dynamics import ExogenousForecast, TrafficState
from .network import (
    Junction,
    MissingJunction,
    Network,
    NetworkIssue,
    Partition,
    Phase,
    RoadLink,
    build_partition,
    validate_network,
)
from .problem_builder import ControlParams

__all__ = ["Scenario", "ParseError", "ValidationError", "load_scenario"]


class ParseError(Exception):
    """Malformed JSON or unknown/missing keys."""


class ValidationError(Exception):
    """Semantically invalid scenario; ``issues`` holds every finding."""

    def __init__(self, issues):
        self.issues = tuple(issues)
        super().__init__(
            "; ".join(str(i) for i in self.issues) if self.issues else "invalid scenario"
        )


@dataclass(frozen=True)
class DemandPiece:
    from_min: float
    to_min: float
    veh_per_hour: float


@dataclass
class Scenario:
    """A fully validated simulation setup."""

    net: Network
    partition: Partition
    K: int
    demand: dict[str, tuple[DemandPiece, ...]]  # source link -> profile
    e_in: dict[str, float]  # veh per interval, constant
    e_out: dict[str, float]
    noise: float
    seed: int
    params: ControlParams
    fixed_time_plan: dict[str, float] | None
    n_steps: int
    path: Path | None = None

    @property
    def per_interval(self) -> float:
        """Conversion factor veh/h -> veh/interval."""
        return self.net.cycle / 3600.0

    def demand_rate(self, link_id: str, minute: float) -> float:
        """Nominal demand in veh/h on a source link at an absolute minute."""
        for piece in self.demand.get(link_id, ()):
            if piece.from_min <= minute < piece.to_min:
                return piece.veh_per_hour
        return 0.0

    def demand_at(self, t: int) -> dict[str, float]:
        """Nominal demand per source link during step ``t``, veh/interval."""
        minute = t * self.net.cycle / 60.0
        return {
            z: self.demand_rate(z, minute) * self.per_interval
            for z in self.net.source_links
        }

    def forecast(self, t: int, K: int | None = None) -> ExogenousForecast:
        """Noise-free forecast for the horizon starting at step ``t``.

        Demand anticipates profile changes; exogenous flows are constant.
        """
        K = self.K if K is None else K
        return ExogenousForecast(
            K=K,
            d=tuple(self.demand_at(t + k) for k in range(K)),
            e_in=tuple(dict(self.e_in) for _ in range(K)),
            e_out=tuple(dict(self.e_out) for _ in range(K)),
        )

    def initial_state(self) -> TrafficState:
        return TrafficState.zeros(self.net)


# ---------------------------------------------------------------------------
# parsing helpers


def _expect(obj, keys: set[str], required: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object")
    unknown = set(obj) - keys
    if unknown:
        raise ParseError(f"{where}: unknown key(s) {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ParseError(f"{where}: missing key(s) {sorted(missing)}")


def _number(obj, key: str, where: str, default=None):
    if key not in obj:
        if default is not None:
            return default
        raise ParseError(f"{where}: missing key {key!r}")
    val = obj[key]
    if not isinstance(val, (int, float)) or isinstance(val, bool):
        raise ParseError(f"{where}: {key!r} must be a number")
    return float(val)


def _string(obj, key: str, where: str) -> str:
    val = obj.get(key)
    if not isinstance(val, str) or not val:
        raise ParseError(f"{where}: {key!r} must be a non-empty string")
    return val


_TOP_KEYS = {
    "network",
    "partition",
    "horizon_K",
    "demands",
    "exogenous",
    "turning",
    "noise",
    "seed",
    "params",
    "fixed_time_plan",
}
_PARAM_KEYS = {"alpha", "beta", "theta", "gamma_default", "rho_lp", "rho_qp", "tol", "s_max"}


def load_scenario(path: str | Path) -> Scenario:
    """Read, parse and fully validate a scenario file.

    Raises :class:`ParseError` for malformed JSON or schema violations and
    :class:`ValidationError` (with the complete issue list) for semantic
    problems, including everything :func:`validate_network` finds.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path.name}: line {e.lineno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ParseError(f"{path.name}: top level must be an object")
    _expect(raw, _TOP_KEYS, {"network", "partition", "horizon_K", "demands"}, path.name)

    params_raw = raw.get("params", {})
    _expect(params_raw, _PARAM_KEYS, set(), "params")
    kwargs = {}
    for key in _PARAM_KEYS:
        if key not in params_raw:
            continue
        if key == "tol" and params_raw[key] is None:
            kwargs[key] = None
        elif key == "s_max":
            kwargs[key] = int(_number(params_raw, key, "params"))
        else:
            kwargs[key] = _number(params_raw, key, "params")
    params = ControlParams(**kwargs)

    net = _parse_network(raw["network"], raw.get("turning", []), params.gamma_default)
    issues: list[NetworkIssue] = list(validate_network(net).issues)

    K = raw["horizon_K"]
    if not isinstance(K, int) or isinstance(K, bool) or K < 0:
        raise ParseError("horizon_K must be a non-negative integer")

    noise = _number(raw, "noise", "scenario", default=0.0) if "noise" in raw else 0.0
    if not 0.0 <= noise < 1.0:
        issues.append(NetworkIssue("noise", "-", f"noise must lie in [0, 1), got {noise}"))
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ParseError("seed must be an integer")

    demand, n_steps = _parse_demands(raw["demands"], net, issues)
    e_in, e_out = _parse_exogenous(raw.get("exogenous", {}), net, issues)

    plan = raw.get("fixed_time_plan")
    if plan is not None:
        if not isinstance(plan, dict):
            raise ParseError("fixed_time_plan must map phase ids to seconds")
        for p, val in plan.items():
            if p not in net.phase:
                issues.append(NetworkIssue("plan-phase", p, "unknown phase in fixed_time_plan"))
            elif not isinstance(val, (int, float)) or val < 0:
                issues.append(NetworkIssue("plan-phase", p, f"bad green {val!r}"))
        plan = {p: float(v) for p, v in plan.items()}

    partition = None
    pa = raw["partition"]
    if not isinstance(pa, dict) or not all(
        isinstance(v, int) and not isinstance(v, bool) for v in pa.values()
    ):
        raise ParseError("partition must map junction ids to integer agents")
    try:
        partition = build_partition(net, pa)
    except MissingJunction as e:
        issues.append(NetworkIssue("unassigned-junction", str(e), "junction has no agent"))
    except ValueError as e:
        issues.append(NetworkIssue("partition", "-", str(e)))

    if issues:
        raise ValidationError(issues)

    return Scenario(
        net=net,
        partition=partition,
        K=K,
        demand=demand,
        e_in=e_in,
        e_out=e_out,
        noise=noise,
        seed=seed,
        params=params,
        fixed_time_plan=plan,
        n_steps=n_steps,
        path=path,
    )


def _parse_network(raw, turning, gamma_default: float) -> Network:
    _expect(raw, {"junctions", "links", "cycle_s"}, {"junctions", "links", "cycle_s"}, "network")
    cycle = _number(raw, "cycle_s", "network")

    ratios: dict[str, dict[str, float]] = {}
    if not isinstance(turning, list):
        raise ParseError("turning must be a list")
    for entry in turning:
        _expect(entry, {"from", "to", "ratio"}, {"from", "to", "ratio"}, "turning entry")
        src = _string(entry, "from", "turning entry")
        dst = _string(entry, "to", "turning entry")
        if dst in ratios.get(src, {}):
            raise ParseError(f"turning: duplicate movement {src!r} -> {dst!r}")
        ratios.setdefault(src, {})[dst] = _number(entry, "ratio", "turning entry")

    junctions = []
    for j_raw in raw["junctions"]:
        _expect(j_raw, {"id", "kind", "lost_time", "phases"}, {"id", "kind"}, "junction")
        jid = _string(j_raw, "id", "junction")
        kind = _string(j_raw, "kind", "junction")
        phases = []
        for p_raw in j_raw.get("phases", []):
            _expect(p_raw, {"id", "links"}, {"id", "links"}, f"phase of {jid}")
            links = p_raw["links"]
            if not isinstance(links, list) or not all(isinstance(v, str) for v in links):
                raise ParseError(f"phase of {jid}: links must be a list of link ids")
            phases.append(Phase(id=_string(p_raw, "id", "phase"), links=tuple(links)))
        junctions.append(
            Junction(
                id=jid,
                kind=kind,
                lost_time=_number(j_raw, "lost_time", f"junction {jid}", default=0.0)
                if "lost_time" in j_raw
                else 0.0,
                phases=tuple(phases),
            )
        )

    links = []
    for z_raw in raw["links"]:
        _expect(
            z_raw,
            {"id", "from", "to", "capacity", "saturation_flow", "gamma", "exit_rate"},
            {"id", "from", "to", "capacity", "saturation_flow"},
            "link",
        )
        zid = _string(z_raw, "id", "link")
        links.append(
            RoadLink(
                id=zid,
                source=_string(z_raw, "from", f"link {zid}"),
                dest=_string(z_raw, "to", f"link {zid}"),
                capacity=_number(z_raw, "capacity", f"link {zid}"),
                saturation_flow=_number(z_raw, "saturation_flow", f"link {zid}"),
                gamma=_number(z_raw, "gamma", f"link {zid}", default=gamma_default)
                if "gamma" in z_raw
                else gamma_default,
                turn_ratios=ratios.pop(zid, {}),
                exit_rate=_number(z_raw, "exit_rate", f"link {zid}")
                if "exit_rate" in z_raw
                else None,
            )
        )
    if ratios:
        raise ParseError(f"turning references unknown link(s) {sorted(ratios)}")
    return Network(junctions=tuple(junctions), links=tuple(links), cycle=cycle)


def _parse_demands(raw, net: Network, issues: list) -> tuple[dict, int]:
    if not isinstance(raw, list) or not raw:
        raise ParseError("demands must be a non-empty list")
    demand: dict[str, tuple[DemandPiece, ...]] = {}
    end_min = 0.0
    source_set = set(net.source_links)
    for entry in raw:
        _expect(entry, {"link", "pieces"}, {"link", "pieces"}, "demand entry")
        z = _string(entry, "link", "demand entry")
        if z in demand:
            raise ParseError(f"demands: duplicate entry for link {z!r}")
        if z not in source_set:
            issues.append(NetworkIssue("demand-link", z, "demand on a non-source link"))
        pieces = []
        for p_raw in entry["pieces"]:
            _expect(
                p_raw,
                {"from_min", "to_min", "veh_per_hour"},
                {"from_min", "to_min", "veh_per_hour"},
                f"demand piece of {z}",
            )
            pieces.append(
                DemandPiece(
                    from_min=_number(p_raw, "from_min", "piece"),
                    to_min=_number(p_raw, "to_min", "piece"),
                    veh_per_hour=_number(p_raw, "veh_per_hour", "piece"),
                )
            )
        pieces.sort(key=lambda p: p.from_min)
        cursor = 0.0
        for p in pieces:
            if abs(p.from_min - cursor) > 1e-9 or p.to_min <= p.from_min:
                issues.append(
                    NetworkIssue(
                        "demand-gap", z, f"pieces must tile [0, end); broken at {p.from_min}"
                    )
                )
                break
            if p.veh_per_hour < 0:
                issues.append(NetworkIssue("demand-negative", z, "negative demand"))
            cursor = p.to_min
        demand[z] = tuple(pieces)
        end_min = max(end_min, cursor)

    for z, pieces in demand.items():
        if pieces and abs(pieces[-1].to_min - end_min) > 1e-9:
            issues.append(
                NetworkIssue(
                    "demand-gap", z, f"profile ends at {pieces[-1].to_min}, run ends at {end_min}"
                )
            )

    steps = end_min * 60.0 / net.cycle if net.cycle > 0 else 0.0
    if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
        issues.append(
            NetworkIssue(
                "demand-horizon", "-", f"profile length {end_min} min is not a whole number of intervals"
            )
        )
        return demand, 0
    return demand, int(round(steps))


def _parse_exogenous(raw, net: Network, issues: list) -> tuple[dict, dict]:
    _expect(raw, {"e_in", "e_out"}, set(), "exogenous")
    out: list[dict[str, float]] = []
    for key in ("e_in", "e_out"):
        flows: dict[str, float] = {}
        for entry in raw.get(key, []):
            _expect(entry, {"link", "veh_per_hour"}, {"link", "veh_per_hour"}, f"{key} entry")
            z = _string(entry, "link", f"{key} entry")
            if z not in net.link:
                issues.append(NetworkIssue("exogenous-link", z, f"{key} on unknown link"))
                continue
            rate = _number(entry, "veh_per_hour", f"{key} entry")
            if rate < 0:
                issues.append(NetworkIssue("exogenous-negative", z, f"negative {key}"))
            flows[z] = rate * net.cycle / 3600.0
        out.append(flows)
    return out[0], out[1]
