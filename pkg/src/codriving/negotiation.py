"""Conflict detection, time-to-conflict-point severity and rule-based passing orders."""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Iterable, Sequence

from . import templates
from .dynamics import VehicleState
from .traffic import bumper_gap, path_neighbors, remaining_points
from .world import ConflictPoint, World

# two TTCPs closer than this are treated as a tie
TIE_TOL = 1e-9
# comfortable braking used to decide whether a vehicle can still stop short of a point
COMFORT_BRAKE = 3.0


class Severity(enum.IntEnum):
    """Ordered so that larger means more dangerous."""

    NoDanger = 0
    SlightDanger = 1
    GeneralDanger = 2
    SeriousDanger = 3

    @property
    def label(self) -> str:
        return {0: "no danger", 1: "slight danger", 2: "general danger", 3: "serious danger"}[self.value]


def band(delta: float) -> Severity:
    """Map a TTCP difference to its severity band (``inf`` is NoDanger)."""
    if math.isnan(delta) or delta < 0:
        raise ValueError(f"delta must be a non-negative number, got {delta}")
    if delta <= 2.0:
        return Severity.SeriousDanger
    if delta <= 5.0:
        return Severity.GeneralDanger
    if delta < 8.0:
        return Severity.SlightDanger
    return Severity.NoDanger


def time_to_point(d: float, v: float) -> float:
    """d / v, with a stopped vehicle never arriving unless it already sits on the point."""
    if d < 0 or v < 0:
        raise ValueError(f"distance and speed must be non-negative (d={d}, v={v})")
    if d == 0:
        return 0.0
    if v == 0:
        return math.inf
    return d / v


def ttcp_severity(d_i: float, v_i: float, d_j: float, v_j: float) -> tuple[float, Severity]:
    t_i, t_j = time_to_point(d_i, v_i), time_to_point(d_j, v_j)
    if math.isinf(t_i) or math.isinf(t_j):
        return math.inf, Severity.NoDanger
    delta = abs(t_i - t_j)
    return delta, band(delta)


# ---------------------------------------------------------------------------
# conflict pairs


@dataclass(frozen=True)
class ConflictPair:
    vehicle_i: int
    vehicle_j: int
    point: ConflictPoint
    d_i: float
    d_j: float
    v_i: float
    v_j: float
    ttcp_i: float
    ttcp_j: float
    delta_ttcp: float
    severity: Severity
    maneuver_i: str = "straight"
    maneuver_j: str = "straight"
    ramp_i: bool = False
    ramp_j: bool = False
    follower: int | None = None  # set for rear-end pairs

    @property
    def kind(self) -> str:
        return self.point.kind

    @property
    def ids(self) -> tuple[int, int]:
        return (self.vehicle_i, self.vehicle_j)

    def other(self, vid: int) -> int:
        return self.vehicle_j if vid == self.vehicle_i else self.vehicle_i

    def describe(self) -> str:
        return (
            f"vehicle {self.vehicle_i} ({_f(self.d_i)} m, TTCP {_t(self.ttcp_i)}) and vehicle {self.vehicle_j} "
            f"({_f(self.d_j)} m, TTCP {_t(self.ttcp_j)}) at {self.kind} point {self.point.label()}: "
            f"difference {_t(self.delta_ttcp)}, {self.severity.label}"
        )


def _f(x: float) -> str:
    return f"{round(x, 1) + 0.0:.1f}"


def _t(x: float) -> str:
    return "inf" if math.isinf(x) else f"{_f(x)} s"


def make_pair(
    i: VehicleState,
    j: VehicleState,
    point: ConflictPoint,
    d_i: float,
    d_j: float,
    **extra,
) -> ConflictPair:
    if i.id > j.id:
        i, j, d_i, d_j = j, i, d_j, d_i
        swap = {"maneuver_i": "maneuver_j", "maneuver_j": "maneuver_i", "ramp_i": "ramp_j", "ramp_j": "ramp_i"}
        extra = {swap.get(k, k): v for k, v in extra.items()}
    t_i, t_j = time_to_point(d_i, i.v), time_to_point(d_j, j.v)
    delta, sev = ttcp_severity(d_i, i.v, d_j, j.v)
    return ConflictPair(i.id, j.id, point, d_i, d_j, i.v, j.v, t_i, t_j, delta, sev, **extra)


def approach_lane(world: World, state: VehicleState, point: ConflictPoint) -> str | None:
    """The lane of ``state``'s route that carries it onto ``point``."""
    for lane_id in state.route:
        if lane_id in (point.lane_a, point.lane_b):
            return lane_id
    return None


def detect_conflicts(
    world: World,
    cav_ids: Iterable[int] | None = None,
    points: Iterable[ConflictPoint] | None = None,
) -> list[ConflictPair]:
    """Every pair of vehicles (at least one a CAV) due to pass a common point.

    Crossing/merging pairs use the static points still ahead of both vehicles,
    reached from different lanes.  Rear-end pairs link each vehicle to its
    immediate leader along its path: the point sits at the leader, which is
    at distance 0, and the follower's distance is the bumper gap.
    """
    cavs = frozenset(world.cav_ids if cav_ids is None else cav_ids)
    allowed = None if points is None else set(points)
    states = sorted(world.vehicles.values(), key=lambda s: s.id)
    pairs: list[ConflictPair] = []

    for a, b in combinations(states, 2):
        if a.id not in cavs and b.id not in cavs:
            continue
        pa, pb = remaining_points(world, a), remaining_points(world, b)
        for point in sorted(set(pa) & set(pb)):
            if allowed is not None and point not in allowed:
                continue
            la, lb = approach_lane(world, a, point), approach_lane(world, b, point)
            if la == lb:
                continue
            pairs.append(
                make_pair(
                    a, b, point, pa[point], pb[point],
                    maneuver_i=world.lanes[la].maneuver, maneuver_j=world.lanes[lb].maneuver,
                    ramp_i=world.lanes[la].kind == "merge-ramp", ramp_j=world.lanes[lb].kind == "merge-ramp",
                )
            )

    seen = set()
    for follower in states:
        leader, _ = path_neighbors(world, follower)
        if leader is None or (follower.id not in cavs and leader.id not in cavs):
            continue
        key = (min(follower.id, leader.id), max(follower.id, leader.id))
        if key in seen:
            continue
        seen.add(key)
        lead = leader.state
        pos = (round(lead.x, 6) + 0.0, round(lead.y, 6) + 0.0)
        point = ConflictPoint(follower.lane_id, lead.lane_id, pos, "rear-end-shared-lane")
        gap = max(bumper_gap(follower, leader), 0.0)
        pairs.append(make_pair(follower, lead, point, gap, 0.0, follower=follower.id))

    pairs.sort(key=lambda p: (p.vehicle_i, p.vehicle_j, p.point))
    return pairs


# ---------------------------------------------------------------------------
# passing orders


@dataclass(frozen=True)
class PassingOrder:
    pair: ConflictPair
    first: int
    yielder: int
    rule: str
    reason: str
    source: str = "rule"  # "rule" or "backend"

    def __post_init__(self):
        if {self.first, self.yielder} != {self.pair.vehicle_i, self.pair.vehicle_j}:
            raise ValueError("first and yielder must be the two vehicles of the pair")

    def role_of(self, vid: int) -> str | None:
        if vid == self.first:
            return "first"
        if vid == self.yielder:
            return "yield"
        return None


Verdict = tuple[int, int, str] | None  # (first, yielder, reason)
Rule = tuple[str, Callable[[ConflictPair], Verdict]]


def _can_stop(d: float, v: float) -> bool:
    return d > 0 and v * v / (2.0 * COMFORT_BRAKE) < d


def _r1_turning_yields(p: ConflictPair) -> Verdict:
    turn_i, turn_j = p.maneuver_i != "straight", p.maneuver_j != "straight"
    if turn_i == turn_j or p.kind == "rear-end-shared-lane":
        return None
    turner, straight = (p.vehicle_i, p.vehicle_j) if turn_i else (p.vehicle_j, p.vehicle_i)
    d, v = (p.d_i, p.v_i) if turner == p.vehicle_i else (p.d_j, p.v_j)
    if not _can_stop(d, v):
        return None  # already committed to the conflict area
    return straight, turner, f"turning vehicle {turner} yields to going-straight vehicle {straight}"


def _r2_ramp_yields(p: ConflictPair) -> Verdict:
    if p.ramp_i == p.ramp_j or p.kind == "rear-end-shared-lane":
        return None
    ramp, main = (p.vehicle_i, p.vehicle_j) if p.ramp_i else (p.vehicle_j, p.vehicle_i)
    d, v = (p.d_i, p.v_i) if ramp == p.vehicle_i else (p.d_j, p.v_j)
    if not _can_stop(d, v):
        return None
    return main, ramp, f"ramp vehicle {ramp} yields to mainline vehicle {main}"


def _r3_follower_yields(p: ConflictPair) -> Verdict:
    if p.follower is None:
        return None
    lead = p.other(p.follower)
    return lead, p.follower, f"following vehicle {p.follower} yields to leading vehicle {lead}"


def _r4_later_yields(p: ConflictPair) -> Verdict:
    if abs(p.ttcp_i - p.ttcp_j) <= TIE_TOL:
        return None
    later, earlier = (p.vehicle_i, p.vehicle_j) if p.ttcp_i > p.ttcp_j else (p.vehicle_j, p.vehicle_i)
    return earlier, later, f"vehicle {later} arrives later and yields to vehicle {earlier}"


def _r5_smaller_id_first(p: ConflictPair) -> Verdict:
    return p.vehicle_i, p.vehicle_j, f"equal arrival times: vehicle {p.vehicle_i} (smaller id) passes first"


DEFAULT_RULES: tuple[Rule, ...] = (
    ("R1", _r1_turning_yields),
    ("R2", _r2_ramp_yields),
    ("R3", _r3_follower_yields),
    ("R4", _r4_later_yields),
    ("R5", _r5_smaller_id_first),
)
HARD_RULES = frozenset({"R1", "R2", "R3"})


def apply_rules(pair: ConflictPair, rules: Sequence[Rule] = DEFAULT_RULES) -> PassingOrder:
    for name, rule in rules:
        verdict = rule(pair)
        if verdict is not None:
            first, yielder, reason = verdict
            return PassingOrder(pair, first, yielder, name, reason)
    raise ValueError("rule table must end with a rule that always fires")


def coordinator_prompt(orders: Sequence[PassingOrder]) -> str:
    lines = ["Proposed passing orders:"]
    for n, o in enumerate(orders, 1):
        lines.append(
            f"Pair {n}: {o.pair.describe()}. Proposal: vehicle {o.first} first, vehicle {o.yielder} yields "
            f"({o.rule}: {o.reason})."
        )
    return "\n".join(lines)


_PAIR_REPLY = re.compile(r"^\s*pair\s+(\d+)\s*:\s*(confirm|swap)\b", re.IGNORECASE | re.MULTILINE)


def parse_coordinator_reply(reply: str, n: int) -> dict[int, str]:
    out = {}
    for m in _PAIR_REPLY.finditer(reply):
        idx = int(m.group(1))
        if 1 <= idx <= n and idx not in out:
            out[idx] = m.group(2).lower()
    return out


def coordinate(
    pairs: Sequence[ConflictPair],
    rules: Sequence[Rule] = DEFAULT_RULES,
    backend=None,
) -> list[PassingOrder]:
    """Passing orders for every pair that is in some danger.

    With a backend, the rule verdicts are sent in one request; the backend may
    swap orders decided by the soft rules only.  Any backend failure leaves
    the rule verdicts in place.
    """
    orders = [apply_rules(p, rules) for p in pairs if p.severity != Severity.NoDanger]
    if backend is None or not orders:
        return orders
    from .gateway import ChatRequest

    try:
        request = ChatRequest.from_texts(templates.COORDINATOR_SYSTEM, coordinator_prompt(orders))
        answers = parse_coordinator_reply(backend.chat(request), len(orders))
    except Exception:  # noqa: BLE001 - the coordinator must never block the step
        return orders
    out = []
    for n, o in enumerate(orders, 1):
        if answers.get(n) == "swap" and o.rule not in HARD_RULES:
            o = PassingOrder(o.pair, o.yielder, o.first, o.rule, f"coordinator swapped the {o.rule} order", "backend")
        out.append(o)
    return out


def orders_for(orders: Iterable[PassingOrder], vid: int) -> list[PassingOrder]:
    """Orders involving ``vid``, most severe first."""
    mine = [o for o in orders if vid in (o.first, o.yielder)]
    return sorted(mine, key=lambda o: (-o.pair.severity, o.pair.delta_ttcp, o.pair.vehicle_i, o.pair.vehicle_j, o.pair.point))


def render_orders(orders: Sequence[PassingOrder], ego_id: int) -> str:
    if not orders:
        return templates.NO_CONFLICTS
    lines = []
    for o in orders:
        if o.yielder == ego_id:
            role = templates.YOU_YIELD.format(other=o.first)
        else:
            role = templates.YOU_FIRST.format(other=o.yielder)
        lines.append(f"- {role}: {o.pair.describe()}. Reason: {o.reason}.")
    return "\n".join(lines)
