"""Per-CAV observation, lane/vehicle grouping, intent sharing and scene text."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

from . import templates
from .dynamics import VehicleState
from .traffic import Neighbor, bumper_gap, path_neighbors, remaining_points
from .world import ConflictPoint, World


@dataclass(frozen=True)
class Observation:
    ego_id: int
    rows: tuple[tuple[int, tuple[float, ...]], ...]
    range_L: float

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(vid for vid, _ in self.rows)

    def matrix(self):
        import numpy as np

        return np.array([row for _, row in self.rows], dtype=float).reshape(len(self.rows), 6)


@dataclass(frozen=True)
class LaneContext:
    ego_lane: str
    left: str | None
    right: str | None
    conflict_lanes: tuple[str, ...]

    def __post_init__(self):
        if self.ego_lane in (self.left, self.right) or self.ego_lane in self.conflict_lanes:
            raise ValueError("ego lane cannot be adjacent to or in conflict with itself")


@dataclass(frozen=True)
class ConflictVehicle:
    state: VehicleState
    point: ConflictPoint
    d_ego: float
    d_other: float


@dataclass(frozen=True)
class VehicleGroups:
    leading: Neighbor | None = None
    rearing: Neighbor | None = None
    surrounding: tuple[tuple[str, Neighbor], ...] = ()  # (side, neighbour)
    conflict: tuple[ConflictVehicle, ...] = ()

    def member_ids(self) -> list[int]:
        ids = []
        if self.leading:
            ids.append(self.leading.id)
        if self.rearing:
            ids.append(self.rearing.id)
        ids += [n.id for _, n in self.surrounding]
        ids += [c.state.id for c in self.conflict]
        return ids

    @property
    def empty(self) -> bool:
        return not self.member_ids()


@dataclass(frozen=True)
class Intent:
    vehicle_id: int
    expected_lane: str
    expected_speed: float

    def __post_init__(self):
        if self.expected_speed < 0:
            raise ValueError("expected speed must be non-negative")


def observe(world: World, ego_id: int, L: float) -> Observation:
    if ego_id not in world.vehicles:
        raise KeyError(f"unknown ego vehicle {ego_id}")
    ego = world.vehicles[ego_id]
    rows = []
    for vid in sorted(world.vehicles):
        if vid == ego_id:
            continue
        other = world.vehicles[vid]
        if math.hypot(other.x - ego.x, other.y - ego.y) <= L:
            rows.append((vid, other.features()))
    return Observation(ego_id, tuple(rows), L)


def conflict_lanes(world: World, ego: VehicleState) -> tuple[str, ...]:
    ahead = set(ego.route[ego.route.index(ego.lane_id):])
    lanes = set()
    for point in world.conflict_points:
        if point.kind == "rear-end-shared-lane":
            continue
        if point.lane_a in ahead and point.lane_b not in ahead:
            lanes.add(point.lane_b)
        elif point.lane_b in ahead and point.lane_a not in ahead:
            lanes.add(point.lane_a)
    lanes.discard(ego.lane_id)
    return tuple(sorted(lanes))


def classify(
    world: World, ego_id: int, points: Iterable[ConflictPoint] | None = None, L: float | None = None
) -> tuple[LaneContext, VehicleGroups]:
    """Lane context and disjoint vehicle groups for ``ego_id``.

    Precedence when a vehicle qualifies twice: conflict, then leading/rearing,
    then surrounding.  Only vehicles within ``L`` are grouped.
    """
    ego = world.vehicles[ego_id]
    if L is None:
        L = world.config.perception.sensing_range if world.config else 100.0
    visible = set(observe(world, ego_id, L).ids)
    lane = world.lanes[ego.lane_id]
    ctx = LaneContext(ego.lane_id, lane.left, lane.right, conflict_lanes(world, ego))

    allowed = None if points is None else set(points)
    ego_points = remaining_points(world, ego)
    conflict = []
    for vid in sorted(visible):
        other = world.vehicles[vid]
        shared = [
            (p, d) for p, d in remaining_points(world, other).items()
            if p in ego_points and (allowed is None or p in allowed)
        ]
        if not shared:
            continue
        # the point ego reaches first is the relevant one
        point, d_other = min(shared, key=lambda pd: (ego_points[pd[0]], pd[0]))
        conflict.append(ConflictVehicle(other, point, ego_points[point], d_other))
    taken = frozenset(c.state.id for c in conflict) | frozenset(set(world.vehicles) - visible)

    leading, rearing = path_neighbors(world, ego, physical=True, exclude=taken)
    taken |= {n.id for n in (leading, rearing) if n is not None}

    surrounding = []
    for side, adj in (("left", lane.left), ("right", lane.right)):
        if adj is None:
            continue
        for vid in sorted(visible - taken):
            other = world.vehicles[vid]
            if other.lane_id != adj:
                continue
            s_ego, _ = world.lanes[adj].project(ego.x, ego.y)
            s_other, _ = world.lanes[adj].project(other.x, other.y)
            surrounding.append((side, Neighbor(other, s_other - s_ego)))
        taken |= {n.id for _, n in surrounding}
    return ctx, VehicleGroups(leading, rearing, tuple(surrounding), tuple(conflict))


def share_intent(world: World, ego_id: int, v_r: float | None = None, target_lane: str | None = None) -> Intent:
    """Expected lane and speed a CAV broadcasts to the other CAVs."""
    if ego_id not in world.cav_ids:
        raise ValueError(f"vehicle {ego_id} is not a CAV; HDVs do not share intent")
    ego = world.vehicles[ego_id]
    lane = target_lane or ego.lane_id
    speed = ego.v if v_r is None else v_r
    return Intent(ego_id, lane, max(speed, 0.0))


# ---------------------------------------------------------------------------
# rendering


def _r(x: float) -> float:
    return round(x, 1) + 0.0


def _f(x: float) -> str:
    return f"{_r(x):.1f}"


@dataclass(frozen=True)
class SceneFacts:
    ego_id: int
    ego_lane: str
    ego_xy: tuple[float, float]
    ego_speed: float
    desired_speed: float
    left: str | None
    right: str | None
    conflict_lanes: tuple[str, ...]
    leading: tuple | None  # (id, lane, x, y, gap, speed)
    rearing: tuple | None
    surrounding: tuple[tuple, ...]  # (id, lane, side, x, y, offset, speed)
    conflict: tuple[tuple, ...]  # (id, lane, x, y, px, py, d_other, d_ego, speed)
    intents: tuple[tuple, ...]  # (id, lane, speed)


@dataclass(frozen=True)
class SceneDescription:
    ego_id: int
    text: str
    facts: SceneFacts


def scene_facts(
    ego: VehicleState,
    lane_ctx: LaneContext,
    groups: VehicleGroups,
    intents: Mapping[int, Intent] | Iterable[Intent],
    desired_speed: float,
) -> SceneFacts:
    if isinstance(intents, Mapping):
        intents = intents.values()
    members = set(groups.member_ids())

    def near(n: Neighbor | None):
        if n is None:
            return None
        s = n.state
        return (s.id, s.lane_id, _r(s.x), _r(s.y), _r(max(bumper_gap(ego, n), 0.0)), _r(s.v))

    return SceneFacts(
        ego_id=ego.id,
        ego_lane=ego.lane_id,
        ego_xy=(_r(ego.x), _r(ego.y)),
        ego_speed=_r(ego.v),
        desired_speed=_r(desired_speed),
        left=lane_ctx.left,
        right=lane_ctx.right,
        conflict_lanes=lane_ctx.conflict_lanes,
        leading=near(groups.leading),
        rearing=near(groups.rearing),
        surrounding=tuple(
            (n.id, n.state.lane_id, side, _r(n.state.x), _r(n.state.y), _r(n.distance), _r(n.state.v))
            for side, n in groups.surrounding
        ),
        conflict=tuple(
            (c.state.id, c.state.lane_id, _r(c.state.x), _r(c.state.y), _r(c.point.position[0]),
             _r(c.point.position[1]), _r(c.d_other), _r(c.d_ego), _r(c.state.v))
            for c in groups.conflict
        ),
        intents=tuple(
            sorted((i.vehicle_id, i.expected_lane, _r(i.expected_speed)) for i in intents
                   if i.vehicle_id in members and i.vehicle_id != ego.id)
        ),
    )


def render_facts(f: SceneFacts) -> str:
    lines = [
        f"Ego vehicle {f.ego_id} is in lane {f.ego_lane} at ({_f(f.ego_xy[0])}, {_f(f.ego_xy[1])}) "
        f"driving {_f(f.ego_speed)} m/s; desired speed {_f(f.desired_speed)} m/s.",
        f"Lanes: ego lane {f.ego_lane}; left lane {f.left or 'none'}; right lane {f.right or 'none'}; "
        f"conflict lanes {', '.join(f.conflict_lanes) or 'none'}.",
    ]
    if not (f.leading or f.rearing or f.surrounding or f.conflict):
        lines.append(templates.NO_VEHICLES)
    else:
        for label, row, where in (("Leading", f.leading, "ahead"), ("Rearing", f.rearing, "behind")):
            if row is None:
                lines.append(f"{label} vehicle: none.")
            else:
                vid, lane, x, y, gap, v = row
                lines.append(
                    f"{label} vehicle: vehicle {vid} in lane {lane} at ({_f(x)}, {_f(y)}), "
                    f"gap {_f(gap)} m {where}, speed {_f(v)} m/s."
                )
        if f.surrounding:
            lines.append("Surrounding vehicles:")
            for vid, lane, side, x, y, off, v in f.surrounding:
                rel = "ahead" if off >= 0 else "behind"
                lines.append(
                    f"- vehicle {vid} in {side} lane {lane} at ({_f(x)}, {_f(y)}), "
                    f"{_f(abs(off))} m {rel}, speed {_f(v)} m/s."
                )
        else:
            lines.append("Surrounding vehicles: none.")
        if f.conflict:
            lines.append("Conflict vehicles:")
            for vid, lane, x, y, px, py, d_o, d_e, v in f.conflict:
                lines.append(
                    f"- vehicle {vid} in lane {lane} at ({_f(x)}, {_f(y)}), speed {_f(v)} m/s, "
                    f"{_f(d_o)} m from conflict point ({_f(px)}, {_f(py)}); ego is {_f(d_e)} m from it."
                )
        else:
            lines.append("Conflict vehicles: none.")
    if f.intents:
        lines.append("Shared intents:")
        for vid, lane, speed in f.intents:
            lines.append(f"- vehicle {vid} intends lane {lane} at {_f(speed)} m/s.")
    else:
        lines.append("Shared intents: none.")
    return "\n".join(lines)


def render_scene(
    ego: VehicleState,
    lane_ctx: LaneContext,
    groups: VehicleGroups,
    intents: Mapping[int, Intent] | Iterable[Intent] = (),
    desired_speed: float = 10.0,
) -> SceneDescription:
    facts = scene_facts(ego, lane_ctx, groups, intents, desired_speed)
    return SceneDescription(ego.id, render_facts(facts), facts)
