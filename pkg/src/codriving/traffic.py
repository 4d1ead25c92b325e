"""Route-relative queries shared by HDV behaviour, perception and negotiation."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .dynamics import VehicleState
from .world import ConflictPoint, World, follow_route


@dataclass(frozen=True)
class Neighbor:
    state: VehicleState
    distance: float  # signed centre-to-centre offset along the path, positive ahead

    @property
    def id(self) -> int:
        return self.state.id


def bumper_gap(ego: VehicleState, other: Neighbor) -> float:
    return abs(other.distance) - 0.5 * (ego.length + other.state.length)


def predecessors(world: World, lane_id: str) -> list[str]:
    preds = world.cache.setdefault("preds", {})
    if lane_id not in preds:
        preds[lane_id] = sorted(l.id for l in world.lanes.values() if lane_id in l.successors)
    return preds[lane_id]


def lane_path(world: World, ego: VehicleState, lane_id: str) -> tuple[str, ...]:
    """Lanes ego would drive through on ``lane_id``: its route when it is on it, else that lane's chain."""
    if lane_id in ego.route:
        return ego.route[ego.route.index(lane_id):]
    return follow_route(world.lanes, lane_id)


def _path_offsets(world: World, path: tuple[str, ...]) -> dict[str, float]:
    key = ("path_offsets", path)
    cache = world.cache.setdefault("path_offsets", {})
    if key not in cache:
        offsets = dict(world.route_offsets(path))
        for pred in predecessors(world, path[0]):
            offsets.setdefault(pred, -world.lanes[pred].length)
        cache[key] = offsets
    return cache[key]


def _locate(world: World, offsets: dict[str, float], state: VehicleState, physical: bool) -> float | None:
    """Position of ``state`` along a path, or None when it is not on it."""
    if state.lane_id in offsets:
        s, _ = world.lanes[state.lane_id].project(state.x, state.y)
        return offsets[state.lane_id] + s
    if not physical:
        return None
    for lane_id, off in offsets.items():
        lane = world.lanes[lane_id]
        s, lat = lane.project(state.x, state.y)
        if 0.0 <= s <= lane.length and abs(lat) < 0.5 * lane.width:
            return off + s
    return None


def path_neighbors(
    world: World,
    ego: VehicleState,
    lane_id: str | None = None,
    physical: bool = True,
    exclude: frozenset[int] = frozenset(),
) -> tuple[Neighbor | None, Neighbor | None]:
    """Nearest vehicle ahead and behind ego along ``lane_id`` (default: ego's own lane).

    With ``physical`` a vehicle whose centre sits inside one of the path lanes
    counts even if it is assigned to another lane (e.g. mid lane change).
    """
    lane_id = lane_id or ego.lane_id
    key = ("nbr", ego.id, lane_id, physical, exclude)
    if key in world.memo:
        return world.memo[key]
    path = lane_path(world, ego, lane_id)
    offsets = _path_offsets(world, path)
    lane = world.lanes[lane_id]
    s_ego, _ = lane.project(ego.x, ego.y)
    here = offsets[lane_id] + s_ego
    ahead = behind = None
    for other in world.vehicles.values():
        if other.id == ego.id or other.id in exclude:
            continue
        pos = _locate(world, offsets, other, physical)
        if pos is None:
            continue
        d = pos - here
        if d >= 0:
            if ahead is None or d < ahead.distance:
                ahead = Neighbor(other, d)
        elif behind is None or d > behind.distance:
            behind = Neighbor(other, d)
    world.memo[key] = (ahead, behind)
    return ahead, behind


def clear_margin(state: VehicleState) -> float:
    return 0.5 * state.width


def remaining_points(world: World, state: VehicleState) -> dict[ConflictPoint, float]:
    """Crossing/merging points still ahead of ``state`` mapped to the front-bumper distance.

    A point stays listed while the vehicle body still covers it (distance 0)
    and drops out once the rear bumper is ``clear_margin`` past it.
    """
    key = ("points", state.id)
    if key in world.memo:
        return world.memo[key]
    prog = world.progress(state)
    front = prog + 0.5 * state.length
    rear = prog - 0.5 * state.length
    out = {}
    lanes_ahead = set(state.route[state.route.index(state.lane_id):])
    for point in world.conflict_points:
        if point.kind == "rear-end-shared-lane":
            continue
        if point.lane_a not in lanes_ahead and point.lane_b not in lanes_ahead:
            continue
        p = world.point_progress(state.route, point)
        if p is None or rear > p + clear_margin(state):
            continue
        out[point] = max(0.0, p - front)
    world.memo[key] = out
    return out


def lookahead_point(world: World, state: VehicleState, lane_id: str, distance: float) -> tuple[float, float]:
    """Point ``distance`` metres ahead of the vehicle's projection onto ``lane_id``, following its path."""
    path = lane_path(world, state, lane_id)
    s, _ = world.lanes[lane_id].project(state.x, state.y)
    s += distance
    idx = 0
    while s > world.lanes[path[idx]].length and idx + 1 < len(path):
        s -= world.lanes[path[idx]].length
        idx += 1
    return world.lanes[path[idx]].position(s)


def reference_heading(world: World, state: VehicleState, lane_id: str, lookahead: float) -> float:
    px, py = lookahead_point(world, state, lane_id, lookahead)
    return math.atan2(py - state.y, px - state.x)


def lateral_offset(world: World, state: VehicleState) -> float:
    return world.lanes[state.lane_id].project(state.x, state.y)[1]
