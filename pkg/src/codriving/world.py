"""Road geometry, conflict points, scenario construction and the simulation clock."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from itertools import combinations
from typing import Iterable, Mapping

import numpy as np
from shapely.geometry import LineString

from .config import ConfigError, ScenarioConfig
from .dynamics import VehicleState

Point = tuple[float, float]

LANE_KINDS = ("through", "merge-ramp", "intersection-approach", "intersection-exit")
CONFLICT_KINDS = ("crossing", "merging", "rear-end-shared-lane")
MANEUVERS = ("straight", "left", "right")

# Conflict geometry is resolved to 1 cm.
POINT_TOL = 0.01


@dataclass(frozen=True)
class Lane:
    id: str
    centerline: tuple[Point, ...]
    width: float
    successors: tuple[str, ...] = ()
    kind: str = "through"
    left: str | None = None
    right: str | None = None
    maneuver: str = "straight"

    def __post_init__(self):
        if len(self.centerline) < 2:
            raise ValueError(f"lane {self.id}: centerline needs at least two points")
        for p, q in zip(self.centerline, self.centerline[1:]):
            if p == q:
                raise ValueError(f"lane {self.id}: repeated centerline point {p}")
        if self.width <= 0:
            raise ValueError(f"lane {self.id}: width must be positive")
        if self.kind not in LANE_KINDS:
            raise ValueError(f"lane {self.id}: unknown kind {self.kind!r}")
        if self.maneuver not in MANEUVERS:
            raise ValueError(f"lane {self.id}: unknown maneuver {self.maneuver!r}")

    @cached_property
    def _segments(self) -> list[tuple[float, float, float, float, float, float]]:
        # (ax, ay, ux, uy, seg_len, cum_start) with (ux, uy) unit direction
        out = []
        cum = 0.0
        for (ax, ay), (bx, by) in zip(self.centerline, self.centerline[1:]):
            seg = math.hypot(bx - ax, by - ay)
            out.append((ax, ay, (bx - ax) / seg, (by - ay) / seg, seg, cum))
            cum += seg
        return out

    @cached_property
    def length(self) -> float:
        ax, ay, ux, uy, seg, cum = self._segments[-1]
        return cum + seg

    @property
    def start(self) -> Point:
        return self.centerline[0]

    @property
    def end(self) -> Point:
        return self.centerline[-1]

    def _segment_at(self, s: float):
        segs = self._segments
        for seg in segs:
            if s < seg[5] + seg[4]:
                return seg
        return segs[-1]

    def position(self, s: float, lateral: float = 0.0) -> Point:
        """Point at arc length ``s`` (extrapolated past either end), offset to the left by ``lateral``."""
        ax, ay, ux, uy, _, cum = self._segment_at(s)
        t = s - cum
        return (ax + ux * t - uy * lateral, ay + uy * t + ux * lateral)

    def heading(self, s: float) -> float:
        _, _, ux, uy, _, _ = self._segment_at(s)
        return math.atan2(uy, ux)

    def project(self, x: float, y: float) -> tuple[float, float]:
        """Arc length and signed lateral offset (left positive) of the closest centerline point."""
        best = None
        segs = self._segments
        last = len(segs) - 1
        for i, (ax, ay, ux, uy, seg, cum) in enumerate(segs):
            dx, dy = x - ax, y - ay
            t = dx * ux + dy * uy
            if i > 0 and t < 0:
                t = 0.0
            if i < last and t > seg:
                t = seg
            px, py = dx - ux * t, dy - uy * t
            d2 = px * px + py * py
            if best is None or d2 < best[0]:
                best = (d2, cum + t, ux * dy - uy * dx)
        return best[1], best[2]


@dataclass(frozen=True, order=True)
class ConflictPoint:
    lane_a: str
    lane_b: str
    position: Point
    kind: str

    def __post_init__(self):
        if self.kind not in CONFLICT_KINDS:
            raise ValueError(f"unknown conflict kind {self.kind!r}")
        if self.lane_a > self.lane_b:
            a, b = self.lane_b, self.lane_a
            object.__setattr__(self, "lane_a", a)
            object.__setattr__(self, "lane_b", b)

    def label(self) -> str:
        return f"({self.position[0]:.1f}, {self.position[1]:.1f})"


@dataclass(frozen=True)
class World:
    lanes: Mapping[str, Lane]
    vehicles: Mapping[int, VehicleState]
    cav_ids: frozenset[int]
    dt: float
    scenario_kind: str
    step: int = 0
    arrivals: tuple[tuple[int, float], ...] = ()
    config: ScenarioConfig | None = field(default=None, compare=False)
    # geometry-derived lookups; shared by every world that reuses these lanes
    cache: dict = field(default_factory=dict, compare=False, repr=False)
    # per-snapshot memo of derived queries; never carried over by replace()
    memo: dict = field(default_factory=dict, init=False, compare=False, repr=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.step < 0:
            raise ValueError("step must be non-negative")
        for vid, state in self.vehicles.items():
            if vid != state.id:
                raise ValueError(f"registry key {vid} does not match vehicle id {state.id}")
        arrived = {vid for vid, _ in self.arrivals}
        stray = self.cav_ids - set(self.vehicles) - arrived
        if stray:
            raise ValueError(f"cav ids {sorted(stray)} are not vehicles")

    @property
    def time(self) -> float:
        return self.step * self.dt

    def lane(self, lane_id: str) -> Lane:
        return self.lanes[lane_id]

    def cavs(self) -> list[VehicleState]:
        return [v for vid, v in self.vehicles.items() if vid in self.cav_ids]

    @property
    def conflict_points(self) -> tuple[ConflictPoint, ...]:
        if "points" not in self.cache:
            self.cache["points"] = conflict_points(self)
        return self.cache["points"]

    def route_offsets(self, route: tuple[str, ...]) -> dict[str, float]:
        cache = self.cache.setdefault("offsets", {})
        if route not in cache:
            offsets, acc = {}, 0.0
            for lane_id in route:
                offsets[lane_id] = acc
                acc += self.lanes[lane_id].length
            cache[route] = offsets
        return cache[route]

    def route_length(self, route: tuple[str, ...]) -> float:
        return sum(self.lanes[lane_id].length for lane_id in route)

    def progress(self, state: VehicleState) -> float:
        """Arc length of the vehicle centre along its own route."""
        s, _ = self.lanes[state.lane_id].project(state.x, state.y)
        return self.route_offsets(state.route)[state.lane_id] + s

    def lane_coords(self, state: VehicleState) -> tuple[float, float]:
        return self.lanes[state.lane_id].project(state.x, state.y)

    def point_progress(self, route: tuple[str, ...], point: ConflictPoint) -> float | None:
        """Arc length of ``point`` along ``route``, or None if the route never touches it."""
        offsets = self.route_offsets(route)
        for lane_id in route:
            if lane_id in (point.lane_a, point.lane_b):
                return offsets[lane_id] + self.point_s(lane_id, point.position)
        return None

    def point_s(self, lane_id: str, position: Point) -> float:
        cache = self.cache.setdefault("point_s", {})
        key = (lane_id, position)
        if key not in cache:
            cache[key] = self.lanes[lane_id].project(*position)[0]
        return cache[key]


# ---------------------------------------------------------------------------
# conflict geometry


def _near(p: Point, q: Point) -> bool:
    return math.hypot(p[0] - q[0], p[1] - q[1]) <= POINT_TOL


def _line_intersections(a: Lane, b: Lane) -> list[Point]:
    inter = LineString(a.centerline).intersection(LineString(b.centerline))
    if inter.is_empty:
        return []
    geoms = getattr(inter, "geoms", [inter])
    points = []
    for g in geoms:
        if g.geom_type == "Point":
            points.append((g.x, g.y))
        else:
            # collinear overlap: keep its end points
            points.extend(tuple(c) for c in g.coords)
    return points


def conflict_points(world_or_lanes: World | Iterable[Lane]) -> tuple[ConflictPoint, ...]:
    """All crossing, merging and shared-start conflict points between distinct lanes.

    Touches where one lane ends exactly where the other starts are successions,
    not conflicts.  Output is sorted, so it does not depend on lane order.
    """
    if isinstance(world_or_lanes, World):
        lanes = list(world_or_lanes.lanes.values())
    else:
        lanes = list(world_or_lanes)
    lanes.sort(key=lambda lane: lane.id)
    found: dict[tuple[str, str, str, int, int], ConflictPoint] = {}
    for a, b in combinations(lanes, 2):
        for p in _line_intersections(a, b):
            a_start, a_end = _near(p, a.start), _near(p, a.end)
            b_start, b_end = _near(p, b.start), _near(p, b.end)
            if a_end and b_end:
                kind, p = "merging", a.end
            elif a_start and b_start:
                kind, p = "rear-end-shared-lane", a.start
            elif (a_end and b_start) or (a_start and b_end):
                continue
            else:
                kind = "crossing"
            key = (a.id, b.id, kind, round(p[0] / POINT_TOL), round(p[1] / POINT_TOL))
            if key not in found:
                pos = (round(p[0], 6) + 0.0, round(p[1], 6) + 0.0)
                found[key] = ConflictPoint(a.id, b.id, pos, kind)
    return tuple(sorted(found.values()))


# ---------------------------------------------------------------------------
# scenario construction


def _straight(p: Point, q: Point) -> tuple[Point, ...]:
    return (p, q)


def _highway_lanes(cfg: ScenarioConfig) -> dict[str, Lane]:
    g = cfg.geometry
    ids = [f"h{i}" for i in range(g.highway_lanes)]
    lanes = {}
    for i, lane_id in enumerate(ids):
        y = -i * g.lane_width
        lanes[lane_id] = Lane(
            lane_id,
            _straight((0.0, y), (g.highway_length, y)),
            g.lane_width,
            left=ids[i - 1] if i > 0 else None,
            right=ids[i + 1] if i + 1 < len(ids) else None,
        )
    return lanes


def _merge_lanes(cfg: ScenarioConfig) -> dict[str, Lane]:
    g = cfg.geometry
    w, xj, xl = g.lane_width, g.merge_junction_x, g.merge_length
    y1 = -w
    ramp_y = y1 - 3.0 * w
    ramp_start = max(xj - g.ramp_length, 0.0)
    taper = min(80.0, xj - ramp_start - 1.0)
    lanes = [
        Lane("m0a", _straight((0.0, 0.0), (xj, 0.0)), w, ("m0b",), right="m1a"),
        Lane("m0b", _straight((xj, 0.0), (xl, 0.0)), w, (), right="m1b"),
        Lane("m1a", _straight((0.0, y1), (xj, y1)), w, ("m1b",), left="m0a"),
        Lane("m1b", _straight((xj, y1), (xl, y1)), w, (), left="m0b"),
        Lane(
            "ramp",
            ((ramp_start, ramp_y), (xj - taper, ramp_y), (xj, y1)),
            w,
            ("m1b",),
            kind="merge-ramp",
        ),
    ]
    return {lane.id: lane for lane in lanes}


# travel headings of vehicles entering from each side
_APPROACHES = {"S": (0.0, 1.0), "E": (-1.0, 0.0), "N": (0.0, -1.0), "W": (1.0, 0.0)}


def _side_of(direction: tuple[float, float]) -> str:
    # the leg a vehicle leaves through, given its travel heading
    for side, (ux, uy) in _APPROACHES.items():
        if abs(ux + direction[0]) < 1e-9 and abs(uy + direction[1]) < 1e-9:
            return side
    raise AssertionError(direction)


def _arc(p0: Point, p1: Point, center: Point, radius: float, ccw: bool, n: int) -> tuple[Point, ...]:
    th0 = math.atan2(p0[1] - center[1], p0[0] - center[0])
    sweep = math.pi / 2 if ccw else -math.pi / 2
    pts = [p0]
    for k in range(1, n):
        th = th0 + sweep * k / n
        pts.append((center[0] + radius * math.cos(th), center[1] + radius * math.sin(th)))
    pts.append(p1)
    return tuple(pts)


def _intersection_lanes(cfg: ScenarioConfig) -> dict[str, Lane]:
    g = cfg.geometry
    w, box, leg = g.lane_width, g.box_half, g.leg_length
    half = w / 2.0
    lanes: dict[str, Lane] = {}

    def right_of(u):
        return (u[1], -u[0])

    def left_of(u):
        return (-u[1], u[0])

    def add(p, q, s):
        return (p[0] + s * q[0], p[1] + s * q[1])

    for side, u in _APPROACHES.items():
        r = right_of(u)
        entry = add(add((0.0, 0.0), u, -(box + leg)), r, half)
        stop = add(add((0.0, 0.0), u, -box), r, half)
        connectors = []
        for maneuver, u_out in (("straight", u), ("left", left_of(u)), ("right", right_of(u))):
            exit_side = _side_of(u_out)
            r_out = right_of(u_out)
            exit_start = add(add((0.0, 0.0), u_out, box), r_out, half)
            cid = f"c_{side}_{exit_side}"
            if maneuver == "straight":
                line = _straight(stop, exit_start)
            else:
                radius = box + half if maneuver == "left" else box - half
                normal = left_of(u) if maneuver == "left" else r
                center = add(stop, normal, radius)
                line = _arc(stop, exit_start, center, radius, maneuver == "left", g.arc_segments)
            lanes[cid] = Lane(cid, line, w, (f"out_{exit_side}",), kind="through", maneuver=maneuver)
            connectors.append(cid)
        lanes[f"in_{side}"] = Lane(
            f"in_{side}", _straight(entry, stop), w, tuple(connectors), kind="intersection-approach"
        )
        # exit leg heading away through this side: travel direction is -u
        u_exit = (-u[0], -u[1])
        r_exit = right_of(u_exit)
        out_start = add(add((0.0, 0.0), u_exit, box), r_exit, half)
        out_end = add(add((0.0, 0.0), u_exit, box + leg), r_exit, half)
        lanes[f"out_{side}"] = Lane(f"out_{side}", _straight(out_start, out_end), w, (), kind="intersection-exit")
    return dict(sorted(lanes.items()))


def build_lanes(cfg: ScenarioConfig) -> dict[str, Lane]:
    builders = {"highway": _highway_lanes, "merge": _merge_lanes, "intersection": _intersection_lanes}
    if cfg.kind not in builders:
        raise ConfigError(f"unknown scenario kind {cfg.kind!r}")
    return builders[cfg.kind](cfg)


def follow_route(lanes: Mapping[str, Lane], start: str) -> tuple[str, ...]:
    """Route from ``start`` following first successors (for single-successor chains)."""
    route = [start]
    while lanes[route[-1]].successors:
        nxt = lanes[route[-1]].successors[0]
        if nxt in route:
            break
        route.append(nxt)
    return tuple(route)


def _place(lanes, route, lane_id, s, v, vid, cfg, is_cav) -> VehicleState:
    lane = lanes[lane_id]
    x, y = lane.position(s)
    return VehicleState(
        id=vid,
        x=x,
        y=y,
        v=v,
        heading=lane.heading(s),
        lane_id=lane_id,
        route=route,
        length=cfg.vehicle.length,
        width=cfg.vehicle.width,
        is_cav=is_cav,
    )


class SpawnError(ConfigError):
    """The spawn layout cannot host all requested vehicles."""


def _sample_slots(rng, candidates, count, lo, hi, spacing, taken, attempts):
    """Draw ``count`` (lane, s) slots from ``candidates`` keeping ``spacing`` on each lane."""
    out = []
    for _ in range(count):
        for _attempt in range(attempts):
            lane_id = candidates[int(rng.integers(len(candidates)))]
            s = float(rng.uniform(lo, hi))
            if all(abs(s - t) >= spacing for t in taken.get(lane_id, [])):
                taken.setdefault(lane_id, []).append(s)
                out.append((lane_id, s))
                break
        else:
            raise SpawnError(f"could not place vehicle after {attempts} attempts; spawn layout too dense")
    return out


def build_scenario(kind: str, config: ScenarioConfig) -> World:
    """Lay out lanes and spawn ``cav_count`` CAVs and ``hdv_count`` HDVs deterministically from ``seed``."""
    if kind != config.kind:
        config = replace(config, kind=kind)
    lanes = build_lanes(config)
    rng = np.random.default_rng(config.seed)
    sp = config.spawn
    n_cav, n_hdv = config.cav_count, config.hdv_count
    vehicles: list[VehicleState] = []
    taken: dict[str, list[float]] = {}

    if kind == "highway":
        ids = [lid for lid in lanes]
        slots = _sample_slots(rng, ids, n_cav, *sp.cav_distance, sp.min_spacing, taken, sp.max_attempts)
        slots += _sample_slots(rng, ids, n_hdv, *sp.hdv_distance, sp.min_spacing, taken, sp.max_attempts)
        routes = {lid: (lid,) for lid in ids}
    elif kind == "merge":
        # CAVs alternate between the ramp and the main road so merges actually happen
        cycle = ["ramp", "m1a", "ramp", "m0a"]
        slots = []
        for i in range(n_cav):
            slots += _sample_slots(
                rng, [cycle[i % len(cycle)]], 1, *sp.cav_distance, sp.min_spacing, taken, sp.max_attempts
            )
        slots += _sample_slots(rng, ["m0a", "m1a"], n_hdv, *sp.hdv_distance, sp.min_spacing, taken, sp.max_attempts)
        routes = {lid: follow_route(lanes, lid) for lid in ("ramp", "m0a", "m1a")}
    else:
        sides = list(_APPROACHES)
        if n_cav > len(sides):
            raise SpawnError(f"intersection hosts at most {len(sides)} CAVs (one per approach)")
        order = [sides[i] for i in rng.permutation(len(sides))]
        leg = lanes["in_S"].length
        weights = np.asarray(sp.turn_weights, dtype=float)
        weights = weights / weights.sum()
        slots, routes_by_slot = [], []
        for i in range(n_cav + n_hdv):
            is_cav = i < n_cav
            side = order[i] if is_cav else sides[int(rng.integers(len(sides)))]
            lo, hi = sp.cav_distance if is_cav else sp.hdv_distance
            lane_id = f"in_{side}"
            placed = _sample_slots(rng, [lane_id], 1, leg - hi, leg - lo, sp.min_spacing, taken, sp.max_attempts)
            slots += placed
            maneuver = ("straight", "left", "right")[int(rng.choice(3, p=weights))]
            connector = next(c for c in lanes[lane_id].successors if lanes[c].maneuver == maneuver)
            routes_by_slot.append((lane_id, connector, lanes[connector].successors[0]))
        routes = None

    speeds = [float(rng.uniform(*sp.cav_speed)) for _ in range(n_cav)]
    speeds += [float(rng.uniform(*sp.hdv_speed)) for _ in range(n_hdv)]
    for i, (lane_id, s) in enumerate(slots):
        route = routes_by_slot[i] if routes is None else routes[lane_id]
        vehicles.append(_place(lanes, route, lane_id, s, speeds[i], i + 1, config, i < n_cav))

    world = World(
        lanes=lanes,
        vehicles={v.id: v for v in vehicles},
        cav_ids=frozenset(v.id for v in vehicles if v.is_cav),
        dt=config.dt,
        scenario_kind=kind,
        config=config,
    )
    _check_no_overlap(world)
    return world


def _check_no_overlap(world: World) -> None:
    from .metrics import footprints_overlap

    states = list(world.vehicles.values())
    for a, b in combinations(states, 2):
        if footprints_overlap(a, b):
            raise SpawnError(f"vehicles {a.id} and {b.id} overlap at spawn")


# ---------------------------------------------------------------------------
# clock


def settle_lane(world: World, state: VehicleState) -> VehicleState:
    """Advance ``lane_id`` along the route once the vehicle runs past the end of its lane."""
    lane_id = state.lane_id
    idx = state.route.index(lane_id)
    while idx + 1 < len(state.route):
        s, _ = world.lanes[lane_id].project(state.x, state.y)
        if s < world.lanes[lane_id].length:
            break
        idx += 1
        lane_id = state.route[idx]
    if lane_id != state.lane_id:
        state = replace(state, lane_id=lane_id)
    return state


def has_arrived(world: World, state: VehicleState) -> bool:
    if state.lane_id != state.route[-1]:
        return False
    s, _ = world.lanes[state.lane_id].project(state.x, state.y)
    return s >= world.lanes[state.lane_id].length


def max_step_displacement(world: World) -> float:
    cfg = world.config
    return cfg.vehicle.v_max * world.dt + 0.5 * cfg.idm.a_max * world.dt**2


def _check_displacement(world: World, items: list[VehicleState]) -> None:
    bound = max_step_displacement(world) + 1e-9
    for state in items:
        old = world.vehicles[state.id]
        jump = math.hypot(state.x - old.x, state.y - old.y)
        if jump > bound:
            raise ValueError(f"vehicle {state.id} moved {jump:.3f} m in one step (bound {bound:.3f} m)")


def advance_clock(world: World, joint_next_states: Mapping[int, VehicleState] | Iterable[VehicleState]) -> World:
    """Swap in every vehicle's next state at once, tick the clock and retire arrived vehicles."""
    if isinstance(joint_next_states, Mapping):
        items = list(joint_next_states.values())
    else:
        items = list(joint_next_states)
    ids = [s.id for s in items]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate vehicle id(s) in joint update: {dup}")
    missing = set(world.vehicles) - set(ids)
    extra = set(ids) - set(world.vehicles)
    if missing or extra:
        raise ValueError(f"joint update must cover the registry exactly (missing {sorted(missing)}, unknown {sorted(extra)})")

    if world.config is not None:
        _check_displacement(world, items)

    step = world.step + 1
    t = step * world.dt
    kept, arrivals = {}, list(world.arrivals)
    for state in sorted(items, key=lambda s: s.id):
        state = settle_lane(world, state)
        if has_arrived(world, state):
            arrivals.append((state.id, t))
        else:
            kept[state.id] = state
    return replace(world, vehicles=kept, step=step, arrivals=tuple(arrivals))
