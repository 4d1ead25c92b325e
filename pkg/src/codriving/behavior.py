"""HDV driver model: IDM along the current path, MOBIL for lane selection."""

from __future__ import annotations

import math
from typing import NamedTuple

from .config import ControlGains, IdmParams, MobilParams
from .dynamics import OverlapError, VehicleState, idm_acceleration, lateral_control, mobil_decide
from .traffic import Neighbor, bumper_gap, lateral_offset, path_neighbors, reference_heading
from .world import World

# a new lane change is only considered once the previous one has settled
SETTLED_OFFSET = 0.5


class HdvCommand(NamedTuple):
    a: float
    delta: float
    lane_id: str


def follow_acceleration(
    follower: VehicleState, leader: Neighbor | None, idm: IdmParams, a_brake_cap: float
) -> float:
    """IDM acceleration of ``follower`` behind ``leader`` (None means free road).

    Overlapping vehicles get the full braking cap instead of an error: the
    collision itself is reported by the harness.
    """
    if leader is None:
        return idm_acceleration(math.inf, follower.v, 0.0, idm, a_brake_cap)
    gap = bumper_gap(follower, leader)
    try:
        return idm_acceleration(gap, follower.v, follower.v - leader.state.v, idm, a_brake_cap)
    except OverlapError:
        return -a_brake_cap


def _as_leader(ego: VehicleState, of: VehicleState, world: World) -> Neighbor:
    """``ego`` seen from ``of`` as a leader, using the longitudinal offset along ego's lane."""
    lane = world.lanes[ego.lane_id]
    s_ego, _ = lane.project(ego.x, ego.y)
    s_of, _ = lane.project(of.x, of.y)
    return Neighbor(ego, s_ego - s_of)


def mobil_target(world: World, hdv: VehicleState, idm: IdmParams, mobil: MobilParams, a_brake_cap: float) -> str:
    """Lane the HDV should drive in: an adjacent lane accepted by MOBIL, else its own."""
    lane = world.lanes[hdv.lane_id]
    if abs(lateral_offset(world, hdv)) > SETTLED_OFFSET:
        return hdv.lane_id
    leader, follower = path_neighbors(world, hdv)
    a_c = follow_acceleration(hdv, leader, idm, a_brake_cap)
    if follower is not None:
        a_o = follow_acceleration(follower.state, _as_leader(hdv, follower.state, world), idm, a_brake_cap)
        old_leader = None if leader is None else Neighbor(leader.state, leader.distance - follower.distance)
        a_o_after = follow_acceleration(follower.state, old_leader, idm, a_brake_cap)
        old_pair = (a_o_after, a_o)
    else:
        old_pair = (0.0, 0.0)

    best, best_gain = hdv.lane_id, -math.inf
    for target in (lane.left, lane.right):
        if target is None:
            continue
        new_leader, new_follower = path_neighbors(world, hdv, target)
        if new_leader is not None and bumper_gap(hdv, new_leader) <= 0:
            continue
        if new_follower is not None and bumper_gap(hdv, new_follower) <= 0:
            continue
        a_c_after = follow_acceleration(hdv, new_leader, idm, a_brake_cap)
        if new_follower is not None:
            nf = new_follower.state
            lead_of_nf = None if new_leader is None else Neighbor(new_leader.state, new_leader.distance - new_follower.distance)
            a_n = follow_acceleration(nf, lead_of_nf, idm, a_brake_cap)
            a_n_after = follow_acceleration(nf, Neighbor(hdv, -new_follower.distance), idm, a_brake_cap)
            new_pair = (a_n_after, a_n)
        else:
            new_pair = (0.0, 0.0)
        gain = a_c_after - a_c
        if mobil_decide(gain, new_pair, old_pair, mobil) and gain > best_gain:
            best, best_gain = target, gain
    return best


def hdv_policy(
    world: World,
    hdv_id: int,
    idm: IdmParams,
    mobil: MobilParams,
    gains: ControlGains | None = None,
) -> HdvCommand:
    """Acceleration, steering and lane for one HDV at this snapshot."""
    hdv = world.vehicles[hdv_id]
    if hdv_id in world.cav_ids:
        raise ValueError(f"vehicle {hdv_id} is a CAV")
    gains = gains or (world.config.control if world.config else ControlGains())
    target = mobil_target(world, hdv, idm, mobil, gains.a_brake_cap)
    leader, _ = path_neighbors(world, hdv)
    if target != hdv.lane_id:
        # keep a safe distance to whoever is ahead in either lane while changing
        new_leader, _ = path_neighbors(world, hdv, target)
        a = min(
            follow_acceleration(hdv, leader, idm, gains.a_brake_cap),
            follow_acceleration(hdv, new_leader, idm, gains.a_brake_cap),
        )
    else:
        a = follow_acceleration(hdv, leader, idm, gains.a_brake_cap)
    lookahead = max(gains.lookahead_min, gains.lookahead_time * hdv.v)
    phi_r = reference_heading(world, hdv, target, lookahead)
    delta = lateral_control(phi_r, hdv.heading, hdv.v, hdv.length, gains)
    return HdvCommand(a, delta, target)
