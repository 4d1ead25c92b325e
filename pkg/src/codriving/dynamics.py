"""Vehicle state and the pure control/kinematics kernels.

HDVs use IDM for longitudinal and MOBIL for lateral decisions; CAV meta-actions
are executed through proportional speed/heading control feeding a kinematic
bicycle model integrated with forward Euler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .config import ControlGains, IdmParams, MobilParams


@dataclass(frozen=True)
class VehicleState:
    id: int
    x: float
    y: float
    v: float
    heading: float
    lane_id: str
    route: tuple[str, ...]
    length: float = 5.0
    width: float = 2.0
    is_cav: bool = False

    def __post_init__(self):
        if self.v < 0:
            raise ValueError(f"vehicle {self.id}: negative speed {self.v}")
        if self.length <= 0:
            raise ValueError(f"vehicle {self.id}: length must be positive")
        if self.lane_id not in self.route:
            raise ValueError(f"vehicle {self.id}: lane {self.lane_id!r} not on route {self.route}")

    @property
    def vx(self) -> float:
        return self.v * math.cos(self.heading)

    @property
    def vy(self) -> float:
        return self.v * math.sin(self.heading)

    def features(self) -> tuple[float, float, float, float, float, float]:
        """Observation feature row (x, y, vx, vy, cos heading, sin heading)."""
        return (self.x, self.y, self.vx, self.vy, math.cos(self.heading), math.sin(self.heading))


class OverlapError(ValueError):
    """A non-positive bumper gap was fed to IDM: the vehicles already overlap."""


def idm_acceleration(s: float, v: float, dv: float, params: IdmParams, a_brake_cap: float = math.inf) -> float:
    """IDM acceleration for gap ``s``, speed ``v`` and approach rate ``dv = v - v_leader``.

    Pass ``s=math.inf`` (and ``dv=0``) when there is no leader.
    """
    if s <= 0:
        raise OverlapError(f"gap {s} <= 0")
    free = 1.0 - (v / params.v_d) ** params.delta
    interaction = 0.0 if math.isinf(s) else (desired_gap(v, dv, params) / s) ** 2
    a = params.a_max * (free - interaction)
    return min(max(a, -a_brake_cap), params.a_max)


def desired_gap(v: float, dv: float, params: IdmParams) -> float:
    return params.s0 + v * params.T_g + v * dv / (2.0 * math.sqrt(params.a_max * params.a_dd))


def mobil_decide(
    ego_gain: float,
    new_follower: tuple[float, float],
    old_follower: tuple[float, float],
    params: MobilParams,
) -> bool:
    """True when a lane change is both safe and worth it.

    ``new_follower`` and ``old_follower`` are ``(after, before)`` acceleration
    pairs; ``ego_gain`` is the ego's own after-minus-before acceleration.
    """
    new_after, new_before = new_follower
    old_after, old_before = old_follower
    if new_after < -params.b_safe:
        return False
    incentive = ego_gain + params.p * ((new_after - new_before) + (old_after - old_before))
    return incentive >= params.a_th


def longitudinal_control(v_r: float, v: float, gains: ControlGains, a_max: float) -> float:
    return min(max(gains.K_p * (v_r - v), -gains.a_brake_cap), a_max)


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped == -math.pi:
        return math.pi
    return wrapped


def lateral_control(phi_r: float, phi: float, v: float, length: float, gains: ControlGains) -> float:
    """Front-wheel angle steering the heading toward ``phi_r``."""
    err = wrap_angle(phi_r - phi)
    arg = gains.K_h * err * length / (2.0 * max(v, gains.v_floor))
    return math.asin(min(max(arg, -1.0), 1.0))


def bicycle_step(state: VehicleState, a: float, delta: float, dt: float) -> VehicleState:
    """One forward-Euler step of the kinematic bicycle model."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    beta = math.atan(0.5 * math.tan(delta))
    v, phi = state.v, state.heading
    x = state.x + v * math.cos(phi + beta) * dt
    y = state.y + v * math.sin(phi + beta) * dt
    heading = wrap_angle(phi + (v / state.length) * math.sin(beta) * dt)
    v_next = max(v + a * dt, 0.0)
    return replace(state, x=x, y=y, v=v_next, heading=heading)
