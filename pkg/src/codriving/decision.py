"""Three-layer action masking, prompt assembly, backend decision and reference mapping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import httpx

from . import templates
from .actions import ALL_ACTIONS, SAFETY_PREFERENCE, MetaAction, parse_decision
from .config import ControlGains, ScenarioConfig
from .dynamics import OverlapError, VehicleState, idm_acceleration, longitudinal_control
from .gateway import Backend, BackendUnavailable, ChatRequest, ProtocolError
from .negotiation import ConflictPair, Severity, band
from .perception import LaneContext
from .traffic import bumper_gap, lateral_offset, path_neighbors, reference_heading
from .world import World

log = logging.getLogger(__name__)

LAYERS = ("SameLane", "AdjacentLane", "ConflictLane")
# a lane change may only start from a settled position
SETTLED_OFFSET = 0.5


@dataclass(frozen=True)
class ActionMask:
    allowed: tuple[MetaAction, ...]
    removed: tuple[tuple[MetaAction, str, str], ...] = ()  # (action, layer, reason)
    notes: tuple[tuple[MetaAction, str], ...] = ()

    def __post_init__(self):
        if not self.allowed:
            raise ValueError("an action mask must allow at least one action")
        names = set(self.allowed) | {a for a, _, _ in self.removed}
        if names != set(ALL_ACTIONS) or len(self.allowed) + len(self.removed) != len(ALL_ACTIONS):
            raise ValueError("allowed and removed actions must partition the action set")

    def __contains__(self, action: MetaAction) -> bool:
        return action in self.allowed

    def note(self, action: MetaAction) -> str:
        return dict(self.notes).get(action, "no conflict affected")

    @classmethod
    def full(cls) -> "ActionMask":
        return cls(ALL_ACTIONS)


# ---------------------------------------------------------------------------
# reference mapping


@dataclass(frozen=True)
class Reference:
    v_r: float
    phi_r: float
    target_lane: str


def target_speed(action: MetaAction, v: float, dv_step: float, v_max: float) -> float:
    if action is MetaAction.SpeedUp:
        return min(v + dv_step, v_max)
    if action is MetaAction.SlowDown:
        return min(max(v - dv_step, 0.0), v_max)
    return min(v, v_max)


def target_lane_of(action: MetaAction, ego: VehicleState, lane_ctx: LaneContext, follow_lane: str | None = None) -> str:
    if action is MetaAction.ChangeLeft:
        lane = lane_ctx.left
    elif action is MetaAction.ChangeRight:
        lane = lane_ctx.right
    else:
        return follow_lane or ego.lane_id
    if lane is None:
        raise ValueError(f"vehicle {ego.id} has no lane for {action.value}")
    return lane


def lookahead_distance(v: float, gains: ControlGains) -> float:
    return max(gains.lookahead_min, gains.lookahead_time * v)


def action_to_reference(
    action: MetaAction,
    ego: VehicleState,
    world: World,
    lane_ctx: LaneContext,
    dv_step: float,
    v_max: float,
    gains: ControlGains | None = None,
    follow_lane: str | None = None,
) -> Reference:
    """(v_r, φ_r) for ``action``; φ_r points at a lookahead point on the target lane."""
    gains = gains or ControlGains()
    lane = target_lane_of(action, ego, lane_ctx, follow_lane)
    phi = reference_heading(world, ego, lane, lookahead_distance(ego.v, gains))
    return Reference(target_speed(action, ego.v, dv_step, v_max), phi, lane)


# ---------------------------------------------------------------------------
# masking


def speed_profile(v0: float, v_r: float, gains: ControlGains, a_max: float, horizon: float, dt: float):
    """Speeds and travelled distances at t = 0, dt, ..., horizon under the speed controller."""
    n = int(round(horizon / dt))
    v, s = v0, 0.0
    vs, ss = [v], [s]
    for _ in range(n):
        a = longitudinal_control(v_r, v, gains, a_max)
        s += v * dt
        v = max(v + a * dt, 0.0)
        vs.append(v)
        ss.append(s)
    return vs, ss


def arrival_time(d: float, vs: Sequence[float], ss: Sequence[float], dt: float) -> float:
    """When a profile covers ``d`` metres, extrapolating at the final speed past the horizon."""
    if d <= 0:
        return 0.0
    for k in range(1, len(ss)):
        if ss[k] >= d:
            # linear interpolation inside the step
            frac = (d - ss[k - 1]) / (ss[k] - ss[k - 1])
            return (k - 1 + frac) * dt
    t_h = (len(ss) - 1) * dt
    v_h = vs[-1]
    if v_h <= 0:
        return math.inf
    return t_h + (d - ss[-1]) / v_h


def _other_time(d: float, v: float) -> float:
    if d <= 0:
        return 0.0
    return math.inf if v <= 0 else d / v


def _ego_side(pair: ConflictPair, ego_id: int) -> tuple[float, float, float]:
    """(ego distance, other distance, other speed) for a pair involving ego."""
    if pair.vehicle_i == ego_id:
        return pair.d_i, pair.d_j, pair.v_j
    return pair.d_j, pair.d_i, pair.v_i


def projected_severity(pairs: Sequence[ConflictPair], ego_id: int, vs, ss, dt: float) -> Severity:
    worst = Severity.NoDanger
    for pair in pairs:
        if pair.kind == "rear-end-shared-lane" or ego_id not in pair.ids:
            continue
        d_e, d_o, v_o = _ego_side(pair, ego_id)
        t_e, t_o = arrival_time(d_e, vs, ss, dt), _other_time(d_o, v_o)
        if math.isinf(t_e) or math.isinf(t_o):
            continue
        worst = max(worst, band(abs(t_e - t_o)))
    return worst


def _safe_idm(gap: float, v: float, dv: float, idm, cap: float) -> float:
    try:
        return idm_acceleration(gap, v, dv, idm, cap)
    except OverlapError:
        return -math.inf


def assess_action_safety(
    world: World,
    ego: VehicleState,
    pairs: Sequence[ConflictPair],
    config: ScenarioConfig,
    lane_ctx: LaneContext | None = None,
    follow_lane: str | None = None,
) -> ActionMask:
    """Remove unsafe actions in three layers: same lane, adjacent lane, conflict lanes."""
    idm, mobil, gains = config.idm, config.mobil, config.control
    horizon, dt = config.decision.horizon, config.decision.sim_dt
    dv, v_max = config.decision.dv_step, config.vehicle.v_max
    a_max = idm.a_max
    lane = world.lanes[ego.lane_id]
    lane_ctx = lane_ctx or LaneContext(ego.lane_id, lane.left, lane.right, ())

    profiles = {a: speed_profile(ego.v, target_speed(a, ego.v, dv, v_max), gains, a_max, horizon, dt) for a in ALL_ACTIONS}
    removed: list[tuple[MetaAction, str, str]] = []
    alive = list(ALL_ACTIONS)

    def drop(action, layer, reason):
        alive.remove(action)
        removed.append((action, layer, reason))

    # layer 1: leader and rear vehicle on ego's own path, both at constant speed
    leader, rear = path_neighbors(world, ego)
    for action in list(alive):
        vs, ss = profiles[action]
        if leader is not None:
            gap0 = bumper_gap(ego, leader)
            gaps = [gap0 + leader.state.v * k * dt - ss[k] for k in range(1, len(ss))]
            if min(gaps) < idm.s0:
                drop(action, "SameLane", f"gap to leading vehicle {leader.id} falls below {idm.s0:.1f} m")
                continue
        if rear is not None and target_speed(action, ego.v, dv, v_max) < ego.v:
            gap0 = bumper_gap(ego, rear)
            v_b = rear.state.v
            worst = min(
                _safe_idm(gap0 + ss[k] - v_b * k * dt, v_b, v_b - vs[k], idm, math.inf) for k in range(1, len(ss))
            )
            if worst < -mobil.b_safe:
                drop(action, "SameLane", f"rearing vehicle {rear.id} would brake harder than {mobil.b_safe:.1f} m/s2")

    # layer 2: lane changes need a lane, a settled start and safe gaps in the target lane
    changing = (follow_lane not in (None, ego.lane_id)) or abs(lateral_offset(world, ego)) > SETTLED_OFFSET
    for action, target in ((MetaAction.ChangeLeft, lane_ctx.left), (MetaAction.ChangeRight, lane_ctx.right)):
        if action not in alive:
            continue
        if target is None:
            drop(action, "AdjacentLane", "no such lane")
            continue
        if changing:
            drop(action, "AdjacentLane", "a lane change is already in progress")
            continue
        new_leader, new_follower = path_neighbors(world, ego, target)
        if new_leader is not None:
            gap = bumper_gap(ego, new_leader)
            a_ego = _safe_idm(gap, ego.v, ego.v - new_leader.state.v, idm, math.inf)
            if gap < idm.s0 or a_ego < -mobil.b_safe:
                drop(action, "AdjacentLane", f"gap to vehicle {new_leader.id} in lane {target} is too small")
                continue
        if new_follower is not None:
            nf = new_follower.state
            gap = bumper_gap(ego, new_follower)
            a_nf = _safe_idm(gap, nf.v, nf.v - ego.v, idm, math.inf)
            if a_nf < -mobil.b_safe:
                drop(action, "AdjacentLane", f"vehicle {nf.id} in lane {target} would brake harder than {mobil.b_safe:.1f} m/s2")

    # layer 3: an action may not push the worst conflict into serious/general danger
    # when another remaining action does better
    worst = {a: projected_severity(pairs, ego.id, *profiles[a], dt) for a in alive}
    notes = tuple((a, f"worst conflict after {horizon:.0f} s: {worst[a].label}") for a in alive)
    if worst:
        best = min(worst.values())
        for action in list(alive):
            if worst[action] >= Severity.GeneralDanger and worst[action] > best:
                drop(action, "ConflictLane", f"conflict would reach {worst[action].label} (best option: {best.label})")

    if not alive:
        removed = [r for r in removed if r[0] is not MetaAction.SlowDown]
        alive = [MetaAction.SlowDown]
    allowed = tuple(a for a in ALL_ACTIONS if a in alive)
    order = {a: i for i, a in enumerate(ALL_ACTIONS)}
    return ActionMask(allowed, tuple(sorted(removed, key=lambda r: order[r[0]])), notes)


# ---------------------------------------------------------------------------
# prompt


def mask_text(mask: ActionMask) -> str:
    lines = [f"- {a.value}: {mask.note(a)}" for a in mask.allowed]
    if mask.removed:
        gone = "; ".join(f"{a.value} ({layer}: {reason})" for a, layer, reason in mask.removed)
        lines.append(f"Removed for safety: {gone}.")
    return "\n".join(lines)


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    scene: str
    conflict_text: str
    memories: tuple[str, ...]
    mask_text: str
    output_contract: str
    memory_ids: tuple[int, ...] = ()
    dropped_memories: int = 0

    def user_text(self) -> str:
        memories = "\n\n".join(self.memories) if self.memories else templates.NO_MEMORY
        parts = [
            (templates.SECTION_SCENE, self.scene),
            (templates.SECTION_NEGOTIATION, self.conflict_text),
            (templates.SECTION_MEMORIES, memories),
            (templates.SECTION_ACTIONS, self.mask_text),
            (templates.SECTION_OUTPUT, self.output_contract),
        ]
        return "\n\n".join(f"{head}\n{body}" for head, body in parts)

    def messages(self) -> tuple[tuple[str, str], ...]:
        return (("system", self.system_text), ("user", self.user_text()))

    def __len__(self) -> int:
        return len(self.system_text) + len(self.user_text())


def assemble_prompt(
    scene: str,
    conflict_text: str,
    memories: Sequence = (),
    mask: ActionMask | None = None,
    dv_step: float = 2.0,
    budget: int | None = None,
) -> PromptBundle:
    """Build the prompt; memories arrive most-similar first and the trailing ones go first on overflow.

    ``memories`` may hold MemoryRecord objects or plain texts.
    """
    mask = mask or ActionMask.full()
    texts = tuple(m if isinstance(m, str) else m.to_text() for m in memories)
    ids = tuple(getattr(m, "id", -1) for m in memories)
    contract = templates.OUTPUT_CONTRACT.format(actions=", ".join(a.value for a in mask.allowed))
    bundle = PromptBundle(
        templates.SYSTEM_TEXT.format(dv_step=dv_step), scene, conflict_text, texts, mask_text(mask), contract, ids
    )
    if budget is not None:
        while len(bundle) > budget and bundle.memories:
            bundle = replace(
                bundle,
                memories=bundle.memories[:-1],
                memory_ids=bundle.memory_ids[:-1],
                dropped_memories=bundle.dropped_memories + 1,
            )
    return bundle


# ---------------------------------------------------------------------------
# decision


@dataclass(frozen=True)
class DecisionOutcome:
    action: MetaAction
    fallback: bool
    replies: tuple[str, ...] = ()
    error: str | None = None


def safest_allowed(mask: ActionMask) -> MetaAction:
    return next(a for a in SAFETY_PREFERENCE if a in mask.allowed)


TRANSPORT_ERRORS = (BackendUnavailable, ProtocolError, httpx.HTTPError, OSError, TimeoutError)


def decide(
    bundle: PromptBundle,
    backend: Backend,
    mask: ActionMask,
    temperature: float = 0.0,
    max_reply_tokens: int = 200,
    timeout: float = 30.0,
) -> DecisionOutcome:
    """Ask the backend once, re-prompt once on an unparsable reply, else fall back.

    The returned action is always in ``mask.allowed``.
    """
    kw = dict(temperature=temperature, max_reply_tokens=max_reply_tokens, timeout=timeout)
    messages = bundle.messages()
    replies: list[str] = []
    try:
        reply = backend.chat(ChatRequest(messages, **kw))
        replies.append(reply)
        action = parse_decision(reply)
        if action is None:
            reprompt = templates.REPROMPT.format(actions=", ".join(a.value for a in mask.allowed))
            messages = messages + (("assistant", reply), ("user", reprompt))
            reply = backend.chat(ChatRequest(messages, **kw))
            replies.append(reply)
            action = parse_decision(reply)
    except TRANSPORT_ERRORS as exc:
        log.warning("backend failed, falling back: %s", exc)
        return DecisionOutcome(safest_allowed(mask), True, tuple(replies), f"{type(exc).__name__}: {exc}")
    if action is None:
        return DecisionOutcome(safest_allowed(mask), True, tuple(replies), "unparsable reply")
    if action not in mask.allowed:
        return DecisionOutcome(safest_allowed(mask), True, tuple(replies), f"{action.value} is masked")
    return DecisionOutcome(action, False, tuple(replies))
