"""Episode loop, seeded batches, traces and the metrics report."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import memory as mem
from .actions import MetaAction
from .behavior import follow_acceleration, hdv_policy
from .config import ScenarioConfig, config_to_dict, default_config
from .decision import (
    DecisionOutcome,
    action_to_reference,
    assemble_prompt,
    assess_action_safety,
    decide,
    lookahead_distance,
)
from .dynamics import VehicleState, bicycle_step, lateral_control, longitudinal_control
from .gateway import Backend, make_backend
from .metrics import CollisionEvent, TraceRow, collision_check, compute_pet, summarize, MetricsReport
from .negotiation import PassingOrder, Severity, coordinate, detect_conflicts, orders_for, render_orders
from .perception import Intent, classify, render_scene, share_intent
from .traffic import lane_path, path_neighbors, reference_heading
from .world import ConflictPoint, World, advance_clock, build_scenario

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Flags:
    negotiation: bool = True
    memory: bool = True
    shots: int = 2
    llm_coordinator: bool = False  # send rule verdicts to the backend for confirmation

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class HeldAction:
    action: MetaAction
    v_r: float
    target_lane: str
    fallback: bool = False


@dataclass
class Pending:
    """A decision awaiting its outcome at the end of the decision interval."""

    scene: str
    conflicts: str
    action: MetaAction
    worst: Severity
    step: int


@dataclass
class EpisodeState:
    world: World
    config: ScenarioConfig
    store: mem.MemoryStore
    backend: Backend
    flags: Flags = field(default_factory=Flags)
    held: dict[int, HeldAction] = field(default_factory=dict)
    pending: dict[int, Pending] = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list)
    prompts: list[dict] = field(default_factory=list)
    decisions: dict[int, dict] = field(default_factory=dict)  # per-step annotations for the trace
    collision: CollisionEvent | None = None


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def worst_severity(orders_or_pairs, vid: int) -> Severity:
    worst = Severity.NoDanger
    for item in orders_or_pairs:
        pair = getattr(item, "pair", item)
        if vid in pair.ids:
            worst = max(worst, pair.severity)
    return worst


# ---------------------------------------------------------------------------
# decision phase


def _intents(state: EpisodeState) -> dict[int, Intent]:
    world = state.world
    out = {}
    for vid in sorted(world.cav_ids & set(world.vehicles)):
        held = state.held.get(vid)
        if held is None:
            out[vid] = share_intent(world, vid)
        else:
            out[vid] = share_intent(world, vid, held.v_r, held.target_lane)
    return out


def _follow_lane(state: EpisodeState, ego: VehicleState) -> str:
    held = state.held.get(ego.id)
    if held is not None and held.target_lane != ego.lane_id and held.target_lane not in ego.route:
        return held.target_lane  # lane change still in progress
    return ego.lane_id


def decision_phase(state: EpisodeState) -> None:
    """Scene descriptions, centralized coordination, then one decision per CAV."""
    world, cfg, flags = state.world, state.config, state.flags
    cavs = [world.vehicles[v] for v in sorted(world.cav_ids & set(world.vehicles))]
    if not cavs:
        return
    intents = _intents(state)
    scenes = {}
    contexts = {}
    for ego in cavs:
        ctx, groups = classify(world, ego.id, L=cfg.perception.sensing_range)
        contexts[ego.id] = ctx
        scenes[ego.id] = render_scene(ego, ctx, groups, intents, cfg.idm.v_d).text

    pairs = detect_conflicts(world)
    orders: list[PassingOrder] = []
    if flags.negotiation:
        orders = coordinate(pairs, backend=state.backend if flags.llm_coordinator else None)

    jobs = []
    for ego in cavs:
        mine = orders_for(orders, ego.id)
        conflict_text = render_orders(mine, ego.id)
        memories = []
        if flags.memory and flags.shots > 0:
            memories = mem.retrieve(state.store, scenes[ego.id], conflict_text, flags.shots)
        ego_pairs = [p for p in pairs if ego.id in p.ids]
        follow = _follow_lane(state, ego)
        mask = assess_action_safety(world, ego, ego_pairs, cfg, contexts[ego.id], follow)
        bundle = assemble_prompt(
            scenes[ego.id], conflict_text, memories, mask, cfg.decision.dv_step, cfg.decision.prompt_budget
        )
        jobs.append((ego, mine, conflict_text, mask, bundle, follow, worst_severity(ego_pairs, ego.id)))

    b = cfg.backend

    def run(job) -> DecisionOutcome:
        return decide(job[4], state.backend, job[3], b.temperature, b.max_reply_tokens, b.timeout)

    if b.mode == "remote" and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            outcomes = list(pool.map(run, jobs))
    else:
        outcomes = [run(job) for job in jobs]

    # apply in ascending id order regardless of completion order
    for (ego, mine, conflict_text, mask, bundle, follow, worst), out in zip(jobs, outcomes):
        ref = action_to_reference(
            out.action, ego, world, contexts[ego.id], cfg.decision.dv_step, cfg.vehicle.v_max, cfg.control, follow
        )
        state.held[ego.id] = HeldAction(out.action, ref.v_r, ref.target_lane, out.fallback)
        state.pending[ego.id] = Pending(scenes[ego.id], conflict_text, out.action, worst, world.step)
        messages = [list(m) for m in bundle.messages()]
        state.decisions[ego.id] = {
            "orders": [[o.first, o.yielder, o.rule] for o in mine],
            "memory_ids": list(bundle.memory_ids),
            "prompt_hash": _hash(messages),
            "reply_hash": _hash(list(out.replies)),
        }
        state.prompts.append(
            {
                "t": round(world.time, 6),
                "id": ego.id,
                "messages": messages,
                "replies": list(out.replies),
                "action": out.action.name,
                "fallback": out.fallback,
                "error": out.error,
                "allowed": [a.name for a in mask.allowed],
                "removed": [[a.name, layer, reason] for a, layer, reason in mask.removed],
                "dropped_memories": bundle.dropped_memories,
            }
        )


# ---------------------------------------------------------------------------
# motion


def commit_lane(world: World, state: VehicleState, target: str) -> VehicleState:
    """Switch the vehicle to ``target`` once its centre lies inside that lane."""
    if target == state.lane_id or target in state.route:
        return state
    lane = world.lanes[target]
    s, lat = lane.project(state.x, state.y)
    if abs(lat) < 0.5 * lane.width and 0.0 <= s <= lane.length:
        return replace(state, lane_id=target, route=lane_path(world, state, target))
    return state


def cav_command(state: EpisodeState, ego: VehicleState) -> tuple[float, float, str]:
    world, cfg = state.world, state.config
    gains = cfg.control
    held = state.held.get(ego.id)
    v_r = ego.v if held is None else held.v_r
    target = _follow_lane(state, ego) if held is None else held.target_lane
    if target in ego.route:
        target = ego.lane_id
    a = longitudinal_control(v_r, ego.v, gains, cfg.idm.a_max)
    # following guard against the vehicle physically ahead on the driven path(s)
    guard_idm = replace(cfg.idm, v_d=cfg.vehicle.v_max)
    for lane_id in {ego.lane_id, target}:
        leader, _ = path_neighbors(world, ego, lane_id)
        if leader is not None:
            a = min(a, follow_acceleration(ego, leader, guard_idm, gains.a_brake_cap))
    phi_r = reference_heading(world, ego, target, lookahead_distance(ego.v, gains))
    delta = lateral_control(phi_r, ego.heading, ego.v, ego.length, gains)
    return a, delta, target


def motion_phase(state: EpisodeState) -> dict[int, VehicleState]:
    world, cfg = state.world, state.config
    nxt = {}
    for vid in sorted(world.vehicles):
        veh = world.vehicles[vid]
        if vid in world.cav_ids:
            a, delta, target = cav_command(state, veh)
        else:
            cmd = hdv_policy(world, vid, cfg.idm, cfg.mobil, cfg.control)
            a, delta, target = cmd.a, cmd.delta, cmd.lane_id
        moved = bicycle_step(veh, a, delta, world.dt)
        nxt[vid] = commit_lane(world, moved, target)
    return nxt


# ---------------------------------------------------------------------------
# memory phase


def memory_phase(state: EpisodeState, seed: int) -> None:
    """Judge each pending decision by how its worst conflict moved, and store it."""
    world = state.world
    pairs = detect_conflicts(world)
    for vid in sorted(state.pending):
        p = state.pending.pop(vid)
        now = worst_severity(pairs, vid) if vid in world.vehicles else Severity.NoDanger
        mem.augment(state.store, p.scene, p.conflicts, p.action, p.worst, now, (seed, p.step))


# ---------------------------------------------------------------------------
# steps and episodes


def _rows(state: EpisodeState) -> list[dict]:
    world = state.world
    rows = []
    for vid in sorted(world.vehicles):
        v = world.vehicles[vid]
        row = {
            "t": round(world.time, 6),
            "id": vid,
            "cav": vid in world.cav_ids,
            "lane": v.lane_id,
            "x": v.x,
            "y": v.y,
            "v": v.v,
            "heading": v.heading,
            "action": None,
            "fallback": False,
            "orders": [],
            "memory_ids": [],
            "prompt_hash": None,
            "reply_hash": None,
        }
        held = state.held.get(vid)
        if held is not None:
            row["action"] = held.action.name
            row["fallback"] = held.fallback
        if vid in state.decisions:
            row.update(state.decisions[vid])
        rows.append(row)
    return rows


def run_step(state: EpisodeState, seed: int = 0) -> World:
    """One tick: decide (on decision steps), move everybody, then evaluate memories."""
    world, cfg, flags = state.world, state.config, state.flags
    interval = cfg.harness.decision_interval
    state.decisions = {}
    if world.step % interval == 0:
        decision_phase(state)
    state.trace.extend(_rows(state))
    state.world = advance_clock(world, motion_phase(state))
    if flags.memory and state.world.step % interval == 0:
        memory_phase(state, seed)
    return state.world


@dataclass(frozen=True)
class EpisodeResult:
    scenario_kind: str
    seed: int
    success: bool
    collision: dict | None
    steps_run: int
    arrivals: dict[int, float]
    trace_path: str | None
    decisions: int = 0
    fallbacks: int = 0

    def __post_init__(self):
        if self.collision is not None and self.success:
            raise ValueError("an episode with a collision cannot succeed")

    def to_json(self) -> dict:
        d = asdict(self)
        d["arrivals"] = {str(k): v for k, v in sorted(self.arrivals.items())}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeResult":
        d = dict(d)
        d["arrivals"] = {int(k): v for k, v in d["arrivals"].items()}
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def run_episode(
    config: ScenarioConfig,
    backend: Backend | None = None,
    store: mem.MemoryStore | None = None,
    flags: Flags = Flags(),
) -> tuple[EpisodeResult, EpisodeState]:
    world = build_scenario(config.kind, config)
    backend = backend or make_backend(config.backend)
    store = store if store is not None else mem.MemoryStore(config.memory.dimension)
    state = EpisodeState(world, config, store, backend, flags)
    cav_ids = set(world.cav_ids)
    for _ in range(config.harness.step_budget):
        run_step(state, config.seed)
        event = collision_check(state.world, cav_only=True)
        if event is not None:
            state.collision = event
            break
        if cav_ids <= {vid for vid, _ in state.world.arrivals}:
            break
    state.decisions = {}
    state.trace.extend(_rows(state))
    arrivals = {vid: round(t, 6) for vid, t in state.world.arrivals}
    arrived_all = cav_ids <= set(arrivals)
    collision = None
    if state.collision is not None:
        c = state.collision
        collision = {"ids": list(c.ids), "time": round(c.time, 6), "position": list(c.position)}
    result = EpisodeResult(
        config.kind,
        config.seed,
        collision is None and arrived_all,
        collision,
        state.world.step,
        arrivals,
        None,
        len(state.prompts),
        sum(p["fallback"] for p in state.prompts),
    )
    return result, state


# ---------------------------------------------------------------------------
# batches


def _episode_paths(out: Path, seed: int) -> tuple[Path, Path, Path]:
    stem = f"seed_{seed:03d}"
    return out / f"{stem}.trace.jsonl", out / f"{stem}.prompts.jsonl", out / f"{stem}.result.json"


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tmp.replace(path)


def _points_json(world_points: Sequence[ConflictPoint]) -> list:
    return [[p.lane_a, p.lane_b, list(p.position), p.kind] for p in world_points]


def run_batch(
    kind: str,
    n_seeds: int,
    flags: Flags = Flags(),
    out_dir: str | Path | None = None,
    config: ScenarioConfig | None = None,
    backend: Backend | None = None,
    memory_db: str | Path | None = None,
) -> list[EpisodeResult]:
    """Run seeds 0..n_seeds-1; with ``out_dir``, seeds that already have a result are skipped."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    config = config or default_config(kind)
    if config.kind != kind:
        raise ValueError(f"config is for {config.kind!r}, not {kind!r}")
    backend = backend or make_backend(config.backend)
    if memory_db is not None and Path(memory_db).exists():
        store = mem.load(memory_db)
    else:
        store = mem.MemoryStore(config.memory.dimension)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        manifest = {"scenario": kind, "flags": flags.as_dict(), "config": config_to_dict(config)}
        manifest_p = out / "manifest.json"
        if manifest_p.exists():
            # resuming is only sound for the same batch definition
            old = json.loads(manifest_p.read_text())
            old.pop("n_seeds", None)
            if old != json.loads(json.dumps(manifest)):
                raise ValueError(f"{out} holds a batch with a different scenario, flags or config")
        manifest_p.write_text(json.dumps({**manifest, "n_seeds": n_seeds}, indent=2, sort_keys=True) + "\n")

    results = []
    for seed in range(n_seeds):
        if out is not None:
            trace_p, prompts_p, result_p = _episode_paths(out, seed)
            if result_p.exists():
                results.append(EpisodeResult.from_json(json.loads(result_p.read_text())))
                continue
        result, state = run_episode(config.with_seed(seed), backend, store, flags)
        if out is not None:
            _write_jsonl(trace_p, state.trace)
            _write_jsonl(prompts_p, state.prompts)
            result = replace(result, trace_path=trace_p.name)
            payload = result.to_json()
            payload["conflict_points"] = _points_json(state.world.conflict_points)
            payload["flags"] = flags.as_dict()
            result_p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
            if memory_db is not None:
                mem.persist(store, memory_db)
        results.append(result)
        log.info("%s seed %d: %s in %d steps", kind, seed, "success" if result.success else "failure", result.steps_run)
    return results


# ---------------------------------------------------------------------------
# report


def read_trace(path: str | Path) -> list[TraceRow]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            r = json.loads(line)
            rows.append(TraceRow(r["t"], r["id"], r["x"], r["y"], r["v"], r["cav"], r["lane"]))
    return rows


def report(in_dir: str | Path, pet_radius: float | None = None) -> MetricsReport:
    """Recompute the metrics of a batch directory from its result and trace files."""
    in_dir = Path(in_dir)
    if pet_radius is None:
        manifest = in_dir / "manifest.json"
        pet_radius = 5.0
        if manifest.exists():
            pet_radius = json.loads(manifest.read_text())["config"]["harness"]["pet_radius"]
    successes, pet_samples, episodes = [], [], []
    for result_p in sorted(in_dir.glob("seed_*.result.json")):
        res = json.loads(result_p.read_text())
        successes.append(bool(res["success"]))
        rows = read_trace(in_dir / res["trace_path"])
        episodes.append(rows)
        points = [ConflictPoint(a, b, tuple(pos), kind) for a, b, pos, kind in res["conflict_points"]]
        pet_samples.extend(compute_pet(rows, points, pet_radius))
    return summarize(successes, pet_samples, episodes)
