"""Run configuration: dataclasses for every tunable plus a strict TOML loader.

Every table in a config file maps onto one dataclass below.  Unknown tables
or keys raise :class:`ConfigError`; anything omitted keeps its default.  A few
defaults depend on the scenario kind (desired speed, speed cap, spawn layout)
and are filled in by :func:`default_config`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

SCENARIO_KINDS = ("highway", "merge", "intersection")


class ConfigError(ValueError):
    """Raised for malformed, unknown or inconsistent configuration."""


@dataclass(frozen=True)
class IdmParams:
    a_max: float = 3.0
    a_dd: float = 3.0
    v_d: float = 10.0
    delta: float = 4.0
    s0: float = 2.0
    T_g: float = 1.5

    def __post_init__(self):
        if self.a_max <= 0 or self.a_dd <= 0 or self.v_d <= 0 or self.delta <= 0:
            raise ConfigError("IDM a_max, a_dd, v_d and delta must be positive")
        if self.s0 < 0 or self.T_g < 0:
            raise ConfigError("IDM s0 and T_g must be non-negative")


@dataclass(frozen=True)
class MobilParams:
    p: float = 0.5
    a_th: float = 0.2
    b_safe: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("MOBIL politeness must lie in [0, 1]")
        if self.a_th < 0 or self.b_safe <= 0:
            raise ConfigError("MOBIL a_th must be >= 0 and b_safe > 0")


@dataclass(frozen=True)
class ControlGains:
    K_p: float = 1.0
    K_h: float = 4.0
    v_floor: float = 0.5
    a_brake_cap: float = 5.0
    lookahead_time: float = 0.3
    lookahead_min: float = 3.0

    def __post_init__(self):
        if self.K_p <= 0 or self.K_h <= 0:
            raise ConfigError("control gains must be positive")
        if self.v_floor <= 0 or self.a_brake_cap <= 0:
            raise ConfigError("v_floor and a_brake_cap must be positive")


@dataclass(frozen=True)
class GeometryConfig:
    lane_width: float = 4.0
    highway_lanes: int = 4
    highway_length: float = 520.0
    merge_length: float = 400.0
    merge_junction_x: float = 230.0
    ramp_length: float = 210.0
    leg_length: float = 100.0
    box_half: float = 10.0
    arc_segments: int = 12

    def __post_init__(self):
        if self.lane_width <= 0:
            raise ConfigError("lane_width must be positive")
        if self.highway_lanes < 1:
            raise ConfigError("highway needs at least one lane")
        if not 0 < self.merge_junction_x < self.merge_length:
            raise ConfigError("merge junction must lie inside the main road")
        if self.box_half <= self.lane_width / 2:
            raise ConfigError("intersection box must be wider than half a lane")


@dataclass(frozen=True)
class SpawnConfig:
    """Initial placement ranges.

    ``distance`` is measured from the start of the road for highway/merge and
    from the stop line (end of the approach leg) for the intersection.
    """

    cav_distance: tuple[float, float] = (30.0, 60.0)
    cav_speed: tuple[float, float] = (7.0, 9.0)
    hdv_distance: tuple[float, float] = (60.0, 90.0)
    hdv_speed: tuple[float, float] = (6.0, 9.0)
    min_spacing: float = 12.0
    turn_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    max_attempts: int = 200

    def __post_init__(self):
        for name in ("cav_distance", "cav_speed", "hdv_distance", "hdv_speed"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"spawn.{name} must be an ordered non-negative range")
        if self.min_spacing <= 0:
            raise ConfigError("spawn.min_spacing must be positive")
        if len(self.turn_weights) != 3 or sum(self.turn_weights) <= 0:
            raise ConfigError("spawn.turn_weights needs three weights (straight, left, right)")


@dataclass(frozen=True)
class VehicleConfig:
    length: float = 5.0
    width: float = 2.0
    v_max: float = 12.0

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0 or self.v_max <= 0:
            raise ConfigError("vehicle dimensions and v_max must be positive")


@dataclass(frozen=True)
class PerceptionConfig:
    sensing_range: float = 100.0


@dataclass(frozen=True)
class DecisionConfig:
    horizon: float = 3.0
    dv_step: float = 2.0
    sim_dt: float = 0.1
    prompt_budget: int = 12000

    def __post_init__(self):
        if self.horizon <= 0 or self.dv_step <= 0 or self.sim_dt <= 0:
            raise ConfigError("decision horizon, dv_step and sim_dt must be positive")


@dataclass(frozen=True)
class MemoryConfig:
    shots: int = 2
    dimension: int = 256

    def __post_init__(self):
        if self.shots < 0 or self.dimension < 1:
            raise ConfigError("memory.shots must be >= 0 and dimension >= 1")


@dataclass(frozen=True)
class HarnessConfig:
    step_budget: int = 600
    decision_interval: int = 5
    pet_radius: float = 5.0

    def __post_init__(self):
        if self.step_budget < 1 or self.decision_interval < 1:
            raise ConfigError("step_budget and decision_interval must be >= 1")


@dataclass(frozen=True)
class BackendConfig:
    mode: str = "stub-compliant"
    endpoint: str | None = None
    model: str = "gpt-4o-mini"
    credential_env: str = "CODRIVING_API_KEY"
    retry_budget: int = 2
    backoff: tuple[float, ...] = (0.5, 1.0)
    timeout: float = 30.0
    temperature: float = 0.0
    max_reply_tokens: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("remote", "stub-compliant", "stub-adversarial"):
            raise ConfigError(f"unknown backend mode {self.mode!r}")
        if self.mode == "remote" and not (self.endpoint and self.credential_env):
            raise ConfigError("remote backend needs an endpoint and a credential variable name")
        if self.retry_budget < 0 or self.timeout <= 0 or self.temperature < 0:
            raise ConfigError("invalid backend retry/timeout/temperature")


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "intersection"
    cav_count: int = 4
    hdv_count: int = 0
    seed: int = 0
    dt: float = 0.1
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    spawn: SpawnConfig = field(default_factory=SpawnConfig)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    idm: IdmParams = field(default_factory=IdmParams)
    mobil: MobilParams = field(default_factory=MobilParams)
    control: ControlGains = field(default_factory=ControlGains)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.cav_count < 0 or self.hdv_count < 0:
            raise ConfigError("vehicle counts must be non-negative")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return dataclasses.replace(self, seed=seed)


# Per-kind overrides applied on top of the dataclass defaults.
_KIND_DEFAULTS: dict[str, dict[str, dict[str, Any]]] = {
    "highway": {
        "scenario": {"hdv_count": 4},
        "idm": {"v_d": 25.0},
        "vehicle": {"v_max": 30.0},
        "spawn": {
            "cav_distance": (10.0, 120.0),
            "cav_speed": (21.0, 24.0),
            "hdv_distance": (10.0, 160.0),
            "hdv_speed": (21.0, 24.0),
            "min_spacing": 30.0,
        },
    },
    "merge": {
        "scenario": {"hdv_count": 2},
        "idm": {"v_d": 10.0},
        "vehicle": {"v_max": 12.0},
        "spawn": {
            "cav_distance": (20.0, 110.0),
            "cav_speed": (7.0, 9.0),
            "hdv_distance": (20.0, 140.0),
            "hdv_speed": (7.0, 9.0),
            "min_spacing": 15.0,
        },
    },
    "intersection": {
        "scenario": {"hdv_count": 0},
        "idm": {"v_d": 10.0},
        "vehicle": {"v_max": 12.0},
        "spawn": {},
    },
}

_SECTIONS = {
    "geometry": GeometryConfig,
    "spawn": SpawnConfig,
    "vehicle": VehicleConfig,
    "idm": IdmParams,
    "mobil": MobilParams,
    "control": ControlGains,
    "perception": PerceptionConfig,
    "decision": DecisionConfig,
    "memory": MemoryConfig,
    "harness": HarnessConfig,
    "backend": BackendConfig,
}
_SCENARIO_KEYS = ("kind", "cav_count", "hdv_count", "seed", "dt")


def _build_section(cls, values: dict[str, Any], where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    coerced = {}
    for key, value in values.items():
        if isinstance(known[key].default, tuple) and isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def default_config(kind: str = "intersection", **scenario_overrides: Any) -> ScenarioConfig:
    """Defaults for ``kind`` with optional top-level overrides (cav_count, seed, ...)."""
    return config_from_dict({"scenario": {"kind": kind, **scenario_overrides}})


def config_from_dict(data: dict[str, Any]) -> ScenarioConfig:
    data = dict(data)
    scenario = dict(data.pop("scenario", {}))
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown table(s): {', '.join(unknown)}")
    bad = sorted(set(scenario) - set(_SCENARIO_KEYS))
    if bad:
        raise ConfigError(f"unknown key(s) in [scenario]: {', '.join(bad)}")
    kind = scenario.get("kind", "intersection")
    if kind not in SCENARIO_KINDS:
        raise ConfigError(f"unknown scenario kind {kind!r}")

    kind_defaults = _KIND_DEFAULTS[kind]
    merged_scenario = {**kind_defaults.get("scenario", {}), **scenario}
    sections = {}
    for name, cls in _SECTIONS.items():
        values = {**kind_defaults.get(name, {}), **data.get(name, {})}
        sections[name] = _build_section(cls, values, name)
    try:
        return ScenarioConfig(**merged_scenario, **sections)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, kind: str | None = None) -> ScenarioConfig:
    """Parse a TOML scenario file.  ``kind`` (e.g. from the CLI) wins over the file."""
    with open(path, "rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if kind is not None:
        data.setdefault("scenario", {})["kind"] = kind
    return config_from_dict(data)


def config_to_dict(config: ScenarioConfig) -> dict[str, Any]:
    out: dict[str, Any] = {"scenario": {k: getattr(config, k) for k in _SCENARIO_KEYS}}
    for name in _SECTIONS:
        out[name] = dataclasses.asdict(getattr(config, name))
    return out
