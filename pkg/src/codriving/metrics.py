"""Collision detection, post-encroachment time and travel velocity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .dynamics import VehicleState
from .world import ConflictPoint, World

# PET values are reported at microsecond resolution so that times built from
# step * dt compare exactly against hand-written fixtures
PET_DECIMALS = 6


def footprint(state: VehicleState) -> np.ndarray:
    """Corners of the vehicle rectangle, counter-clockwise, shape (4, 2)."""
    c, s = math.cos(state.heading), math.sin(state.heading)
    hl, hw = 0.5 * state.length, 0.5 * state.width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([state.x, state.y])


def _axes(corners: np.ndarray) -> np.ndarray:
    edges = np.roll(corners, -1, axis=0) - corners
    return np.stack([-edges[:2, 1], edges[:2, 0]], axis=1)


def footprints_overlap(a: VehicleState, b: VehicleState, eps: float = 1e-9) -> bool:
    """Separating-axis test on the two rectangles; touching edges do not count."""
    if math.hypot(a.x - b.x, a.y - b.y) > 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width)):
        return False
    pa, pb = footprint(a), footprint(b)
    for axis in np.vstack([_axes(pa), _axes(pb)]):
        qa, qb = pa @ axis, pb @ axis
        if qa.max() <= qb.min() + eps or qb.max() <= qa.min() + eps:
            return False
    return True


@dataclass(frozen=True)
class CollisionEvent:
    ids: tuple[int, int]
    time: float
    position: tuple[float, float]


def collision_check(world: World, cav_only: bool = False) -> CollisionEvent | None:
    """First overlapping pair in ascending id order, optionally only pairs involving a CAV."""
    states = sorted(world.vehicles.values(), key=lambda s: s.id)
    for a, b in combinations(states, 2):
        if cav_only and a.id not in world.cav_ids and b.id not in world.cav_ids:
            continue
        if footprints_overlap(a, b):
            mid = (0.5 * (a.x + b.x), 0.5 * (a.y + b.y))
            return CollisionEvent((a.id, b.id), world.time, mid)
    return None


# ---------------------------------------------------------------------------
# trajectory metrics


@dataclass(frozen=True)
class TraceRow:
    t: float
    id: int
    x: float
    y: float
    v: float
    is_cav: bool = True
    lane_id: str | None = None


@dataclass(frozen=True)
class Traversal:
    vehicle: int
    entry: float
    exit: float
    lane_id: str | None
    is_cav: bool


@dataclass(frozen=True)
class PetSample:
    point: ConflictPoint
    first: int
    second: int
    value: float


def disk_traversals(rows: Iterable[TraceRow], center: tuple[float, float], radius: float) -> list[Traversal]:
    """Maximal runs of consecutive in-disk samples per vehicle.

    Entry is the first in-disk sample time and exit the last one; the lane
    recorded is the vehicle's lane at entry.
    """
    by_vehicle: dict[int, list[TraceRow]] = {}
    for row in rows:
        by_vehicle.setdefault(row.id, []).append(row)
    out = []
    for vid in sorted(by_vehicle):
        seq = sorted(by_vehicle[vid], key=lambda r: r.t)
        run = None
        for row in seq:
            inside = math.hypot(row.x - center[0], row.y - center[1]) <= radius
            if inside and run is None:
                run = [row, row]
            elif inside:
                run[1] = row
            elif run is not None:
                out.append(Traversal(vid, run[0].t, run[1].t, run[0].lane_id, run[0].is_cav))
                run = None
        if run is not None:
            out.append(Traversal(vid, run[0].t, run[1].t, run[0].lane_id, run[0].is_cav))
    return out


def compute_pet(
    rows: Sequence[TraceRow], conflict_points: Iterable[ConflictPoint], radius: float
) -> list[PetSample]:
    """PET samples for one episode over crossing and merging points.

    A sample is taken for every ordered pair of traversals by different
    vehicles, at least one a CAV, where the second enters after the first
    has left.  Pairs that enter on the same lane are successive followers,
    not conflicting movements, and are skipped when lanes are known.
    """
    samples = []
    for point in conflict_points:
        if point.kind == "rear-end-shared-lane":
            continue
        trav = disk_traversals(rows, point.position, radius)
        for a in trav:
            for b in trav:
                if a.vehicle == b.vehicle or not (a.is_cav or b.is_cav):
                    continue
                if a.lane_id is not None and a.lane_id == b.lane_id:
                    continue
                gap = round(b.entry - a.exit, PET_DECIMALS)
                if gap > 0:
                    samples.append(PetSample(point, a.vehicle, b.vehicle, gap))
    return samples


@dataclass(frozen=True)
class Triple:
    average: float
    max: float
    min: float

    def __post_init__(self):
        if not (self.min <= self.average + 1e-12 and self.average <= self.max + 1e-12):
            raise ValueError(f"inconsistent triple {self}")

    def as_dict(self) -> dict:
        return {"average": self.average, "max": self.max, "min": self.min}


def pet_triple(samples: Iterable[PetSample | float]) -> Triple | None:
    values = [s.value if isinstance(s, PetSample) else float(s) for s in samples]
    if not values:
        return None
    return Triple(sum(values) / len(values), max(values), min(values))


def episode_mean_speed(rows: Iterable[TraceRow]) -> tuple[float, int] | None:
    """Mean CAV speed over an episode and the number of CAV samples behind it."""
    speeds = [r.v for r in rows if r.is_cav]
    if not speeds:
        return None
    return sum(speeds) / len(speeds), len(speeds)


def compute_velocity(episodes: Sequence[Sequence[TraceRow]]) -> Triple | None:
    """Average over all CAV samples pooled (uniform dt makes this time-weighted); max/min over episode means."""
    means = [m for m in (episode_mean_speed(ep) for ep in episodes) if m is not None]
    if not means:
        return None
    total = sum(mean * n for mean, n in means)
    count = sum(n for _, n in means)
    per_episode = [mean for mean, _ in means]
    return Triple(total / count, max(per_episode), min(per_episode))


@dataclass(frozen=True)
class MetricsReport:
    episodes: int
    success_rate: float
    pet: Triple | None
    pet_samples: int
    travel_velocity: Triple | None

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success rate must lie in [0, 1]")

    def as_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "success_rate": self.success_rate,
            "pet": None if self.pet is None else self.pet.as_dict(),
            "pet_samples": self.pet_samples,
            "pet_empty": self.pet is None,
            "travel_velocity": None if self.travel_velocity is None else self.travel_velocity.as_dict(),
        }

    def to_text(self) -> str:
        def fmt(t: Triple | None) -> str:
            return "n/a" if t is None else f"avg {t.average:.2f}  max {t.max:.2f}  min {t.min:.2f}"

        return "\n".join(
            [
                f"episodes         {self.episodes}",
                f"success rate     {100 * self.success_rate:.1f}%",
                f"PET (s)          {fmt(self.pet)}  [{self.pet_samples} samples]",
                f"velocity (m/s)   {fmt(self.travel_velocity)}",
            ]
        )


def summarize(successes: Sequence[bool], pet_samples: Sequence[PetSample], episodes: Sequence[Sequence[TraceRow]]) -> MetricsReport:
    n = len(successes)
    rate = (sum(bool(s) for s in successes) / n) if n else 0.0
    return MetricsReport(n, rate, pet_triple(pet_samples), len(pet_samples), compute_velocity(episodes))
