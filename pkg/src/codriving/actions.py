"""The five meta-actions and the reply grammar used to read them back from text."""

from __future__ import annotations

import enum
import re


class MetaAction(enum.Enum):
    SlowDown = "slow down"
    Cruise = "cruise"
    SpeedUp = "speed up"
    ChangeLeft = "change left"
    ChangeRight = "change right"

    @property
    def rank(self) -> int:
        return _ORDER.index(self)

    def __lt__(self, other: "MetaAction") -> bool:
        return self.rank < other.rank

    @property
    def is_lane_change(self) -> bool:
        return self in (MetaAction.ChangeLeft, MetaAction.ChangeRight)


_ORDER = list(MetaAction)
ALL_ACTIONS: tuple[MetaAction, ...] = tuple(_ORDER)

# fallback preference when the backend's answer is unusable
SAFETY_PREFERENCE: tuple[MetaAction, ...] = (
    MetaAction.SlowDown,
    MetaAction.Cruise,
    MetaAction.SpeedUp,
    MetaAction.ChangeRight,
    MetaAction.ChangeLeft,
)

_PHRASES: dict[str, MetaAction] = {}
for _a in MetaAction:
    _PHRASES[_a.name.lower()] = _a
    _PHRASES[_a.value.replace(" ", "")] = _a
_PHRASES.update(
    {
        "accelerate": MetaAction.SpeedUp,
        "faster": MetaAction.SpeedUp,
        "decelerate": MetaAction.SlowDown,
        "yield": MetaAction.SlowDown,
        "slower": MetaAction.SlowDown,
        "idle": MetaAction.Cruise,
        "keep": MetaAction.Cruise,
        "keepspeed": MetaAction.Cruise,
        "laneleft": MetaAction.ChangeLeft,
        "laneright": MetaAction.ChangeRight,
        "changelaneleft": MetaAction.ChangeLeft,
        "changelaneright": MetaAction.ChangeRight,
    }
)

DECISION_LINE = re.compile(r"^\s*\**\s*decision\s*\**\s*:\s*(.*)$", re.IGNORECASE)


def parse_action_phrase(phrase: str) -> MetaAction | None:
    words = re.findall(r"[a-z]+", phrase.lower())
    for n in (3, 2, 1):
        if len(words) >= n:
            hit = _PHRASES.get("".join(words[:n]))
            if hit is not None:
                return hit
    return None


def parse_decision(reply: str) -> MetaAction | None:
    """Action named on the first ``Decision: <ACTION>`` line of ``reply``, if any."""
    for line in reply.splitlines():
        m = DECISION_LINE.match(line)
        if m:
            return parse_action_phrase(m.group(1))
    return None
