"""Decision backends: a remote chat-completion client and deterministic scripted stubs."""

from __future__ import annotations

import logging
import os
import re
import time
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import httpx

from . import templates
from .actions import SAFETY_PREFERENCE, MetaAction, parse_action_phrase
from .config import BackendConfig, ConfigError

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class BackendUnavailable(RuntimeError):
    """Transport failure, timeout or exhausted retries."""


class ProtocolError(RuntimeError):
    """The endpoint answered, but not with a usable chat-completion payload."""


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_reply_tokens: int = 200
    timeout: float = 30.0

    def __post_init__(self):
        if not any(role == "user" for role, _ in self.messages):
            raise ValueError("a chat request needs at least one user message")
        for role, _ in self.messages:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        if self.timeout <= 0 or self.temperature < 0 or self.max_reply_tokens < 1:
            raise ValueError("timeout must be positive, temperature non-negative, max_reply_tokens >= 1")

    @classmethod
    def from_texts(cls, system: str, user: str, **kw) -> "ChatRequest":
        return cls((("system", system), ("user", user)), **kw)

    def text(self, role: str) -> str:
        return "\n".join(content for r, content in self.messages if r == role)


class Backend(Protocol):
    def chat(self, request: ChatRequest) -> str: ...


# ---------------------------------------------------------------------------
# stub


@dataclass(frozen=True)
class PromptFacts:
    """What the stub reads back from a decision prompt."""

    speed: float
    desired_speed: float
    dv_step: float
    yields: bool
    first: bool
    allowed: tuple[MetaAction, ...]


_SPEED = re.compile(r"driving (-?[\d.]+) m/s; desired speed (-?[\d.]+) m/s")
_STEP = re.compile(r"changes the target speed by ([\d.]+) m/s")


def _section(text: str, header: str) -> str:
    start = text.find(header + "\n")
    if start < 0:
        return ""
    start += len(header) + 1
    nxt = [text.find(h + "\n", start) for h in templates.SECTIONS if h != header]
    nxt = [i for i in nxt if i >= 0]
    return text[start : min(nxt)] if nxt else text[start:]


def parse_prompt_facts(request: ChatRequest) -> PromptFacts:
    user, system = request.text("user"), request.text("system")
    m = _SPEED.search(_section(user, templates.SECTION_SCENE))
    speed, desired = (float(m.group(1)), float(m.group(2))) if m else (0.0, 0.0)
    m = _STEP.search(system)
    dv_step = float(m.group(1)) if m else 2.0
    nego = _section(user, templates.SECTION_NEGOTIATION)
    yield_prefix = "- " + templates.YOU_YIELD.split("{")[0]
    first_prefix = "- " + templates.YOU_FIRST.split("{")[0]
    lines = nego.splitlines()
    allowed = []
    for line in _section(user, templates.SECTION_ACTIONS).splitlines():
        if line.startswith("- "):
            action = parse_action_phrase(line[2:].split(":")[0])
            if action is not None and action not in allowed:
                allowed.append(action)
    return PromptFacts(
        speed,
        desired,
        dv_step,
        any(l.startswith(yield_prefix) for l in lines),
        any(l.startswith(first_prefix) for l in lines),
        tuple(allowed) or tuple(MetaAction),
    )


def track_speed(speed: float, desired: float, dv_step: float) -> MetaAction:
    if speed < desired - dv_step / 2:
        return MetaAction.SpeedUp
    if speed > desired + dv_step / 2:
        return MetaAction.SlowDown
    return MetaAction.Cruise


def _within(preferred: Sequence[MetaAction], allowed: Sequence[MetaAction]) -> MetaAction:
    for action in list(preferred) + list(SAFETY_PREFERENCE):
        if action in allowed:
            return action
    return MetaAction.SlowDown


def stub_policy(facts: PromptFacts, mode: str = "stub-compliant", seed: int = 0) -> MetaAction:
    """Scripted stand-in for the language model.

    The compliant stub follows its passing orders and otherwise tracks the
    desired speed; the adversarial stub always just tracks the desired speed.
    ``seed`` is accepted for interface symmetry; the table is deterministic.
    """
    track = track_speed(facts.speed, facts.desired_speed, facts.dv_step)
    if mode == "stub-compliant":
        if facts.yields:
            return _within([MetaAction.SlowDown], facts.allowed)
        if facts.first:
            return _within([MetaAction.SpeedUp, MetaAction.Cruise], facts.allowed)
    elif mode != "stub-adversarial":
        raise ValueError(f"unknown stub mode {mode!r}")
    return _within([track], facts.allowed)


_PAIR = re.compile(r"^Pair (\d+):", re.MULTILINE)


class StubBackend:
    def __init__(self, mode: str = "stub-compliant", seed: int = 0):
        if mode not in ("stub-compliant", "stub-adversarial"):
            raise ConfigError(f"not a stub mode: {mode!r}")
        self.mode, self.seed = mode, seed

    def chat(self, request: ChatRequest) -> str:
        if request.text("system") == templates.COORDINATOR_SYSTEM:
            n = len(_PAIR.findall(request.text("user")))
            return "\n".join(f"Pair {i}: confirm" for i in range(1, n + 1))
        facts = parse_prompt_facts(request)
        action = stub_policy(facts, self.mode, self.seed)
        why = "following the negotiated order" if self.mode == "stub-compliant" and (facts.yields or facts.first) else "tracking the desired speed"
        return f"Decision: {action.value}\nRationale: {why}."


# ---------------------------------------------------------------------------
# remote


TRANSIENT_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


class RemoteBackend:
    """Chat-completion client with bounded retries.

    The whole call, sleeps included, never exceeds ``timeout * (retry_budget + 1)``.
    """

    def __init__(
        self,
        config: BackendConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        if config.mode != "remote":
            raise ConfigError("RemoteBackend needs mode='remote'")
        key = os.environ.get(config.credential_env)
        if not key:
            raise ConfigError(f"environment variable {config.credential_env} holds no credential")
        self.config = config
        self._sleep, self._clock = sleep, clock
        self._client = httpx.Client(transport=transport, headers={"Authorization": f"Bearer {key}"})

    def close(self) -> None:
        self._client.close()

    def _payload(self, request: ChatRequest) -> dict:
        return {
            "model": self.config.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_reply_tokens,
        }

    @staticmethod
    def _content(response: httpx.Response) -> str:
        try:
            body = response.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat-completion response: {exc!r}") from exc
        if not isinstance(content, str):
            raise ProtocolError("reply content is not text")
        return content

    def chat(self, request: ChatRequest) -> str:
        budget = self.config.retry_budget
        deadline = self._clock() + request.timeout * (budget + 1)
        last: Exception | None = None
        for attempt in range(budget + 1):
            remaining = deadline - self._clock()
            if remaining <= 0:
                break
            try:
                response = self._client.post(
                    self.config.endpoint, json=self._payload(request), timeout=min(request.timeout, remaining)
                )
            except httpx.TransportError as exc:  # includes timeouts
                last = exc
            else:
                if response.status_code < 400:
                    return self._content(response)
                if response.status_code not in TRANSIENT_STATUS:
                    raise BackendUnavailable(f"endpoint refused the request: HTTP {response.status_code}")
                last = BackendUnavailable(f"HTTP {response.status_code}")
            if attempt < budget:
                pause = self.config.backoff[min(attempt, len(self.config.backoff) - 1)] if self.config.backoff else 0.0
                pause = min(pause, max(deadline - self._clock(), 0.0))
                log.warning("chat attempt %d failed (%s); retrying in %.2fs", attempt + 1, last, pause)
                self._sleep(pause)
        raise BackendUnavailable(f"no reply after {budget + 1} attempts: {last}")


def make_backend(config: BackendConfig, **kw) -> Backend:
    if config.mode == "remote":
        return RemoteBackend(config, **kw)
    return StubBackend(config.mode, config.seed)


def chat(request: ChatRequest, config: BackendConfig) -> str:
    return make_backend(config).chat(request)
