"""Experience memory: hashed bag-of-words embeddings, cosine retrieval and JSONL persistence."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import templates
from .actions import MetaAction
from .negotiation import Severity

SCHEMA = "codriving-memory"
SCHEMA_VERSION = 1
DEFAULT_DIMENSION = 256
# similarities are compared at this many decimals so ties are not decided by float noise
SIM_DECIMALS = 12

_PUNCT = re.compile(r"[^\w\s]+")
_SPACE = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase, punctuation to spaces, collapsed whitespace."""
    return _SPACE.sub(" ", _PUNCT.sub(" ", text.lower())).strip()


def token_index(token: str, dimension: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dimension


def embed(text: str, dimension: int = DEFAULT_DIMENSION) -> np.ndarray:
    """Unit-norm term-frequency vector with tokens hashed into ``dimension`` buckets."""
    tokens = normalize(text).split()
    if not tokens:
        raise ValueError("cannot embed text that is empty after normalization")
    vec = np.zeros(dimension)
    for tok in tokens:
        vec[token_index(tok, dimension)] += 1.0
    return vec / np.linalg.norm(vec)


def joint_text(scenario_text: str, conflict_text: str) -> str:
    return f"{scenario_text}\n{conflict_text}"


@dataclass(frozen=True, eq=False)
class MemoryRecord:
    id: int
    scenario_text: str
    conflict_text: str
    action: MetaAction
    feedback_text: str
    valence: str  # "positive" | "negative"
    embedding: np.ndarray
    created_at: tuple[int, int]  # (episode seed, step)

    def __post_init__(self):
        if not self.feedback_text:
            raise ValueError("feedback text must be non-empty")
        if self.valence not in ("positive", "negative"):
            raise ValueError(f"unknown valence {self.valence!r}")
        if abs(float(np.linalg.norm(self.embedding)) - 1.0) > 1e-9:
            raise ValueError("embedding must have unit norm")

    def __eq__(self, other):
        if not isinstance(other, MemoryRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.scenario_text == other.scenario_text
            and self.conflict_text == other.conflict_text
            and self.action == other.action
            and self.feedback_text == other.feedback_text
            and self.valence == other.valence
            and tuple(self.created_at) == tuple(other.created_at)
            and self.embedding.dtype == other.embedding.dtype
            and np.array_equal(self.embedding, other.embedding)
        )

    __hash__ = None

    def to_text(self) -> str:
        """Few-shot rendering used inside prompts."""
        return (
            f"Experience {self.id}:\nScene: {self.scenario_text}\nNegotiation: {self.conflict_text}\n"
            f"Action taken: {self.action.value}. Outcome: {self.feedback_text}"
        )


class MemoryStore:
    """Append-only record list backed by a growing embedding matrix."""

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.records: list[MemoryRecord] = []
        self._matrix = np.zeros((16, dimension))

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, MemoryStore):
            return NotImplemented
        return self.dimension == other.dimension and self.records == other.records

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix[: len(self.records)]

    def next_id(self) -> int:
        return self.records[-1].id + 1 if self.records else 1

    def append(self, record: MemoryRecord) -> MemoryRecord:
        if record.embedding.shape != (self.dimension,):
            raise ValueError(f"embedding dimension {record.embedding.shape} != ({self.dimension},)")
        if self.records and record.id <= self.records[-1].id:
            raise ValueError("record ids must be unique and increasing")
        n = len(self.records)
        if n == self._matrix.shape[0]:
            grown = np.zeros((2 * n, self.dimension))
            grown[:n] = self._matrix
            self._matrix = grown
        self._matrix[n] = record.embedding
        self.records.append(record)
        return record

    def add(
        self,
        scenario_text: str,
        conflict_text: str,
        action: MetaAction,
        feedback_text: str,
        valence: str,
        created_at: tuple[int, int] = (0, 0),
    ) -> MemoryRecord:
        vec = embed(joint_text(scenario_text, conflict_text), self.dimension)
        rec = MemoryRecord(self.next_id(), scenario_text, conflict_text, action, feedback_text, valence, vec, created_at)
        return self.append(rec)

    def copy(self) -> "MemoryStore":
        other = MemoryStore(self.dimension)
        for rec in self.records:
            other.append(rec)
        return other


def feedback_for(before: Severity, after: Severity) -> tuple[str, str]:
    """(valence, feedback text) for a change in worst severity."""
    if after > before:
        return "negative", templates.FEEDBACK_NEGATIVE
    if after < before:
        return "positive", templates.FEEDBACK_IMPROVED
    return "positive", templates.FEEDBACK_MAINTAINED


def augment(
    store: MemoryStore,
    prev_scene: str,
    prev_conflicts: str,
    action: MetaAction,
    before: Severity,
    after: Severity,
    created_at: tuple[int, int] = (0, 0),
) -> MemoryRecord:
    """Judge the action by how the worst severity moved and store the experience."""
    valence, text = feedback_for(Severity(before), Severity(after))
    return store.add(prev_scene, prev_conflicts, action, text, valence, created_at)


def similarities(store: MemoryStore, query: np.ndarray) -> np.ndarray:
    return np.round(store.matrix @ query, SIM_DECIMALS)


def retrieve(store: MemoryStore, query_scene: str, query_conflict: str, k: int) -> list[MemoryRecord]:
    """Top-``k`` records by cosine similarity, newer first on ties."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0 or not store.records:
        return []
    sims = similarities(store, embed(joint_text(query_scene, query_conflict), store.dimension))
    n = len(sims)
    # lexsort sorts by the last key first: similarity desc, then index desc (newer first)
    order = np.lexsort((-np.arange(n), -sims))
    return [store.records[i] for i in order[:k]]


# ---------------------------------------------------------------------------
# persistence


class MemoryLoadError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"memory record {index}: {message}")
        self.index = index


def _record_to_json(rec: MemoryRecord) -> str:
    return json.dumps(
        {
            "id": rec.id,
            "scenario_text": rec.scenario_text,
            "conflict_text": rec.conflict_text,
            "action": rec.action.name,
            "feedback_text": rec.feedback_text,
            "valence": rec.valence,
            # repr round-trips float64 exactly
            "embedding": [repr(float(x)) for x in rec.embedding],
            "created_at": list(rec.created_at),
        },
        ensure_ascii=False,
    )


def persist(store: MemoryStore, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"schema": SCHEMA, "version": SCHEMA_VERSION, "dimension": store.dimension, "count": len(store)}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in store.records:
            fh.write(_record_to_json(rec) + "\n")
    tmp.replace(path)
    return path


def load(path: str | Path) -> MemoryStore:
    """Read a store written by :func:`persist`; any damage raises MemoryLoadError naming the record."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MemoryLoadError(0, "missing header")
    try:
        header = json.loads(lines[0])
        if header.get("schema") != SCHEMA or header.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema {header.get('schema')!r} v{header.get('version')}")
        dimension, count = int(header["dimension"]), int(header["count"])
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise MemoryLoadError(0, f"bad header: {exc}") from exc
    store = MemoryStore(dimension)
    for index, line in enumerate(lines[1:], start=1):
        try:
            obj = json.loads(line)
            emb = np.array([float(x) for x in obj["embedding"]], dtype=np.float64)
            rec = MemoryRecord(
                int(obj["id"]),
                obj["scenario_text"],
                obj["conflict_text"],
                MetaAction[obj["action"]],
                obj["feedback_text"],
                obj["valence"],
                emb,
                tuple(int(v) for v in obj["created_at"]),
            )
            store.append(rec)
        except (ValueError, KeyError, TypeError) as exc:
            raise MemoryLoadError(index, str(exc) or type(exc).__name__) from exc
    if len(store) != count:
        raise MemoryLoadError(len(store) + 1, f"expected {count} records, found {len(store)} (truncated file)")
    return store
