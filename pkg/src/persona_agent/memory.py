"""Per-user episodic buffer, retrieval, semantic profiles and the on-disk store."""

from __future__ import annotations

import bisect
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from persona_agent.core import InteractionRecord, PersonaAgentError, TaskKind, UserId, user_id
from persona_agent.embedding import Encoder, Vector, top_k
from persona_agent.llm import ChatBackend, ChatMessage, CompletionParams, EmptyCompletion, Role

FORMAT_VERSION = 1
DEFAULT_K = 4
DEFAULT_CHAR_BUDGET = 24_000
RECENT_WINDOW = 50


class EncoderMismatch(PersonaAgentError):
    pass


class EmptyBuffer(PersonaAgentError):
    pass


class FormatError(PersonaAgentError):
    pass


@dataclass
class EpisodicBuffer:
    """Time-ordered interaction history of one user with parallel embeddings.

    A single writer per buffer is assumed; readers may run concurrently.
    """

    user: UserId
    encoder_fingerprint: str
    records: list[InteractionRecord] = field(default_factory=list)
    embeddings: list[Vector] = field(default_factory=list)

    def __post_init__(self) -> None:
        user_id(self.user)
        if len(self.records) != len(self.embeddings):
            raise ValueError("records and embeddings must have equal length")

    @classmethod
    def empty(cls, user: str, encoder: Encoder) -> "EpisodicBuffer":
        return cls(user=UserId(user), encoder_fingerprint=encoder.fingerprint)

    @classmethod
    def from_records(
        cls, user: str, records: Iterable[InteractionRecord], encoder: Encoder
    ) -> "EpisodicBuffer":
        buf = cls.empty(user, encoder)
        records = list(records)
        vectors = encoder.embed_many([r.render() for r in records])
        for rec, vec in zip(records, vectors):
            buf._insert(rec, vec)
        return buf

    def __len__(self) -> int:
        return len(self.records)

    def _insert(self, record: InteractionRecord, vector: Vector) -> int:
        stamps = [r.timestamp for r in self.records]
        pos = bisect.bisect_right(stamps, record.timestamp)
        self.records.insert(pos, record)
        self.embeddings.insert(pos, vector)
        return pos

    def append(self, record: InteractionRecord, encoder: Encoder) -> int:
        """Insert ``record`` at its chronological position and return that index."""
        if encoder.fingerprint != self.encoder_fingerprint:
            raise EncoderMismatch(
                f"buffer was embedded with {self.encoder_fingerprint!r}, got {encoder.fingerprint!r}"
            )
        return self._insert(record, encoder.embed(record.render()))

    def without(self, indices: Iterable[int]) -> "EpisodicBuffer":
        """Copy of the buffer with the given record positions removed."""
        drop = set(indices)
        keep = [i for i in range(len(self.records)) if i not in drop]
        return EpisodicBuffer(
            user=self.user,
            encoder_fingerprint=self.encoder_fingerprint,
            records=[self.records[i] for i in keep],
            embeddings=[self.embeddings[i] for i in keep],
        )

    def latest(self, n: int) -> list[int]:
        """Positions of the ``n`` most recent records, oldest first."""
        return list(range(max(0, len(self.records) - n), len(self.records)))


def append_interaction(
    buffer: EpisodicBuffer, record: InteractionRecord, encoder: Encoder
) -> EpisodicBuffer:
    buffer.append(record, encoder)
    return buffer


def retrieve(
    buffer: EpisodicBuffer, query: str, k: int = DEFAULT_K, encoder: Encoder | None = None
) -> list[InteractionRecord]:
    """Top-``k`` records most similar to ``query`` (most similar first)."""
    return [buffer.records[i] for i in retrieve_indices(buffer, query, k, encoder)]


def retrieve_indices(
    buffer: EpisodicBuffer, query: str, k: int = DEFAULT_K, encoder: Encoder | None = None
) -> list[int]:
    if not buffer.records:
        raise EmptyBuffer(f"no history stored for user {buffer.user}")
    if encoder is None:
        raise ValueError("an encoder is required to embed the query")
    if encoder.fingerprint != buffer.encoder_fingerprint:
        raise EncoderMismatch(
            f"buffer was embedded with {buffer.encoder_fingerprint!r}, got {encoder.fingerprint!r}"
        )
    return top_k(encoder.embed(query), buffer.embeddings, k)


# ---------------------------------------------------------------------------
# semantic profile
# ---------------------------------------------------------------------------

TASK_DESCRIPTIONS = {
    TaskKind.CITATION_IDENTIFICATION: "choosing which paper a researcher is likely to cite",
    TaskKind.MOVIE_TAGGING: "assigning tags to movies",
    TaskKind.NEWS_CATEGORIZATION: "categorizing the news articles they write",
    TaskKind.PRODUCT_RATING: "rating products on a 1-5 scale from their reviews",
}

DEFAULT_SUMMARY_TEMPLATE = (
    "Below are past interactions of a user for the task of {task}.\n\n"
    "{history}\n\n"
    "Summarize this user's stable preferences, habits and long-term interests "
    "relevant to {task} in a short profile. Write only the profile."
)


@dataclass(frozen=True)
class SummarizationPrompt:
    template: str = DEFAULT_SUMMARY_TEMPLATE

    def __post_init__(self) -> None:
        for slot in ("{task}", "{history}"):
            if slot not in self.template:
                raise ValueError(f"summarization template is missing {slot}")

    def render(self, task: TaskKind, history: str) -> str:
        return self.template.replace("{task}", TASK_DESCRIPTIONS[task]).replace("{history}", history)


@dataclass(frozen=True)
class SemanticProfile:
    user: UserId
    text: str
    source_count: int
    created_at: int
    task: TaskKind

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("profile text must be non-empty")

    def to_json(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "user": self.user,
            "text": self.text,
            "source_count": self.source_count,
            "created_at": self.created_at,
            "task": self.task.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SemanticProfile":
        return cls(
            user=UserId(obj["user"]),
            text=obj["text"],
            source_count=int(obj["source_count"]),
            created_at=int(obj["created_at"]),
            task=TaskKind(obj["task"]),
        )


def render_history(records: Sequence[InteractionRecord]) -> str:
    return "\n\n".join(f"Past Q: {r.query}\nUser's answer: {r.ground_truth}" for r in records)


def summarize_profile(
    buffer: EpisodicBuffer,
    prompt: SummarizationPrompt,
    llm: ChatBackend,
    task: TaskKind,
    *,
    char_budget: int = DEFAULT_CHAR_BUDGET,
    params: CompletionParams | None = None,
    clock: Callable[[], float] = time.time,
) -> SemanticProfile:
    """Condense the whole buffer into a profile with one completion call.

    When the full rendering exceeds ``char_budget`` only the most recent
    records are rendered.
    """
    if not buffer.records:
        raise EmptyBuffer(f"no history stored for user {buffer.user}")
    text = prompt.render(task, render_history(buffer.records))
    if len(text) > char_budget:
        text = prompt.render(task, render_history(buffer.records[-RECENT_WINDOW:]))
    reply = llm.complete([ChatMessage(Role.USER, text)], params).strip()
    if not reply:
        raise EmptyCompletion("summarization returned an empty profile")
    return SemanticProfile(
        user=buffer.user,
        text=reply,
        source_count=len(buffer.records),
        created_at=int(clock()),
        task=task,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

EPISODIC_FILE = "episodic.jsonl"
EMBEDDINGS_FILE = "embeddings.json"
PROFILE_FILE = "profile.json"
PERSONA_FILE = "persona.json"


def user_dir(store_root: str | Path, user: str) -> Path:
    return Path(store_root) / user_id(user)


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def save_buffer(buffer: EpisodicBuffer, store_root: str | Path) -> Path:
    d = user_dir(store_root, buffer.user)
    lines = "".join(_dump(r.to_json()) + "\n" for r in buffer.records)
    _write_atomic(d / EPISODIC_FILE, lines)
    meta = {
        "version": FORMAT_VERSION,
        "user": buffer.user,
        "fingerprint": buffer.encoder_fingerprint,
        "vectors": [list(v) for v in buffer.embeddings],
    }
    _write_atomic(d / EMBEDDINGS_FILE, _dump(meta) + "\n")
    return d


def load_buffer(
    store_root: str | Path, user: str, encoder: Encoder | None = None
) -> EpisodicBuffer:
    """Load a buffer written by :func:`save_buffer`.

    Raises:
        FormatError: on version, fingerprint, or per-record embedding mismatches.
    """
    d = user_dir(store_root, user)
    try:
        raw_lines = (d / EPISODIC_FILE).read_text(encoding="utf-8").split("\n")
        meta = json.loads((d / EMBEDDINGS_FILE).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / EMBEDDINGS_FILE}: invalid JSON: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"{d / EMBEDDINGS_FILE}: unsupported format version {meta.get('version')!r}")
    if meta.get("user") != user:
        raise FormatError(f"{d / EMBEDDINGS_FILE}: belongs to user {meta.get('user')!r}, not {user!r}")
    fingerprint = meta.get("fingerprint")
    if encoder is not None and fingerprint != encoder.fingerprint:
        raise FormatError(
            f"{d}: stored embeddings use {fingerprint!r} but encoder is {encoder.fingerprint!r}"
        )
    records = []
    for lineno, line in enumerate(raw_lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(InteractionRecord.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{d / EPISODIC_FILE}:{lineno}: {exc}") from exc
    vectors = meta.get("vectors")
    if not isinstance(vectors, list) or len(vectors) != len(records):
        raise FormatError(
            f"{d}: {len(records)} records but {len(vectors) if isinstance(vectors, list) else 'no'} embeddings"
        )
    embeddings: list[Vector] = []
    dim = len(vectors[0]) if vectors else 0
    for i, vec in enumerate(vectors):
        if not isinstance(vec, list) or len(vec) != dim or (encoder is not None and len(vec) != encoder.dim):
            raise FormatError(f"{d / EMBEDDINGS_FILE}: embedding of record {i} has wrong length")
        v = tuple(float(x) for x in vec)
        if not all(math.isfinite(x) for x in v):
            raise FormatError(f"{d / EMBEDDINGS_FILE}: embedding of record {i} is not finite")
        embeddings.append(v)
    stamps = [r.timestamp for r in records]
    if stamps != sorted(stamps):
        raise FormatError(f"{d / EPISODIC_FILE}: records are not in timestamp order")
    return EpisodicBuffer(UserId(user), fingerprint, records, embeddings)


def save_profile(profile: SemanticProfile, store_root: str | Path) -> Path:
    path = user_dir(store_root, profile.user) / PROFILE_FILE
    _write_atomic(path, _dump(profile.to_json()) + "\n")
    return path


def load_profile(store_root: str | Path, user: str) -> SemanticProfile:
    path = user_dir(store_root, user) / PROFILE_FILE
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
        if obj.get("version") != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {obj.get('version')!r}")
        return SemanticProfile.from_json(obj)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
