"""Shared domain types: interaction records, task kinds, predictions and label parsing."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, NewType, Sequence, Union

UserId = NewType("UserId", str)

_USER_ID_RE = re.compile(r"^[A-Za-z0-9._@+-]+$")

RATING_LABELS = ("1", "2", "3", "4", "5")


class PersonaAgentError(Exception):
    """Base class for all errors raised by this package."""


class ParseFailure(PersonaAgentError):
    """No label token could be extracted from a model answer."""

    def __init__(self, raw_text: str, task: "TaskKind") -> None:
        super().__init__(f"no {task.value} label found in {raw_text[:80]!r}")
        self.raw_text = raw_text
        self.task = task


def user_id(value: str) -> UserId:
    """Validate a user identifier.

    Identifiers double as directory names in the memory store, so path
    separators and whitespace are rejected.
    """
    if not isinstance(value, str) or not value:
        raise ValueError("user id must be a non-empty string")
    if value in (".", "..") or not _USER_ID_RE.match(value):
        raise ValueError(f"user id {value!r} contains unsupported characters")
    return UserId(value)


class TaskKind(str, Enum):
    CITATION_IDENTIFICATION = "citation_identification"
    MOVIE_TAGGING = "movie_tagging"
    NEWS_CATEGORIZATION = "news_categorization"
    PRODUCT_RATING = "product_rating"

    @classmethod
    def parse(cls, name: str) -> "TaskKind":
        key = name.strip().lower().replace(" ", "_")
        alias = _TASK_ALIASES.get(key)
        if alias is not None:
            return alias
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown task {name!r}") from None

    @property
    def is_rating(self) -> bool:
        return self is TaskKind.PRODUCT_RATING


_TASK_ALIASES = {
    "lamp-1": TaskKind.CITATION_IDENTIFICATION,
    "lamp1": TaskKind.CITATION_IDENTIFICATION,
    "lamp-2m": TaskKind.MOVIE_TAGGING,
    "lamp2m": TaskKind.MOVIE_TAGGING,
    "lamp-2n": TaskKind.NEWS_CATEGORIZATION,
    "lamp2n": TaskKind.NEWS_CATEGORIZATION,
    "lamp-3": TaskKind.PRODUCT_RATING,
    "lamp3": TaskKind.PRODUCT_RATING,
}


@dataclass(frozen=True)
class Metadata:
    timestamp: int
    session_id: str | None = None
    extra: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if isinstance(self.timestamp, bool) or not isinstance(self.timestamp, int):
            raise TypeError("timestamp must be an integer number of epoch seconds")
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")


@dataclass(frozen=True)
class InteractionRecord:
    """One past query together with the user's true response."""

    query: str
    ground_truth: str
    metadata: Metadata

    def __post_init__(self) -> None:
        if not self.query:
            raise ValueError("query must be non-empty")
        if not self.ground_truth:
            raise ValueError("ground_truth must be non-empty")

    @property
    def timestamp(self) -> int:
        return self.metadata.timestamp

    def render(self) -> str:
        """Canonical text used when embedding the record."""
        return f"Q: {self.query}\nA: {self.ground_truth}"

    def to_json(self) -> dict:
        return {
            "query": self.query,
            "ground_truth": self.ground_truth,
            "timestamp": self.metadata.timestamp,
            "session_id": self.metadata.session_id,
            "extra": dict(self.metadata.extra),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "InteractionRecord":
        return cls(
            query=obj["query"],
            ground_truth=obj["ground_truth"],
            metadata=Metadata(
                timestamp=obj["timestamp"],
                session_id=obj.get("session_id"),
                extra=dict(obj.get("extra") or {}),
            ),
        )


Label = Union[str, int]


@dataclass(frozen=True)
class Prediction:
    raw_text: str
    label: Label | None
    parse_failed: bool = False

    @classmethod
    def failure(cls, raw_text: str) -> "Prediction":
        return cls(raw_text=raw_text, label=None, parse_failed=True)


def _label_pattern(label: str) -> str:
    body = re.escape(label.lower())
    # word-boundary guards only where the label edge is itself a word char
    head = r"(?<![a-z0-9])" if label[:1].isalnum() else ""
    tail = r"(?![a-z0-9])" if label[-1:].isalnum() else ""
    return head + body + tail


def parse_label(raw_text: str, task: TaskKind, label_set: Sequence[str] = ()) -> Prediction:
    """Extract the predicted label from free model text.

    Classification tasks return the leftmost label occurrence, preferring the
    longest label when several start at the same position. Ratings take the
    first integer token clamped to 1..5.

    Raises:
        ParseFailure: if no label token is present.
    """
    if task.is_rating:
        m = re.search(r"\d+", raw_text)
        if m is None:
            raise ParseFailure(raw_text, task)
        return Prediction(raw_text, min(5, max(1, int(m.group()))))

    labels = [lab for lab in label_set if lab]
    if not labels:
        raise ValueError(f"{task.value} needs a non-empty label set")
    canonical = {}
    for lab in labels:
        canonical.setdefault(lab.lower(), lab)
    ordered = sorted(canonical, key=lambda s: (-len(s), s))
    pattern = re.compile("|".join(_label_pattern(lab) for lab in ordered))
    m = pattern.search(raw_text.lower())
    if m is None:
        raise ParseFailure(raw_text, task)
    return Prediction(raw_text, canonical[m.group()])


def label_set_for(task: TaskKind, labels: Sequence[str] = ()) -> list[str]:
    if task.is_rating:
        return list(RATING_LABELS)
    return list(labels)
