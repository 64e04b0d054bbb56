"""The agent's two actions: general knowledge lookup and personal memory retrieval."""

from __future__ import annotations

import json
import logging
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from persona_agent.embedding import Encoder
from persona_agent.memory import EpisodicBuffer, render_history, retrieve

log = logging.getLogger(__name__)

WIKIPEDIA = "wikipedia"
USER_MEMORY = "user_memory"

WIKIPEDIA_DESCRIPTION = """\
Use this tool to get a brief summary from Wikipedia about a specific topic.

Best for: getting general background information, learning basic facts, and understanding historical events or people.

Input: a clear, specific topic name (e.g., 'Albert Einstein', 'World War II').

Output: returns a concise Wikipedia summary.

Note: use precise topic names for better results."""

USER_MEMORY_DESCRIPTION = """\
Retrieve top-k relevant items/histories from the user memory using RAG (Retrieval-Augmented Generation).

Best for: finding detailed information on related items, answering specific questions from personal data, and incorporating user preferences into the final answer.

Input: a specific search query or question about the content.

Output: relevant interaction histories from the user memory.

Note: more specific queries yield more accurate results.

Requirement: must use this tool at least once to answer the question."""

NO_ARTICLE = "no article found"
NO_HISTORY = "no user history available"


class Source(str, Enum):
    KNOWLEDGE = "knowledge"
    MEMORY = "memory"


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    input_hint: str

    def __post_init__(self) -> None:
        if not self.name or not self.description:
            raise ValueError("tool name and description must be non-empty")


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    input: str


@dataclass(frozen=True)
class ToolResult:
    output: str
    ok: bool
    source: Source | None = None

    def to_json(self) -> dict:
        return {"output": self.output, "ok": self.ok, "source": self.source.value if self.source else None}


WIKIPEDIA_TOOL = ToolSpec(WIKIPEDIA, WIKIPEDIA_DESCRIPTION, "a topic name")
USER_MEMORY_TOOL = ToolSpec(USER_MEMORY, USER_MEMORY_DESCRIPTION, "a search query")
DEFAULT_REGISTRY = (WIKIPEDIA_TOOL, USER_MEMORY_TOOL)


class KnowledgeProvider(Protocol):
    def summary(self, topic: str) -> str | None:
        """Summary text for ``topic`` or ``None`` if there is no article."""


class OfflineKnowledge:
    """Title -> summary map; exact title first, then case-insensitive."""

    def __init__(self, articles: Mapping[str, str] | None = None) -> None:
        self.articles = dict(articles or {})
        self._folded = {k.casefold(): v for k, v in self.articles.items()}

    @classmethod
    def load(cls, path: str | Path) -> "OfflineKnowledge":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(obj, dict):
            raise ValueError(f"{path}: expected a JSON object mapping title to summary")
        return cls(obj)

    def summary(self, topic: str) -> str | None:
        if topic in self.articles:
            return self.articles[topic]
        return self._folded.get(topic.strip().casefold())


class WikipediaKnowledge:
    """Public REST page-summary endpoint."""

    def __init__(self, base_url: str = "https://en.wikipedia.org/api/rest_v1", timeout: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def summary(self, topic: str) -> str | None:
        title = urllib.parse.quote(topic.strip().replace(" ", "_"), safe="")
        req = urllib.request.Request(
            f"{self.base_url}/page/summary/{title}",
            headers={"Accept": "application/json", "User-Agent": "persona-agent/0.1"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            if exc.code == 404:
                return None
            raise
        extract = payload.get("extract") if isinstance(payload, dict) else None
        return extract or None


def knowledge_lookup(topic: str, provider: KnowledgeProvider) -> ToolResult:
    topic = topic.strip()
    if not topic:
        return ToolResult("empty topic; give a specific topic name", False, Source.KNOWLEDGE)
    try:
        text = provider.summary(topic)
    except Exception as exc:  # observations, never exceptions
        log.warning("knowledge lookup for %r failed: %s", topic, exc)
        return ToolResult(f"lookup failed: {exc}", False, Source.KNOWLEDGE)
    if text is None:
        return ToolResult(NO_ARTICLE, False, Source.KNOWLEDGE)
    return ToolResult(text, True, Source.KNOWLEDGE)


def memory_rag(query: str, buffer: EpisodicBuffer, k: int, encoder: Encoder) -> ToolResult:
    if not buffer.records:
        return ToolResult(NO_HISTORY, False, Source.MEMORY)
    try:
        records = retrieve(buffer, query, k, encoder)
    except Exception as exc:
        return ToolResult(f"memory retrieval failed: {exc}", False, Source.MEMORY)
    return ToolResult(render_history(records), True, Source.MEMORY)


@dataclass
class ToolContext:
    buffer: EpisodicBuffer
    encoder: Encoder
    knowledge: KnowledgeProvider
    k: int = 4


def dispatch(registry: Sequence[ToolSpec], call: ToolCall, context: ToolContext) -> ToolResult:
    """Route ``call`` to its tool. Never raises; failures come back as ``ok=False``."""
    names = [spec.name for spec in registry]
    name = call.tool_name.strip()
    try:
        if name in names and name == WIKIPEDIA:
            return knowledge_lookup(call.input, context.knowledge)
        if name in names and name == USER_MEMORY:
            return memory_rag(call.input, context.buffer, context.k, context.encoder)
    except Exception as exc:
        return ToolResult(f"tool {name} failed: {exc}", False)
    return ToolResult(f"unknown tool {name}; available: {', '.join(names)}", False)


def describe_tools(registry: Sequence[ToolSpec]) -> str:
    return "\n\n".join(f"Tool: {spec.name}\n{spec.description}" for spec in registry)
