"""Chat-completion backends: a scripted rule-based backend and HTTP clients."""

from __future__ import annotations

import contextlib
import contextvars
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping, Sequence

from persona_agent.core import PersonaAgentError

log = logging.getLogger(__name__)

ENV_API_BASE = "PERSONA_AGENT_API_BASE"
ENV_API_KEY = "PERSONA_AGENT_API_KEY"
ENV_MODEL = "PERSONA_AGENT_MODEL"


class BackendError(PersonaAgentError):
    pass


class TransportError(BackendError):
    pass


class RateLimited(BackendError):
    pass


class NoMatchingRule(BackendError):
    pass


class EmptyCompletion(BackendError):
    pass


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def to_json(self) -> dict:
        return {"role": self.role.value, "content": self.content}


@dataclass(frozen=True)
class CompletionParams:
    temperature: float = 0.1
    max_tokens: int = 1024
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


DEFAULT_PARAMS = CompletionParams()


# Call scopes tag every logged call with where in the pipeline it happened
# (method, user, phase, query index...). They live in a context variable so
# worker threads started with ``contextvars.copy_context`` inherit them.
_scope: contextvars.ContextVar[Mapping[str, object]] = contextvars.ContextVar(
    "persona_agent_call_scope", default={}
)


@contextlib.contextmanager
def call_scope(**tags: object) -> Iterator[None]:
    token = _scope.set({**_scope.get(), **tags})
    try:
        yield
    finally:
        _scope.reset(token)


def current_scope() -> dict:
    return dict(_scope.get())


@dataclass(frozen=True)
class CallRecord:
    messages: tuple[ChatMessage, ...]
    params: CompletionParams
    response: str
    scope: Mapping[str, object] = field(default_factory=dict)

    @property
    def prompt(self) -> str:
        return render_prompt(self.messages)

    def to_json(self) -> dict:
        return {
            "scope": dict(self.scope),
            "messages": [m.to_json() for m in self.messages],
            "response": self.response,
        }


def render_prompt(messages: Sequence[ChatMessage]) -> str:
    """Flat text view of a conversation, the surface scripted rules match against."""
    return "\n\n".join(f"{m.role.value.upper()}: {m.content}" for m in messages)


class ChatBackend:
    """Base class. Subclasses implement :meth:`_complete`."""

    def __init__(self) -> None:
        self.call_log: list[CallRecord] = []
        self._lock = threading.Lock()

    def complete(
        self, messages: Sequence[ChatMessage], params: CompletionParams | None = None
    ) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        params = params or DEFAULT_PARAMS
        messages = tuple(messages)
        text = self._complete(messages, params)
        self._record(CallRecord(messages, params, text, current_scope()))
        return text

    def _record(self, rec: CallRecord) -> None:
        with self._lock:
            self.call_log.append(rec)

    def _complete(self, messages: tuple[ChatMessage, ...], params: CompletionParams) -> str:
        raise NotImplementedError


class TapBackend(ChatBackend):
    """Forward to another backend while keeping a private log of the calls made through it."""

    def __init__(self, inner: ChatBackend) -> None:
        super().__init__()
        self.inner = inner

    def _complete(self, messages, params):
        return self.inner.complete(messages, params)


# ---------------------------------------------------------------------------
# scripted backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rule:
    match: str
    response: str
    is_regex: bool = False

    def __post_init__(self) -> None:
        if self.is_regex:
            re.compile(self.match)

    def matches(self, prompt: str) -> bool:
        if self.is_regex:
            return re.search(self.match, prompt) is not None
        return self.match in prompt


@dataclass(frozen=True)
class ScriptedFixture:
    rules: tuple[Rule, ...] = ()
    default_response: str | None = None

    @classmethod
    def from_json(cls, obj: Mapping) -> "ScriptedFixture":
        rules = tuple(
            Rule(r["match"], r["response"], bool(r.get("is_regex", False))) for r in obj.get("rules", [])
        )
        return cls(rules, obj.get("default"))

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedFixture":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> dict:
        return {
            "rules": [{"match": r.match, "is_regex": r.is_regex, "response": r.response} for r in self.rules],
            "default": self.default_response,
        }


class ScriptedBackend(ChatBackend):
    """Deterministic stand-in for an LLM: the first rule matching the rendered prompt wins."""

    def __init__(self, fixture: ScriptedFixture | Sequence[tuple[str, str]], default: str | None = None):
        super().__init__()
        if not isinstance(fixture, ScriptedFixture):
            fixture = ScriptedFixture(tuple(Rule(m, r) for m, r in fixture), default)
        self.fixture = fixture

    def _complete(self, messages, params):
        prompt = render_prompt(messages)
        for rule in self.fixture.rules:
            if rule.matches(prompt):
                return rule.response
        if self.fixture.default_response is not None:
            return self.fixture.default_response
        raise NoMatchingRule(f"no scripted rule matches prompt ending {prompt[-120:]!r}")


# ---------------------------------------------------------------------------
# HTTP backends
# ---------------------------------------------------------------------------


class HttpBackend(ChatBackend):
    """Chat-completions over HTTP.

    ``api_format="openai"`` posts to ``{base_url}/chat/completions``;
    ``api_format="anthropic"`` translates to the Messages API at ``{base_url}/messages``.
    Transport failures and 429/5xx answers are retried once after ``retry_delay`` seconds.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        *,
        api_format: str = "openai",
        timeout: float = 60.0,
        retry_delay: float = 1.0,
    ) -> None:
        super().__init__()
        if api_format not in ("openai", "anthropic"):
            raise ValueError(f"unsupported api_format {api_format!r}")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.api_format = api_format
        self.timeout = timeout
        self.retry_delay = retry_delay

    @classmethod
    def from_env(cls, **kwargs) -> "HttpBackend":
        try:
            base = os.environ[ENV_API_BASE]
            model = os.environ[ENV_MODEL]
        except KeyError as exc:
            raise BackendError(f"environment variable {exc.args[0]} is not set") from None
        return cls(base, model, os.environ.get(ENV_API_KEY), **kwargs)

    def _request(self, messages, params) -> tuple[str, dict, dict]:
        if self.api_format == "openai":
            body = {
                "model": self.model,
                "messages": [m.to_json() for m in messages],
                "temperature": params.temperature,
                "max_tokens": params.max_tokens,
            }
            if params.stop_sequences:
                body["stop"] = list(params.stop_sequences)
            headers = {"Content-Type": "application/json"}
            if self.api_key:
                headers["Authorization"] = f"Bearer {self.api_key}"
            return f"{self.base_url}/chat/completions", body, headers
        system = "\n\n".join(m.content for m in messages if m.role is Role.SYSTEM)
        turns = []
        for m in messages:
            if m.role is Role.SYSTEM:
                continue
            role = "assistant" if m.role is Role.ASSISTANT else "user"
            if turns and turns[-1]["role"] == role:
                turns[-1]["content"] += "\n\n" + m.content
            else:
                turns.append({"role": role, "content": m.content})
        body = {
            "model": self.model,
            "messages": turns,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if system:
            body["system"] = system
        if params.stop_sequences:
            body["stop_sequences"] = list(params.stop_sequences)
        headers = {"Content-Type": "application/json", "anthropic-version": "2023-06-01"}
        if self.api_key:
            headers["x-api-key"] = self.api_key
        return f"{self.base_url}/messages", body, headers

    def _extract(self, payload: dict) -> str:
        try:
            if self.api_format == "openai":
                return payload["choices"][0]["message"]["content"] or ""
            return "".join(b.get("text", "") for b in payload["content"] if b.get("type") == "text")
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected response shape: {exc!r}") from exc

    def _complete(self, messages, params):
        url, body, headers = self._request(messages, params)
        data = json.dumps(body).encode()
        last: Exception | None = None
        for attempt in range(2):
            if attempt:
                time.sleep(self.retry_delay)
            req = urllib.request.Request(url, data=data, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return self._extract(json.loads(resp.read()))
            except urllib.error.HTTPError as exc:
                if exc.code == 429:
                    last = RateLimited(f"{url}: rate limited (HTTP 429)")
                elif exc.code >= 500:
                    last = TransportError(f"{url}: HTTP {exc.code}")
                else:
                    detail = exc.read()[:300].decode("utf-8", "replace")
                    raise BackendError(f"{url}: HTTP {exc.code}: {detail}") from exc
            except (urllib.error.URLError, OSError) as exc:
                last = TransportError(f"{url}: {exc}")
            except json.JSONDecodeError as exc:
                raise BackendError(f"{url}: response is not JSON") from exc
            log.warning("completion attempt %d failed: %s", attempt + 1, last)
        assert last is not None
        raise last
