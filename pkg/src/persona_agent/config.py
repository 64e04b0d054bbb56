"""Experiment configuration loaded from TOML.

Schema (all sections optional except ``[data]``; relative paths resolve against
the config file's directory)::

    [run]        run_dir, store_root, seed, workers
    [data]       dataset, task_definition, top_users
    [methods]    names = ["rag-4", "persona_agent", ...]
    [backend]    kind = "scripted" | "http"; fixture; base_url, model, api_key_env,
                 api_format; temperature, max_tokens
    [encoder]    kind = "hashed" | "external"; dim, seed; endpoint, model, token_env
    [knowledge]  kind = "offline" | "wikipedia"; path; base_url, timeout
    [agent]      max_steps, min_tool_calls, k_memory
    [alignment]  batch_size, iterations, allow_self_retrieval
    [memory]     char_budget
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from persona_agent.agent import RunConfig
from persona_agent.alignment import AlignmentConfig
from persona_agent.core import PersonaAgentError
from persona_agent.embedding import DEFAULT_DIM, ExternalEncoder, HashedTfIdfEncoder
from persona_agent.llm import ENV_API_BASE, ENV_API_KEY, ENV_MODEL, ChatBackend, CompletionParams, HttpBackend, ScriptedBackend, ScriptedFixture
from persona_agent.tools import OfflineKnowledge, WikipediaKnowledge


class ConfigError(PersonaAgentError):
    pass


_SECTIONS = {
    "run": {"run_dir", "store_root", "seed", "workers"},
    "data": {"dataset", "task_definition", "top_users"},
    "methods": {"names"},
    "backend": {"kind", "fixture", "base_url", "model", "api_key_env", "api_format", "temperature", "max_tokens"},
    "encoder": {"kind", "dim", "seed", "endpoint", "model", "token_env"},
    "knowledge": {"kind", "path", "base_url", "timeout"},
    "agent": {"max_steps", "min_tool_calls", "k_memory"},
    "alignment": {"batch_size", "iterations", "allow_self_retrieval"},
    "memory": {"char_budget"},
}


@dataclass
class ExperimentConfig:
    dataset: Path
    task_definition: Path
    run_dir: Path
    store_root: Path | None = None
    methods: list[str] = field(default_factory=lambda: ["persona_agent"])
    top_users: int = 100
    seed: int = 0
    workers: int = 1
    backend: dict = field(default_factory=lambda: {"kind": "scripted"})
    encoder: dict = field(default_factory=lambda: {"kind": "hashed"})
    knowledge: dict = field(default_factory=lambda: {"kind": "offline"})
    run_config: RunConfig = field(default_factory=RunConfig)
    align_config: AlignmentConfig = field(default_factory=AlignmentConfig)
    params: CompletionParams = field(default_factory=CompletionParams)
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            obj = tomllib.loads(path.read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_mapping(obj, path.parent)

    @classmethod
    def from_mapping(cls, obj: Mapping[str, Any], base_dir: str | Path = ".") -> "ExperimentConfig":
        base = Path(base_dir)
        for section, body in obj.items():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            unknown = set(body) - _SECTIONS[section]
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")

        def resolve(p):
            return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

        run = obj.get("run", {})
        data = obj.get("data", {})
        if "dataset" not in data or "task_definition" not in data:
            raise ConfigError("[data] needs 'dataset' and 'task_definition'")
        backend = dict(obj.get("backend", {"kind": "scripted"}))
        try:
            return cls(
                dataset=resolve(data["dataset"]),
                task_definition=resolve(data["task_definition"]),
                run_dir=resolve(run.get("run_dir", "runs/latest")),
                store_root=resolve(run.get("store_root")),
                methods=list(obj.get("methods", {}).get("names", ["persona_agent"])),
                top_users=int(data.get("top_users", 100)),
                seed=int(run.get("seed", 0)),
                workers=int(run.get("workers", 1)),
                backend=backend,
                encoder=dict(obj.get("encoder", {"kind": "hashed"})),
                knowledge=dict(obj.get("knowledge", {"kind": "offline"})),
                run_config=RunConfig(**obj.get("agent", {})),
                align_config=AlignmentConfig(**obj.get("alignment", {})),
                params=CompletionParams(
                    temperature=float(backend.get("temperature", 0.1)),
                    max_tokens=int(backend.get("max_tokens", 1024)),
                ),
                base_dir=base,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def _path(self, p) -> Path:
        return p if Path(p).is_absolute() else self.base_dir / p

    def make_backend(self) -> ChatBackend:
        kind = self.backend.get("kind", "scripted")
        if kind == "scripted":
            if "fixture" not in self.backend:
                raise ConfigError("scripted backend needs a 'fixture' path")
            return ScriptedBackend(ScriptedFixture.load(self._path(self.backend["fixture"])))
        if kind == "http":
            base = self.backend.get("base_url") or os.environ.get(ENV_API_BASE)
            model = self.backend.get("model") or os.environ.get(ENV_MODEL)
            if not base or not model:
                raise ConfigError(f"http backend needs base_url/model or {ENV_API_BASE}/{ENV_MODEL}")
            key = os.environ.get(self.backend.get("api_key_env", ENV_API_KEY))
            return HttpBackend(base, model, key, api_format=self.backend.get("api_format", "openai"))
        raise ConfigError(f"unknown backend kind {kind!r}")

    def make_encoder(self):
        kind = self.encoder.get("kind", "hashed")
        if kind == "hashed":
            return HashedTfIdfEncoder(int(self.encoder.get("dim", DEFAULT_DIM)), int(self.encoder.get("seed", 0)))
        if kind == "external":
            token_env = self.encoder.get("token_env")
            return ExternalEncoder(
                self.encoder["endpoint"],
                int(self.encoder["dim"]),
                self.encoder.get("model", "external"),
                os.environ.get(token_env) if token_env else None,
            )
        raise ConfigError(f"unknown encoder kind {kind!r}")

    def make_knowledge(self):
        kind = self.knowledge.get("kind", "offline")
        if kind == "offline":
            path = self.knowledge.get("path")
            return OfflineKnowledge.load(self._path(path)) if path else OfflineKnowledge()
        if kind == "wikipedia":
            return WikipediaKnowledge(
                self.knowledge.get("base_url", "https://en.wikipedia.org/api/rest_v1"),
                float(self.knowledge.get("timeout", 5.0)),
            )
        raise ConfigError(f"unknown knowledge kind {kind!r}")
