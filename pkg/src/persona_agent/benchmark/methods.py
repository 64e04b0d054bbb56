"""Baselines and PersonaAgent variants, each producing one prediction per test query."""

from __future__ import annotations

import json
import logging
import random
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from persona_agent.agent import (
    GENERIC_SYSTEM_PROMPT,
    Persona,
    RunConfig,
    generic_persona,
    init_persona,
    write_trajectory,
)
from persona_agent.alignment import AgentContext, AlignmentConfig, align
from persona_agent.core import (
    InteractionRecord,
    ParseFailure,
    PersonaAgentError,
    Prediction,
    TaskKind,
    UserId,
    parse_label,
)
from persona_agent.embedding import Encoder
from persona_agent.llm import ChatBackend, ChatMessage, CompletionParams, Role, call_scope
from persona_agent.memory import (
    TASK_DESCRIPTIONS,
    EpisodicBuffer,
    SemanticProfile,
    SummarizationPrompt,
    render_history,
    retrieve,
    save_buffer,
    save_profile,
    summarize_profile,
)
from persona_agent.tools import DEFAULT_REGISTRY, WIKIPEDIA_TOOL, KnowledgeProvider

from persona_agent.benchmark.data import UserDataset

log = logging.getLogger(__name__)

MEMBANK_CHUNK = 20
ICL_DEFAULT_K = 4

MEMBANK_TEMPLATE = (
    "You maintain a long-term memory note about a user for the task of {task}.\n\n"
    "Current memory note: {note}\n\n"
    "New interactions:\n\n{history}\n\n"
    "Rewrite the memory note so it captures the user's lasting preferences. Write only the note."
)


@dataclass(frozen=True)
class AblationFlags:
    alignment: bool = True
    persona: bool = True
    memory: bool = True
    action: bool = True


@dataclass(frozen=True)
class Method:
    """A method kind plus its parameter: ``k`` for ICL/RAG/PAG, flags for PersonaAgent."""

    kind: str
    k: int | None = None
    flags: AblationFlags = AblationFlags()

    KINDS = ("direct", "icl", "rag", "pag", "react", "membank", "persona_agent")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}")
        if self.kind in ("icl", "rag", "pag") and (self.k is None or self.k < 1):
            raise ValueError(f"{self.kind} needs k >= 1")

    @property
    def name(self) -> str:
        if self.kind in ("icl", "rag", "pag"):
            return f"{self.kind}-{self.k}"
        if self.kind == "membank":
            return "membank-like"
        if self.kind == "persona_agent":
            off = [n for n in ("alignment", "persona", "memory", "action") if not getattr(self.flags, n)]
            return "persona_agent" + "".join(f"-no_{n}" for n in off)
        return self.kind


ABLATION_VARIANTS = (
    "persona_agent",
    "persona_agent-no_alignment",
    "persona_agent-no_persona",
    "persona_agent-no_memory",
    "persona_agent-no_action",
)


def parse_method(name: str) -> Method:
    """Inverse of :attr:`Method.name`, e.g. ``rag-4`` or ``persona_agent-no_memory``."""
    name = name.strip().lower()
    m = re.fullmatch(r"(icl|rag|pag)-(\d+)", name)
    if m:
        return Method(m.group(1), int(m.group(2)))
    if name == "icl":
        return Method("icl", ICL_DEFAULT_K)
    if name in ("direct", "react"):
        return Method(name)
    if name in ("membank", "membank-like"):
        return Method("membank")
    if name.startswith("persona_agent"):
        rest = name[len("persona_agent"):]
        off = re.findall(r"-no_([a-z]+)", rest)
        if "".join(f"-no_{o}" for o in off) != rest or not set(off) <= {"alignment", "persona", "memory", "action"}:
            raise ValueError(f"unknown method {name!r}")
        return Method("persona_agent", flags=AblationFlags(**{o: False for o in off}))
    raise ValueError(f"unknown method {name!r}")


@dataclass
class BenchContext:
    """Shared resources for running methods over many users."""

    llm: ChatBackend
    encoder: Encoder
    knowledge: KnowledgeProvider
    run_config: RunConfig = field(default_factory=RunConfig)
    align_config: AlignmentConfig = field(default_factory=AlignmentConfig)
    summary_prompt: SummarizationPrompt = field(default_factory=SummarizationPrompt)
    params: CompletionParams = field(default_factory=CompletionParams)
    seed: int = 0
    pool: Sequence[UserDataset] = ()
    run_dir: Path | None = None
    store_root: Path | None = None
    personas: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()
        self._buffers: dict[UserId, EpisodicBuffer] = {}
        self._profiles: dict[UserId, SemanticProfile | None] = {}

    def buffer(self, ds: UserDataset) -> EpisodicBuffer:
        with self._lock:
            buf = self._buffers.get(ds.user)
        if buf is None:
            buf = EpisodicBuffer.from_records(ds.user, ds.profile_records, self.encoder)
            with self._lock:
                buf = self._buffers.setdefault(ds.user, buf)
            if self.store_root is not None:
                save_buffer(buf, self.store_root)
        return buf

    def profile(self, ds: UserDataset) -> SemanticProfile | None:
        """Semantic profile, generated once per user and reused by every method."""
        with self._lock:
            if ds.user in self._profiles:
                return self._profiles[ds.user]
        buf = self.buffer(ds)
        profile = None
        if buf.records:
            try:
                with call_scope(phase="profile"):
                    profile = summarize_profile(
                        buf, self.summary_prompt, self.llm, ds.task, params=self.params,
                        clock=lambda: buf.records[-1].timestamp,
                    )
            except PersonaAgentError as exc:
                log.warning("profile generation failed for %s: %s", ds.user, exc)
        with self._lock:
            profile = self._profiles.setdefault(ds.user, profile)
        if profile is not None and self.store_root is not None:
            save_profile(profile, self.store_root)
        return profile

    def user_dir(self, method: Method, user: str) -> Path | None:
        if self.run_dir is None:
            return None
        return self.run_dir / method.name / user


def answer_instruction(task: TaskKind, labels: Sequence[str]) -> str:
    if task.is_rating:
        return "Answer with a single integer rating from 1 to 5."
    return "Answer with exactly one of the following labels: " + ", ".join(labels) + "."


def _single_prompt(query: str, instruction: str, blocks: Sequence[str] = (), system: str | None = None):
    body = "\n\n".join([*blocks, f"Question: {query}", instruction])
    msgs = [ChatMessage(Role.USER, body)]
    if system is not None:
        msgs.insert(0, ChatMessage(Role.SYSTEM, system))
    return msgs


def icl_demonstrations(ds: UserDataset, pool: Sequence[UserDataset], k: int, seed: int) -> list[InteractionRecord]:
    """``k`` profile records from *other* users, sampled with a per-user fixed seed."""
    candidates = [r for other in pool if other.user != ds.user for r in other.profile_records]
    rng = random.Random(f"{seed}:{ds.user}")
    return rng.sample(candidates, min(k, len(candidates)))


def membank_note(ds: UserDataset, ctx: BenchContext) -> str | None:
    """Running note re-summarized after every chunk of profile records."""
    note = None
    records = ds.profile_records
    for start in range(0, len(records), MEMBANK_CHUNK):
        chunk = records[start:start + MEMBANK_CHUNK]
        prompt = (
            MEMBANK_TEMPLATE.replace("{task}", TASK_DESCRIPTIONS[ds.task])
            .replace("{note}", note or "(empty)")
            .replace("{history}", render_history(chunk))
        )
        with call_scope(phase="membank", chunk=start // MEMBANK_CHUNK):
            reply = ctx.llm.complete([ChatMessage(Role.USER, prompt)], ctx.params).strip()
        note = reply or note
    return note


def _to_prediction(text: str, ds: UserDataset) -> Prediction:
    try:
        return parse_label(text, ds.task, ds.label_set)
    except ParseFailure:
        return Prediction.failure(text)


def _save_persona(persona: Persona, path: Path | None) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(persona.to_json(), ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


def run_method(method: Method, ds: UserDataset, ctx: BenchContext) -> list[Prediction]:
    """Predict every test record of one user with ``method``.

    Per-query failures become parse-failure predictions; the run continues.
    """
    with call_scope(method=method.name, user=ds.user):
        return _run_method(method, ds, ctx)


def _run_method(method: Method, ds: UserDataset, ctx: BenchContext) -> list[Prediction]:
    instruction = answer_instruction(ds.task, ds.label_set)
    udir = ctx.user_dir(method, ds.user)
    buffer = ctx.buffer(ds)
    kind = method.kind

    agent = None
    persona = None
    if kind in ("react", "membank", "persona_agent"):
        flags = method.flags
        agent = AgentContext(
            llm=ctx.llm,
            encoder=ctx.encoder,
            knowledge=ctx.knowledge,
            run_config=ctx.run_config,
            registry=DEFAULT_REGISTRY if flags.memory else (WIKIPEDIA_TOOL,),
            use_tools=flags.action,
            use_memory=flags.memory,
            params=ctx.params,
            question_suffix=instruction,
        )
        if kind == "react":
            persona = generic_persona(ds.user)
        elif kind == "membank":
            note = membank_note(ds, ctx)
            text = GENERIC_SYSTEM_PROMPT
            if note:
                text += f"\n\nLong-term memory note about the user: {note}"
            persona = Persona(ds.user, text)
        elif flags.persona:
            profile = ctx.profile(ds) if flags.memory else None
            persona = init_persona(ds.user, profile)
            if flags.alignment and buffer.records:
                audit = udir / "align.log.jsonl" if udir else None
                persona = align(buffer, persona, ctx.align_config, agent, audit_log=audit)
                for j, traj in enumerate(agent.trajectories):
                    if udir:
                        write_trajectory(traj, udir / f"align-{j}.traj.jsonl")
                agent.trajectories.clear()
        else:
            persona = generic_persona(ds.user)
        ctx.personas[(method.name, ds.user)] = persona
        _save_persona(persona, udir / "persona.json" if udir else None)

    preds = []
    for i, rec in enumerate(ds.test_records):
        with call_scope(phase="eval", query_index=i):
            try:
                if agent is not None:
                    text = agent.answer(persona, rec.query, buffer)
                    if agent.use_tools and udir:
                        write_trajectory(agent.trajectories[-1], udir / f"{i}.traj.jsonl")
                else:
                    text = _single_shot(kind, method.k, rec.query, instruction, ds, buffer, ctx)
            except PersonaAgentError as exc:
                log.warning("%s failed on %s/%d: %s", method.name, ds.user, i, exc)
                preds.append(Prediction.failure(""))
                continue
        preds.append(_to_prediction(text, ds))
    return preds


def _single_shot(kind, k, query, instruction, ds, buffer, ctx) -> str:
    blocks: list[str] = []
    if kind == "icl":
        demos = icl_demonstrations(ds, ctx.pool, k, ctx.seed)
        blocks.append(
            "Examples:\n\n"
            + "\n\n".join(f"Example Q: {r.query}\nExample answer: {r.ground_truth}" for r in demos)
        )
    elif kind in ("rag", "pag"):
        if kind == "pag":
            profile = ctx.profile(ds)
            if profile is not None:
                blocks.append(f"User profile: {profile.text}")
        if buffer.records:
            blocks.append(
                "Relevant past interactions of this user:\n\n"
                + render_history(retrieve(buffer, query, k, ctx.encoder))
            )
    return ctx.llm.complete(_single_prompt(query, instruction, blocks), ctx.params).strip()
