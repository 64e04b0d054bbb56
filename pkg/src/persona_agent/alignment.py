"""Test-time persona alignment via textual feedback.

Each iteration simulates the user's latest interactions under the current
persona, asks a critic for feedback on every simulated answer, and rewrites
the persona from the collected feedback.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from persona_agent.agent import Persona, RunConfig, run_direct, run_episode
from persona_agent.embedding import Encoder
from persona_agent.llm import (
    CallRecord,
    ChatBackend,
    ChatMessage,
    CompletionParams,
    EmptyCompletion,
    Role,
    TapBackend,
    call_scope,
)
from persona_agent.memory import EmptyBuffer, EpisodicBuffer, render_history, retrieve
from persona_agent.tools import DEFAULT_REGISTRY, KnowledgeProvider, ToolSpec

log = logging.getLogger(__name__)

GRADIENT_TEMPLATE = """\
You are a meticulous and critical evaluator of personalized AI agent responses.

Analyze the following and give the feedback on how to improve the system prompt to align with the user's preferences.

Question: [Question]

Expected Answer: [Ground Truth]

Agent Response: [Response]

Your feedback should focus on how to adjust the persona system prompt to tailor the agent’s responses to the individual user's unique characteristics. Make sure the feedback is concise and and clear.

Tips:

1. Explain on how to improve the search keywords of tools for this user.

2. Take the user's prior interactions, preferences, and any personalization aspects into consideration.

3. Provide explicit description for user profile and preferences that is not specific to this task.

Feedback:"""

UPDATE_TEMPLATE = """\
You are a prompt engineering assistant tasked with refining the personal agent system prompts for improved user preference alignment.

Current system prompt: [Current Persona]

Provided Feedback: [Aggregated Feedback]

Based on the feedback above, generate an updated system prompt that explicitly highlights the user's unique preferences.
Ensure that the prompt instructs the agent to align its responses with the user's preferences, including detailed user profile or preferences.
Please maintain a helpful and clear tone in the system prompt.

New system prompt:"""

FEEDBACK_SEPARATOR = "\n---\n"
NO_RESPONSE = "(no response)"


def fill(template: str, values: Mapping[str, str]) -> str:
    """Substitute ``[Slot]`` placeholders in one pass so inserted text is never re-expanded."""
    pattern = re.compile("|".join(re.escape(f"[{k}]") for k in values))
    return pattern.sub(lambda m: values[m.group()[1:-1]], template)


@dataclass(frozen=True)
class AlignmentConfig:
    batch_size: int = 3
    iterations: int = 1
    allow_self_retrieval: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("alignment batch size must be >= 1")
        if self.iterations < 1:
            raise ValueError("alignment iterations must be >= 1; disable alignment via the ablation flag instead")


@dataclass(frozen=True)
class BatchItem:
    index: int
    query: str
    ground_truth: str
    agent_response: str | None = None


@dataclass(frozen=True)
class TextualGradient:
    feedback: str
    item_index: int


@dataclass
class AgentContext:
    """Everything needed to run the agent for one user."""

    llm: ChatBackend
    encoder: Encoder
    knowledge: KnowledgeProvider
    run_config: RunConfig = field(default_factory=RunConfig)
    registry: Sequence[ToolSpec] = DEFAULT_REGISTRY
    use_tools: bool = True
    use_memory: bool = True
    params: CompletionParams | None = None
    question_suffix: str = ""
    trajectories: list = field(default_factory=list)

    def answer(self, persona: Persona, query: str, buffer: EpisodicBuffer) -> str:
        question = f"{query}\n\n{self.question_suffix}" if self.question_suffix else query
        if self.use_tools:
            text, traj = run_episode(
                persona,
                question,
                buffer,
                self.registry,
                self.llm,
                self.run_config,
                encoder=self.encoder,
                knowledge=self.knowledge,
                params=self.params,
            )
            self.trajectories.append(traj)
            return text
        context = None
        if self.use_memory and buffer.records:
            context = render_history(retrieve(buffer, query, self.run_config.k_memory, self.encoder))
        return run_direct(persona, question, self.llm, context=context, params=self.params)


def build_batch(buffer: EpisodicBuffer, n: int) -> list[BatchItem]:
    """The ``min(n, N)`` most recent records, oldest first."""
    if not buffer.records:
        raise EmptyBuffer(f"no history stored for user {buffer.user}")
    if n < 1:
        raise ValueError("n must be >= 1")
    return [
        BatchItem(i, buffer.records[i].query, buffer.records[i].ground_truth) for i in buffer.latest(n)
    ]


def simulate_responses(
    batch: Sequence[BatchItem],
    persona: Persona,
    buffer: EpisodicBuffer,
    context: AgentContext,
    *,
    allow_self_retrieval: bool = False,
) -> list[BatchItem]:
    """Answer every batch query under ``persona``.

    Unless ``allow_self_retrieval`` is set, the record being simulated is
    masked from memory so the agent cannot read its own ground truth.
    """
    out = []
    for j, item in enumerate(batch):
        view = buffer if allow_self_retrieval else buffer.without([item.index])
        with call_scope(phase="simulate", batch_item=j, record_index=item.index):
            response = context.answer(persona, item.query, view)
        out.append(BatchItem(item.index, item.query, item.ground_truth, response))
    return out


def render_gradient_prompt(query: str, agent_response: str, ground_truth: str) -> str:
    return fill(GRADIENT_TEMPLATE, {"Question": query, "Ground Truth": ground_truth, "Response": agent_response})


def compute_gradient(
    query: str,
    agent_response: str,
    ground_truth: str,
    llm: ChatBackend,
    *,
    item_index: int = 0,
    params: CompletionParams | None = None,
) -> TextualGradient:
    if not (query and agent_response and ground_truth):
        raise ValueError("query, agent response and ground truth must be non-empty")
    prompt = render_gradient_prompt(query, agent_response, ground_truth)
    reply = llm.complete([ChatMessage(Role.USER, prompt)], params).strip()
    if not reply:
        raise EmptyCompletion("critic returned empty feedback")
    return TextualGradient(reply, item_index)


def render_update_prompt(persona_text: str, gradients: Sequence[TextualGradient]) -> str:
    feedback = FEEDBACK_SEPARATOR.join(g.feedback for g in gradients)
    return fill(UPDATE_TEMPLATE, {"Current Persona": persona_text, "Aggregated Feedback": feedback})


def update_persona(
    persona: Persona,
    gradients: Sequence[TextualGradient],
    llm: ChatBackend,
    *,
    params: CompletionParams | None = None,
) -> Persona:
    if not gradients:
        raise ValueError("at least one gradient is required")
    prompt = render_update_prompt(persona.text, gradients)
    reply = llm.complete([ChatMessage(Role.USER, prompt)], params).strip()
    if not reply:
        raise EmptyCompletion("update step returned an empty persona")
    return persona.updated(reply)


def align(
    buffer: EpisodicBuffer,
    init: Persona,
    config: AlignmentConfig,
    context: AgentContext,
    *,
    audit_log: str | Path | None = None,
) -> Persona:
    """Optimize ``init`` for ``config.iterations`` rounds and return the result.

    The updated persona is carried into the next round. If a round fails
    midway, the last fully updated persona is returned and a warning logged.
    """
    if not buffer.records:
        raise EmptyBuffer(f"no history stored for user {buffer.user}")
    tap = TapBackend(context.llm)
    ctx = AgentContext(**{**context.__dict__, "llm": tap, "trajectories": []})
    persona = init
    try:
        for it in range(config.iterations):
            with call_scope(phase="align", iteration=it):
                try:
                    batch = build_batch(buffer, config.batch_size)
                    batch = simulate_responses(
                        batch, persona, buffer, ctx, allow_self_retrieval=config.allow_self_retrieval
                    )
                    grads = []
                    for j, item in enumerate(batch):
                        with call_scope(phase="gradient", batch_item=j):
                            grads.append(
                                compute_gradient(
                                    item.query,
                                    item.agent_response or NO_RESPONSE,
                                    item.ground_truth,
                                    tap,
                                    item_index=j,
                                    params=context.params,
                                )
                            )
                    with call_scope(phase="update"):
                        persona = update_persona(persona, grads, tap, params=context.params)
                except Exception as exc:
                    log.warning(
                        "alignment for user %s stopped in iteration %d: %s; keeping persona v%d",
                        buffer.user, it + 1, exc, persona.version,
                    )
                    break
    finally:
        context.trajectories.extend(ctx.trajectories)
        if audit_log is not None:
            write_audit_log(tap.call_log, audit_log)
    return persona


def write_audit_log(calls: Sequence[CallRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in calls:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
    return path
