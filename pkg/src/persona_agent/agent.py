"""Persona-conditioned ReAct agent: persona, text protocol and the episode loop."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from persona_agent.core import PersonaAgentError, UserId
from persona_agent.embedding import Encoder
from persona_agent.llm import ChatBackend, ChatMessage, CompletionParams, Role
from persona_agent.memory import PERSONA_FILE, EpisodicBuffer, user_dir
from persona_agent.tools import (
    USER_MEMORY,
    KnowledgeProvider,
    ToolCall,
    ToolContext,
    ToolResult,
    ToolSpec,
    describe_tools,
    dispatch,
)

PROFILE_SLOT = "[Initial Semantic Memory]"

PERSONA_TEMPLATE = f"""\
You are a helpful personalized assistant. Take more than two actions to infer the user preference and answer the question. User summary: {PROFILE_SLOT}

STRICT RULES: when using tools, always:

1. Think step-by-step about what information you need.

2. MUST use at least TWO tools to answer the question.

3. Use tools precisely and deliberately and try to get the most accurate information from different tools.

4. Provide clear, concise responses. Do not give explanation in the final answer."""

# Used by the ReAct baseline and the no-persona ablation: same rules, no user.
GENERIC_SYSTEM_PROMPT = """\
You are a helpful assistant. Take more than two actions to answer the question.

STRICT RULES: when using tools, always:

1. Think step-by-step about what information you need.

2. MUST use at least TWO tools to answer the question.

3. Use tools precisely and deliberately and try to get the most accurate information from different tools.

4. Provide clear, concise responses. Do not give explanation in the final answer."""

NO_PROFILE_TEXT = "no summary available"

PROTOCOL_INSTRUCTIONS = """\
Use the following format:

Thought: reason about what information you need next
Action: the tool to use, one of [{names}]
Action Input: the input for the tool
Observation: the result of the action
... (Thought/Action/Action Input/Observation can repeat)
Thought: I now know the final answer
Final Answer: the final answer to the question"""

PROTOCOL_REMINDER = (
    "Your last reply did not follow the format. Reply with either "
    "'Action: <tool>' and 'Action Input: <input>' lines, or a 'Final Answer: <answer>' line."
)
TOOL_RULE_REMINDER = "You must use at least two tools before answering"
MEMORY_RULE_REMINDER = "You must use the user_memory tool at least once before answering"

STOP_SEQUENCES = ("\nObservation:",)


class ProtocolError(PersonaAgentError):
    pass


@dataclass(frozen=True)
class Persona:
    user: UserId
    text: str
    version: int = 0
    history: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.version != len(self.history):
            raise ValueError("persona version must equal the number of prior texts")

    def updated(self, text: str) -> "Persona":
        return Persona(self.user, text, self.version + 1, self.history + (self.text,))

    def to_json(self) -> dict:
        return {"user": self.user, "text": self.text, "version": self.version, "history": list(self.history)}

    @classmethod
    def from_json(cls, obj: dict) -> "Persona":
        return cls(UserId(obj["user"]), obj["text"], int(obj["version"]), tuple(obj["history"]))


def init_persona(user: str, profile=None) -> Persona:
    """Version-0 persona: the initialization template with the profile text inlined.

    ``profile`` is a :class:`SemanticProfile` or plain text; ``None`` renders a
    placeholder (used when memory is ablated).
    """
    summary = NO_PROFILE_TEXT if profile is None else getattr(profile, "text", profile)
    if not summary:
        raise ValueError("profile text must be non-empty")
    return Persona(UserId(user), PERSONA_TEMPLATE.replace(PROFILE_SLOT, summary))


def generic_persona(user: str) -> Persona:
    return Persona(UserId(user), GENERIC_SYSTEM_PROMPT)


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Thought:
    text: str


@dataclass(frozen=True)
class Action:
    call: ToolCall
    thought: str = ""


@dataclass(frozen=True)
class Observation:
    result: ToolResult
    tool_name: str


@dataclass(frozen=True)
class FinalAnswer:
    text: str
    forced: bool = False


AgentStep = Thought | Action | Observation | FinalAnswer


def _field(line: str, name: str) -> str | None:
    head, sep, rest = line.partition(":")
    if sep and head.strip().strip("*").strip().lower() == name:
        return rest.strip()
    return None


def parse_action(llm_output: str) -> AgentStep:
    """Read one model turn in the Thought/Action/Action Input/Final Answer protocol.

    Whichever of ``Action`` or ``Final Answer`` comes first wins. Output carrying
    neither marker is returned as a :class:`Thought`.
    """
    lines = llm_output.strip().splitlines()
    thought_lines: list[str] = []
    for i, line in enumerate(lines):
        final = _field(line, "final answer")
        if final is not None:
            rest = [final] + [ln for ln in lines[i + 1:]]
            return FinalAnswer("\n".join(rest).strip())
        tool = _field(line, "action")
        if tool is not None:
            tool_input = ""
            for later in lines[i + 1:]:
                value = _field(later, "action input")
                if value is not None:
                    tool_input = value
                    break
            thought = " ".join(thought_lines).strip()
            return Action(ToolCall(tool.strip("`'\" "), tool_input.strip("`\" ")), thought)
        t = _field(line, "thought")
        thought_lines.append(t if t is not None else line.strip())
    return Thought(" ".join(thought_lines).strip())


# ---------------------------------------------------------------------------
# episode
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    max_steps: int = 8
    min_tool_calls: int = 2
    k_memory: int = 4

    def __post_init__(self) -> None:
        if self.max_steps < 1 or self.k_memory < 1:
            raise ValueError("max_steps and k_memory must be positive")
        if not 0 <= self.min_tool_calls <= self.max_steps:
            raise ValueError("min_tool_calls must lie in [0, max_steps]")


@dataclass
class Trajectory:
    query: str
    persona_version: int
    steps: list[AgentStep] = field(default_factory=list)
    forced: bool = False
    forced_reason: str | None = None

    @property
    def final_answer(self) -> str:
        last = self.steps[-1] if self.steps else None
        return last.text if isinstance(last, FinalAnswer) else ""

    @property
    def tool_calls(self) -> list[ToolCall]:
        return [s.call for s in self.steps if isinstance(s, Action)]

    def step_records(self) -> list[dict]:
        out = []
        for s in self.steps:
            if isinstance(s, Thought):
                out.append({"kind": "thought", "text": s.text})
            elif isinstance(s, Action):
                out.append({"kind": "action", "tool": s.call.tool_name, "input": s.call.input, "thought": s.thought})
            elif isinstance(s, Observation):
                out.append({"kind": "observation", "tool": s.tool_name, **s.result.to_json()})
            else:
                out.append(
                    {"kind": "final_answer", "text": s.text, "forced": s.forced, "forced_reason": self.forced_reason}
                )
        return out


def write_trajectory(traj: Trajectory, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in traj.step_records():
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    return path


def read_trajectory(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _observation_message(tool: str, result: ToolResult) -> ChatMessage:
    status = "" if result.ok else " [error]"
    return ChatMessage(Role.USER, f"Observation ({tool}){status}: {result.output}")


def build_user_prompt(query: str, registry: Sequence[ToolSpec]) -> str:
    names = ", ".join(spec.name for spec in registry)
    return (
        "You have access to the following tools:\n\n"
        f"{describe_tools(registry)}\n\n"
        f"{PROTOCOL_INSTRUCTIONS.format(names=names)}\n\n"
        f"Question: {query}"
    )


def run_episode(
    persona: Persona,
    query: str,
    buffer: EpisodicBuffer,
    registry: Sequence[ToolSpec],
    llm: ChatBackend,
    config: RunConfig,
    *,
    encoder: Encoder,
    knowledge: KnowledgeProvider,
    params: CompletionParams | None = None,
) -> tuple[str, Trajectory]:
    """Run one think/act/observe episode under ``persona``.

    Every backend call carries ``persona.text`` as its system message. A
    protocol violation or an answer that breaks the tool rules earns a single
    re-prompt; the second tool-rule violation is accepted and the answer is
    flagged as forced.

    Returns:
        The final answer text and the full trajectory.

    Raises:
        ProtocolError: if a turn without any marker follows a protocol reminder.
    """
    params = params or CompletionParams()
    if not params.stop_sequences:
        params = dataclasses.replace(params, stop_sequences=STOP_SEQUENCES)
    ctx = ToolContext(buffer=buffer, encoder=encoder, knowledge=knowledge, k=config.k_memory)
    memory_available = any(spec.name == USER_MEMORY for spec in registry)
    messages = [ChatMessage(Role.SYSTEM, persona.text), ChatMessage(Role.USER, build_user_prompt(query, registry))]
    traj = Trajectory(query=query, persona_version=persona.version)
    last_thought = ""
    reminded = False
    enforced = False
    n_calls = 0
    memory_used = False

    for _ in range(config.max_steps):
        output = llm.complete(messages, params)
        step = parse_action(output)
        messages.append(ChatMessage(Role.ASSISTANT, output))

        if isinstance(step, Thought):
            if reminded:
                raise ProtocolError(f"model ignored the protocol twice: {output[:200]!r}")
            reminded = True
            last_thought = step.text or last_thought
            traj.steps.append(step)
            messages.append(ChatMessage(Role.USER, PROTOCOL_REMINDER))
            continue
        reminded = False

        if isinstance(step, Action):
            last_thought = step.thought or last_thought
            result = dispatch(registry, step.call, ctx)
            n_calls += 1
            memory_used = memory_used or (memory_available and step.call.tool_name == USER_MEMORY)
            traj.steps.append(step)
            traj.steps.append(Observation(result, step.call.tool_name))
            messages.append(_observation_message(step.call.tool_name, result))
            continue

        short = n_calls < config.min_tool_calls
        missing_memory = memory_available and config.min_tool_calls > 0 and not memory_used
        if short or missing_memory:
            if not enforced:
                enforced = True
                traj.steps.append(Thought(f"premature answer: {step.text}"))
                reminder = TOOL_RULE_REMINDER if short else MEMORY_RULE_REMINDER
                if short and missing_memory:
                    reminder += ", including user_memory at least once"
                messages.append(ChatMessage(Role.USER, reminder + "."))
                continue
            traj.forced, traj.forced_reason = True, "tool_rule"
            traj.steps.append(FinalAnswer(step.text, forced=True))
            return step.text, traj
        traj.steps.append(step)
        return step.text, traj

    traj.forced, traj.forced_reason = True, "step_budget"
    traj.steps.append(FinalAnswer(last_thought, forced=True))
    return last_thought, traj


def run_direct(
    persona: Persona,
    question: str,
    llm: ChatBackend,
    *,
    context: str | None = None,
    params: CompletionParams | None = None,
) -> str:
    """Single completion with no tool loop; retrieved history may be inlined."""
    parts = []
    if context:
        parts.append(f"Relevant interaction histories from the user memory:\n\n{context}")
    parts.append(f"Question: {question}")
    parts.append("Give only the final answer.")
    messages = [ChatMessage(Role.SYSTEM, persona.text), ChatMessage(Role.USER, "\n\n".join(parts))]
    return llm.complete(messages, params).strip()


def save_persona(persona: Persona, store_root: str | Path) -> Path:
    path = user_dir(store_root, persona.user) / PERSONA_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(persona.to_json(), ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_persona(store_root: str | Path, user: str) -> Persona:
    return Persona.from_json(json.loads((user_dir(store_root, user) / PERSONA_FILE).read_text(encoding="utf-8")))
