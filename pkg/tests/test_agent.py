import pytest

from persona_agent.agent import (
    GENERIC_SYSTEM_PROMPT,
    Action,
    FinalAnswer,
    Observation,
    Persona,
    ProtocolError,
    RunConfig,
    Thought,
    init_persona,
    parse_action,
    read_trajectory,
    run_episode,
    write_trajectory,
)
from persona_agent.core import InteractionRecord, Metadata, TaskKind
from persona_agent.llm import Rule, ScriptedBackend, ScriptedFixture
from persona_agent.memory import EpisodicBuffer, SemanticProfile
from persona_agent.tools import DEFAULT_REGISTRY, ToolCall

MEM = "Thought: need history\nAction: user_memory\nAction Input: noir films"
WIKI = "Thought: background\nAction: wikipedia\nAction Input: Film"


def profile(text, user="u1"):
    return SemanticProfile(user, text, 3, 0, TaskKind.MOVIE_TAGGING)


def test_init_persona_substitutes_profile():
    p = init_persona("u1", profile("likes noir films"))
    assert "User summary: likes noir films" in p.text and p.version == 0 and p.history == ()


def test_init_persona_distinct_users_share_skeleton():
    a = init_persona("u1", profile("likes noir films")).text
    b = init_persona("u2", profile("likes space operas", "u2")).text
    assert a != b
    assert a.replace("likes noir films", "") == b.replace("likes space operas", "")


def test_init_persona_strict_rules():
    text = init_persona("u1", profile("x")).text
    for line in [
        "STRICT RULES: when using tools, always:",
        "1. Think step-by-step about what information you need.",
        "2. MUST use at least TWO tools to answer the question.",
        "3. Use tools precisely and deliberately and try to get the most accurate information from different tools.",
        "4. Provide clear, concise responses. Do not give explanation in the final answer.",
    ]:
        assert line in text
    assert text.startswith("You are a helpful personalized assistant.")


def test_persona_versioning():
    p = init_persona("u1", "summary").updated("v1").updated("v2")
    assert p.version == 2 and p.history[0].startswith("You are") and p.history[1] == "v1"
    with pytest.raises(ValueError):
        Persona("u1", "t", version=1)


def test_parse_canonical_action():
    step = parse_action(MEM)
    assert step == Action(ToolCall("user_memory", "noir films"), "need history")


def test_parse_final_answer():
    assert parse_action("Final Answer: classic") == FinalAnswer("classic")


def test_parse_free_text_is_thought():
    assert parse_action("I think the answer is classic") == Thought("I think the answer is classic")


def test_parse_first_marker_wins():
    assert isinstance(parse_action("Action: wikipedia\nAction Input: x\nFinal Answer: y"), Action)
    assert isinstance(parse_action("Thought: t\nFinal Answer: y\nAction: wikipedia"), FinalAnswer)


@pytest.fixture
def buffer(encoder):
    recs = [InteractionRecord(f"noir film {i}", "classic", Metadata(i)) for i in range(5)]
    return EpisodicBuffer.from_records("u1", recs, encoder)


def episode(llm, buffer, encoder, knowledge, config=RunConfig(), persona=None):
    persona = persona or init_persona("u1", "likes noir")
    return run_episode(persona, "Tag this movie", buffer, DEFAULT_REGISTRY, llm, config,
                       encoder=encoder, knowledge=knowledge)


def sequence_backend(outputs):
    """Scripted backend answering by turn number (counts assistant turns in the prompt)."""
    rules = []
    for n in reversed(range(len(outputs))):
        rules.append(Rule(r"(?s)" + r".*\nASSISTANT: " * n, outputs[n], True))
    return ScriptedBackend(ScriptedFixture(tuple(rules)))


def test_compliant_episode(buffer, encoder, knowledge):
    llm = sequence_backend([MEM, WIKI, "Final Answer: classic"])
    answer, traj = episode(llm, buffer, encoder, knowledge)
    assert answer == "classic" and not traj.forced
    kinds = [type(s) for s in traj.steps]
    assert kinds == [Action, Observation, Action, Observation, FinalAnswer]
    assert [c.tool_name for c in traj.tool_calls] == ["user_memory", "wikipedia"]


def test_min_tool_enforcement(buffer, encoder, knowledge):
    llm = sequence_backend(["Final Answer: classic", MEM, WIKI, "Final Answer: classic"])
    answer, traj = episode(llm, buffer, encoder, knowledge)
    assert answer == "classic" and not traj.forced
    assert len(traj.tool_calls) == 2
    assert "You must use at least two tools before answering" in llm.call_log[1].prompt


def test_enforcement_only_once_then_flagged(buffer, encoder, knowledge):
    llm = sequence_backend(["Final Answer: a", "Final Answer: b"])
    answer, traj = episode(llm, buffer, encoder, knowledge)
    assert answer == "b" and traj.forced and traj.forced_reason == "tool_rule"
    assert len(llm.call_log) == 2


def test_memory_tool_required(buffer, encoder, knowledge):
    llm = sequence_backend([WIKI, WIKI, "Final Answer: x", MEM, "Final Answer: classic"])
    answer, traj = episode(llm, buffer, encoder, knowledge)
    assert not traj.forced and "user_memory" in [c.tool_name for c in traj.tool_calls]


def test_budget_exhaustion(buffer, encoder, knowledge):
    llm = ScriptedBackend([], default=MEM)
    answer, traj = episode(llm, buffer, encoder, knowledge, RunConfig(max_steps=1, min_tool_calls=1))
    assert traj.forced and traj.forced_reason == "step_budget"
    assert len(traj.steps) <= 3 and isinstance(traj.steps[-1], FinalAnswer)
    assert answer == "need history"


def test_protocol_reprompt_once(buffer, encoder, knowledge):
    llm = sequence_backend(["I think the answer is classic", "Final Answer: classic"])
    answer, traj = episode(llm, buffer, encoder, knowledge, RunConfig(min_tool_calls=0))
    assert answer == "classic" and len(llm.call_log) == 2
    assert isinstance(traj.steps[0], Thought)


def test_protocol_error_after_reprompt(buffer, encoder, knowledge):
    llm = ScriptedBackend([], default="rambling")
    with pytest.raises(ProtocolError):
        episode(llm, buffer, encoder, knowledge)


def test_system_message_is_persona_on_every_call(buffer, encoder, knowledge):
    persona = init_persona("u1", "likes noir")
    llm = sequence_backend(["Final Answer: a", MEM, WIKI, "Final Answer: classic"])
    episode(llm, buffer, encoder, knowledge, persona=persona)
    assert all(c.messages[0].role.value == "system" and c.messages[0].content == persona.text for c in llm.call_log)
    assert all(c.params.temperature == 0.1 for c in llm.call_log)


def test_tool_descriptions_follow_persona(buffer, encoder, knowledge):
    llm = sequence_backend([MEM, WIKI, "Final Answer: classic"])
    episode(llm, buffer, encoder, knowledge)
    prompt = llm.call_log[0].prompt
    assert prompt.index("STRICT RULES") < prompt.index("Tool: wikipedia") < prompt.index("Tool: user_memory")


def test_replay_is_identical(buffer, encoder, knowledge, tmp_path):
    outs = [MEM, WIKI, "Final Answer: classic"]
    _, t1 = episode(sequence_backend(outs), buffer, encoder, knowledge)
    _, t2 = episode(sequence_backend(outs), buffer, encoder, knowledge)
    assert t1 == t2
    p1 = write_trajectory(t1, tmp_path / "a.traj.jsonl")
    p2 = write_trajectory(t2, tmp_path / "b.traj.jsonl")
    assert p1.read_bytes() == p2.read_bytes()
    assert [r["kind"] for r in read_trajectory(p1)] == ["action", "observation", "action", "observation", "final_answer"]


def test_no_other_user_text(encoder, knowledge):
    mine = EpisodicBuffer.from_records("u1", [InteractionRecord("mine secret-one", "a", Metadata(0))], encoder)
    llm = sequence_backend([MEM, WIKI, "Final Answer: a"])
    episode(llm, mine, encoder, knowledge)
    assert not any("secret-two" in c.prompt for c in llm.call_log)
    assert any("secret-one" in c.prompt for c in llm.call_log)


def test_generic_prompt_has_no_user_summary():
    assert "User summary" not in GENERIC_SYSTEM_PROMPT


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(max_steps=1, min_tool_calls=2)
