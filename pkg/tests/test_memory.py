import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from persona_agent.core import InteractionRecord, Metadata, TaskKind
from persona_agent.embedding import HashedTfIdfEncoder, cosine_similarity
from persona_agent.llm import EmptyCompletion, ScriptedBackend
from persona_agent.memory import (
    DEFAULT_K,
    EmptyBuffer,
    EncoderMismatch,
    EpisodicBuffer,
    FormatError,
    SummarizationPrompt,
    append_interaction,
    load_buffer,
    load_profile,
    retrieve,
    save_buffer,
    save_profile,
    summarize_profile,
)

TOPICS = ["noir detective film", "space opera saga", "romantic comedy", "war documentary", "horror slasher",
          "animated musical", "courtroom drama", "heist thriller", "western showdown", "superhero origin"]


def rec(q, a="x", ts=0):
    return InteractionRecord(q, a, Metadata(ts))


def test_append_to_empty(encoder):
    buf = EpisodicBuffer.empty("u1", encoder)
    append_interaction(buf, rec("q"), encoder)
    assert len(buf) == 1 and len(buf.embeddings) == 1


def test_append_earlier_timestamp_goes_first(encoder):
    buf = EpisodicBuffer.from_records("u1", [rec("a", ts=5), rec("b", ts=9)], encoder)
    buf.append(rec("c", ts=1), encoder)
    assert buf.records[0].query == "c"


def test_shuffled_appends_match_sort_oracle(encoder):
    rng = random.Random(5)
    records = [rec(f"q{i}", ts=rng.randint(0, 30)) for i in range(100)]
    buf = EpisodicBuffer.empty("u1", encoder)
    for r in records:
        buf.append(r, encoder)
    assert buf.records == sorted(records, key=lambda r: r.timestamp)  # stable: ties by insertion
    assert buf.embeddings == [encoder.embed(r.render()) for r in buf.records]


def test_encoder_mismatch(encoder):
    buf = EpisodicBuffer.empty("u1", encoder)
    with pytest.raises(EncoderMismatch):
        buf.append(rec("q"), HashedTfIdfEncoder(dim=64, seed=1))


def test_self_retrieval(encoder):
    buf = EpisodicBuffer.from_records("u1", [rec("noir detective film", "classic")], encoder)
    assert retrieve(buf, "noir detective film", 1, encoder)[0].query == "noir detective film"


def test_default_k_is_four(encoder):
    buf = EpisodicBuffer.from_records("u1", [rec(t) for t in TOPICS], encoder)
    assert DEFAULT_K == 4
    assert len(retrieve(buf, "film", encoder=encoder)) == 4


def test_retrieve_empty_buffer(encoder):
    with pytest.raises(EmptyBuffer):
        retrieve(EpisodicBuffer.empty("u1", encoder), "q", 4, encoder)


def test_retrieve_matches_brute_force_on_30_records(encoder):
    rng = random.Random(3)
    records = [rec(f"{rng.choice(TOPICS)} {rng.choice(TOPICS)} #{i}", rng.choice(["a", "b"]), i) for i in range(30)]
    buf = EpisodicBuffer.from_records("u1", records, encoder)
    query = "space opera with a heist"
    qv = encoder.embed(query)
    sims = [cosine_similarity(qv, encoder.embed(r.render())) for r in buf.records]
    oracle = sorted(range(30), key=lambda i: (-sims[i], i))
    assert retrieve(buf, query, 30, encoder) == [buf.records[i] for i in oracle]
    got = retrieve(buf, query, 4, encoder)
    assert all(r in buf.records for r in got)
    scores = [cosine_similarity(qv, encoder.embed(r.render())) for r in got]
    assert scores == sorted(scores, reverse=True)


def test_without_masks_records(encoder):
    buf = EpisodicBuffer.from_records("u1", [rec(t, ts=i) for i, t in enumerate(TOPICS)], encoder)
    view = buf.without([2])
    assert TOPICS[2] not in [r.query for r in view.records] and len(view) == len(buf) - 1
    assert len(buf) == len(TOPICS)


def test_summarize_passthrough(encoder):
    records = [rec(t, "classic", i) for i, t in enumerate(TOPICS[:5])]
    buf = EpisodicBuffer.from_records("u1", records, encoder)
    llm = ScriptedBackend([("Summarize", "likes classic films")])
    prof = summarize_profile(buf, SummarizationPrompt(), llm, TaskKind.MOVIE_TAGGING)
    assert prof.text == "likes classic films" and prof.source_count == 5
    assert len(llm.call_log) == 1
    prompt = llm.call_log[0].prompt
    assert all(t in prompt for t in TOPICS[:5])


def test_summarize_empty_reply(encoder):
    buf = EpisodicBuffer.from_records("u1", [rec("q")], encoder)
    with pytest.raises(EmptyCompletion):
        summarize_profile(buf, SummarizationPrompt(), ScriptedBackend([], default=""), TaskKind.MOVIE_TAGGING)


def test_summarize_budget_keeps_recent_records(encoder):
    records = [rec(f"query number {i:03d} " + "pad " * 40, "a", i) for i in range(120)]
    buf = EpisodicBuffer.from_records("u1", records, encoder)
    llm = ScriptedBackend([], default="p")
    summarize_profile(buf, SummarizationPrompt(), llm, TaskKind.MOVIE_TAGGING, char_budget=2000)
    prompt = llm.call_log[0].prompt
    assert "query number 119" in prompt and "query number 070" in prompt
    assert "query number 069" not in prompt


def test_summarization_template_requires_slots():
    with pytest.raises(ValueError):
        SummarizationPrompt("no slots here {task}")


def test_save_load_empty(tmp_path, encoder):
    buf = EpisodicBuffer.empty("u1", encoder)
    save_buffer(buf, tmp_path)
    assert load_buffer(tmp_path, "u1", encoder) == buf


def test_save_load_byte_identical(tmp_path, encoder):
    buf = EpisodicBuffer.from_records("u1", [rec(t, "a", i) for i, t in enumerate(TOPICS[:3])], encoder)
    d = save_buffer(buf, tmp_path)
    before = {p.name: p.read_bytes() for p in d.iterdir()}
    loaded = load_buffer(tmp_path, "u1", encoder)
    assert loaded == buf
    save_buffer(loaded, tmp_path)
    assert {p.name: p.read_bytes() for p in d.iterdir()} == before
    lines = (d / "episodic.jsonl").read_text().splitlines()
    assert set(json.loads(lines[0])) == {"query", "ground_truth", "timestamp", "session_id", "extra"}


def test_corrupted_embedding_length(tmp_path, encoder):
    buf = EpisodicBuffer.from_records("u1", [rec(t, "a", i) for i, t in enumerate(TOPICS[:3])], encoder)
    d = save_buffer(buf, tmp_path)
    meta = json.loads((d / "embeddings.json").read_text())
    meta["vectors"][1] = meta["vectors"][1][:-1]
    (d / "embeddings.json").write_text(json.dumps(meta))
    with pytest.raises(FormatError, match="record 1"):
        load_buffer(tmp_path, "u1", encoder)


def test_fingerprint_mismatch_reported(tmp_path, encoder):
    save_buffer(EpisodicBuffer.from_records("u1", [rec("q")], encoder), tmp_path)
    with pytest.raises(FormatError, match="hashed-tfidf"):
        load_buffer(tmp_path, "u1", HashedTfIdfEncoder(dim=32))


def test_profile_round_trip(tmp_path, encoder):
    buf = EpisodicBuffer.from_records("u1", [rec("q")], encoder)
    prof = summarize_profile(buf, SummarizationPrompt(), ScriptedBackend([], default="likes noir"),
                             TaskKind.MOVIE_TAGGING, clock=lambda: 42)
    save_profile(prof, tmp_path)
    assert load_profile(tmp_path, "u1") == prof


record_st = st.builds(
    lambda q, a, ts, sid, extra: InteractionRecord(q, a, Metadata(ts, sid, extra)),
    st.text(min_size=1, max_size=30),
    st.text(min_size=1, max_size=10),
    st.integers(0, 10**10),
    st.none() | st.text(max_size=5),
    st.dictionaries(st.text(max_size=4), st.text(max_size=4), max_size=2),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(record_st, max_size=8))
def test_persistence_round_trip_identity(tmp_path_factory, records):
    enc = HashedTfIdfEncoder(dim=16)
    root = tmp_path_factory.mktemp("store")
    buf = EpisodicBuffer.from_records("user", records, enc)
    save_buffer(buf, root)
    assert load_buffer(root, "user", enc) == buf
