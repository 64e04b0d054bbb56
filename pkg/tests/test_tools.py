import random
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from persona_agent.core import InteractionRecord, Metadata
from persona_agent.memory import EpisodicBuffer, retrieve
from persona_agent.tools import (
    DEFAULT_REGISTRY,
    NO_ARTICLE,
    NO_HISTORY,
    USER_MEMORY_DESCRIPTION,
    WIKIPEDIA_DESCRIPTION,
    OfflineKnowledge,
    Source,
    ToolCall,
    ToolContext,
    WikipediaKnowledge,
    dispatch,
    knowledge_lookup,
    memory_rag,
)


def rec(q, a, ts=0):
    return InteractionRecord(q, a, Metadata(ts))


def test_offline_lookup(knowledge):
    res = knowledge_lookup("Albert Einstein", knowledge)
    assert res.ok and res.output.startswith("German-born") and res.source is Source.KNOWLEDGE


def test_offline_miss(knowledge):
    res = knowledge_lookup("Nonexistent Topic", knowledge)
    assert not res.ok and res.output == NO_ARTICLE


@pytest.fixture
def wiki_stub():
    class Handler(BaseHTTPRequestHandler):
        def do_GET(self):
            if self.path.endswith("/page/summary/Albert_Einstein"):
                body = b'{"extract": "physicist"}'
                self.send_response(200)
            else:
                body = b'{"title": "Not found."}'
                self.send_response(404)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *a):
            pass

    httpd = HTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    yield f"http://127.0.0.1:{httpd.server_port}"
    httpd.shutdown()


def test_live_provider_hit_and_404(wiki_stub):
    provider = WikipediaKnowledge(wiki_stub, timeout=5)
    assert knowledge_lookup("Albert Einstein", provider).output == "physicist"
    res = knowledge_lookup("Missing Page", provider)
    assert not res.ok and res.output == NO_ARTICLE


def test_live_provider_unreachable_is_observation():
    res = knowledge_lookup("x", WikipediaKnowledge("http://127.0.0.1:9", timeout=1))
    assert not res.ok and "lookup failed" in res.output


def test_memory_rag_singleton(encoder):
    buf = EpisodicBuffer.from_records("u", [rec("noir film", "classic")], encoder)
    res = memory_rag("anything", buf, 4, encoder)
    assert res.ok and res.output == "Past Q: noir film\nUser's answer: classic"


def test_memory_rag_empty(encoder):
    res = memory_rag("q", EpisodicBuffer.empty("u", encoder), 4, encoder)
    assert not res.ok and res.output == NO_HISTORY


def test_memory_rag_matches_retrieve(encoder):
    rng = random.Random(1)
    words = ["noir", "space", "comedy", "war", "romance", "heist", "alien", "court"]
    records = [rec(" ".join(rng.sample(words, 3)) + f" #{i}", rng.choice(["a", "b", "c"]), i) for i in range(30)]
    buf = EpisodicBuffer.from_records("u", records, encoder)
    res = memory_rag("space heist", buf, 4, encoder)
    expected = [f"Past Q: {r.query}\nUser's answer: {r.ground_truth}" for r in retrieve(buf, "space heist", 4, encoder)]
    assert res.output.split("\n\n") == expected


def test_memory_rag_stays_within_own_buffer(encoder):
    mine = EpisodicBuffer.from_records("u1", [rec(f"mine {i}", "a", i) for i in range(6)], encoder)
    res = memory_rag("other", mine, 4, encoder)
    own = {f"Past Q: {r.query}" for r in mine.records} | {f"User's answer: {r.ground_truth}" for r in mine.records}
    assert all(line in own for line in res.output.splitlines() if line)


def test_dispatch_routing_and_unknown(encoder, knowledge):
    ctx = ToolContext(EpisodicBuffer.empty("u", encoder), encoder, knowledge)
    assert dispatch(DEFAULT_REGISTRY, ToolCall("wikipedia", "Albert Einstein"), ctx).source is Source.KNOWLEDGE
    res = dispatch(DEFAULT_REGISTRY, ToolCall("frobnicate", "x"), ctx)
    assert not res.ok and res.output == "unknown tool frobnicate; available: wikipedia, user_memory"


def test_dispatch_counts_match(encoder):
    calls = {"wikipedia": 0, "user_memory": 0}

    class CountingKnowledge:
        def summary(self, topic):
            calls["wikipedia"] += 1
            return "s"

    class CountingEncoder:
        dim = encoder.dim
        fingerprint = encoder.fingerprint

        def embed(self, text):
            calls["user_memory"] += 1
            return encoder.embed(text)

        def embed_many(self, texts):
            return [encoder.embed(t) for t in texts]

    buf = EpisodicBuffer.from_records("u", [rec("q", "a")], encoder)
    ctx = ToolContext(buf, CountingEncoder(), CountingKnowledge())
    rng = random.Random(0)
    sent = {"wikipedia": 0, "user_memory": 0}
    for _ in range(100):
        name = rng.choice(list(sent))
        sent[name] += 1
        dispatch(DEFAULT_REGISTRY, ToolCall(name, "topic"), ctx)
    assert calls == sent


def test_dispatch_never_raises(encoder):
    class Broken:
        def summary(self, topic):
            raise RuntimeError("boom")

    ctx = ToolContext(EpisodicBuffer.empty("u", encoder), encoder, Broken())
    for call in [ToolCall("wikipedia", "x"), ToolCall("wikipedia", ""), ToolCall("user_memory", "x"), ToolCall("", "")]:
        assert dispatch(DEFAULT_REGISTRY, call, ctx).ok is False


def test_descriptions_are_verbatim():
    assert "e.g., 'Albert Einstein', 'World War II'" in WIKIPEDIA_DESCRIPTION
    assert "Requirement: must use this tool at least once to answer the question." in USER_MEMORY_DESCRIPTION
