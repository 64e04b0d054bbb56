import csv
import json
import random
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from persona_agent.agent import Persona, save_persona
from persona_agent.analysis import export_embeddings, jaccard, jaccard_matrix, read_embeddings
from persona_agent.cli import main
from persona_agent.embedding import HashedTfIdfEncoder, tokenize

import worlds

WORDS = "likes dislikes film noir jazz slow cinema comedy romance dark humour vintage space".split()


def test_jaccard_example():
    assert jaccard({"a", "b"}, {"b", "c"}) == pytest.approx(1 / 3)
    assert jaccard(set(), set()) == 1.0


def random_personas(rng, n):
    return [Persona(f"p{i}", " ".join(rng.choices(WORDS, k=rng.randint(0, 8)))) for i in range(n)]


def test_matrix_matches_set_oracle():
    personas = random_personas(random.Random(11), 10)
    m = jaccard_matrix(personas)
    for i, a in enumerate(personas):
        for j, b in enumerate(personas):
            sa, sb = set(a.text.lower().split()), set(b.text.lower().split())
            want = 1.0 if i == j or not (sa | sb) else float(Fraction(len(sa & sb), len(sa | sb)))
            assert m.values[i][j] == pytest.approx(want, abs=1e-12)


@given(st.lists(st.text(alphabet="abc XYZ-", max_size=20), min_size=1, max_size=6))
def test_matrix_symmetric_bounded(texts):
    m = jaccard_matrix([Persona(f"u{i}", t) for i, t in enumerate(texts)])
    for i in range(len(texts)):
        assert m.values[i][i] == 1.0
        for j in range(len(texts)):
            assert m.values[i][j] == m.values[j][i]
            assert 0.0 <= m.values[i][j] <= 1.0


def test_empty_pairs_reported():
    m = jaccard_matrix([Persona("a", ""), Persona("b", "!!"), Persona("c", "x")])
    assert (0, 1) in m.empty_pairs and m.values[0][1] == 1.0
    assert m.values[0][2] == 0.0


def test_export_round_trip(tmp_path):
    enc = HashedTfIdfEncoder(32, 5)
    personas = random_personas(random.Random(2), 4)
    path = export_embeddings(personas, enc, tmp_path / "e" / "emb.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["user_id", *(f"v{i}" for i in range(32))]
    assert len(rows) == 5 and all(len(r) == 33 for r in rows)
    back = read_embeddings(path)
    for p in personas:
        assert back[p.user] == enc.embed(p.text)


# ---------------------------------------------------------------- CLI


def seed_store(root, texts):
    for uid, text in texts.items():
        save_persona(Persona(uid, text), root)
    return root


def test_cli_similarity(tmp_path, capsys):
    store = seed_store(tmp_path / "s", {"u1": "likes jazz", "u2": "likes noir"})
    out = tmp_path / "sim.csv"
    assert main(["analyze", "similarity", "--store", str(store), "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["user_id", "u1", "u2"]
    assert [len(r) for r in rows] == [3, 3, 3]
    assert float(rows[1][2]) == pytest.approx(1 / 3, abs=1e-6)
    assert capsys.readouterr().out == out.read_text()


def test_cli_embeddings(tmp_path, capsys):
    store = seed_store(tmp_path / "s", {"u1": "likes jazz", "u2": "likes noir"})
    out = tmp_path / "emb.csv"
    assert main(["analyze", "embeddings", "--store", str(store), "--out", str(out), "--dim", "16"]) == 0
    assert read_embeddings(out)["u2"] == HashedTfIdfEncoder(16, 0).embed("likes noir")


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["bench"], ["analyze"], ["analyze", "similarity"]])
def test_cli_usage_errors(argv, capsys):
    assert main(argv) == 1


def test_cli_runtime_errors(tmp_path, capsys):
    assert main(["analyze", "similarity", "--store", str(tmp_path / "missing")]) == 2
    assert main(["bench", "--config", str(tmp_path / "missing.toml")]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_bench_and_inspect(tmp_path, capsys):
    cfg = worlds.write_world(tmp_path, n_users=2, methods=("persona_agent",))
    assert main(["bench", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "persona_agent" in out and "accuracy=1.0000" in out
    results = json.loads((tmp_path / "run" / "results.json").read_text())
    assert results["reports"][0]["accuracy"] == 1.0
    traj = tmp_path / "run" / "persona_agent" / "u01" / "0.traj.jsonl"
    assert main(["inspect", str(traj)]) == 0
    shown = capsys.readouterr().out
    assert "action: user_memory(" in shown and "final answer: " + worlds.preferred(1) in shown
    sim = main(["analyze", "similarity", "--store", str(tmp_path / "run" / "store")])
    assert sim == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 3


def test_cli_align(tmp_path, capsys):
    cfg = worlds.write_world(tmp_path, n_users=2, methods=("persona_agent",))
    store = tmp_path / "store"
    assert main(["align", "--config", str(cfg), "--user", "u01", "--store", str(store)]) == 0
    diff = capsys.readouterr().out
    assert diff.startswith("--- persona v0\n+++ persona v1")
    assert worlds.marker("u01") in diff
    saved = json.loads((store / "u01" / "persona.json").read_text())
    assert saved["version"] == 1
    assert {p.name for p in (store / "u01").iterdir()} >= {"episodic.jsonl", "embeddings.json", "profile.json"}
    # second run starts from the saved persona
    assert main(["align", "--config", str(cfg), "--user", "u01", "--store", str(store)]) == 0
    assert "v2" in capsys.readouterr().out
    assert main(["align", "--config", str(cfg), "--user", "nobody", "--store", str(store)]) == 2
