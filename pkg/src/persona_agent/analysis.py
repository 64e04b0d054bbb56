"""Persona analysis: pairwise Jaccard similarity and embedding export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from persona_agent.agent import Persona
from persona_agent.embedding import Encoder, tokenize

TOKENIZATION = "lowercase, split on non-alphanumerics, token sets"


@dataclass(frozen=True)
class SimilarityMatrix:
    user_ids: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]
    # pairs where both personas had no tokens and were scored 1.0 by convention
    empty_pairs: tuple[tuple[int, int], ...] = ()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["user_id", *self.user_ids])
        for uid, row in zip(self.user_ids, self.values):
            w.writerow([uid, *(f"{v:.6f}" for v in row)])
        return buf.getvalue()


def jaccard(a: set[str], b: set[str]) -> float:
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def jaccard_matrix(personas: Sequence[Persona]) -> SimilarityMatrix:
    if not personas:
        raise ValueError("need at least one persona")
    sets = [set(tokenize(p.text)) for p in personas]
    n = len(sets)
    rows = [[0.0] * n for _ in range(n)]
    empty = []
    for i in range(n):
        for j in range(i, n):
            v = 1.0 if i == j else jaccard(sets[i], sets[j])
            rows[i][j] = rows[j][i] = v
            if not sets[i] and not sets[j]:
                empty.append((i, j))
    return SimilarityMatrix(
        tuple(p.user for p in personas), tuple(tuple(r) for r in rows), tuple(empty)
    )


def export_embeddings(personas: Sequence[Persona], encoder: Encoder, path: str | Path) -> Path:
    """Write one ``user_id,v0..v{dim-1}`` row per persona; floats use ``repr`` so they round-trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vectors = encoder.embed_many([p.text for p in personas])
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", *(f"v{i}" for i in range(encoder.dim))])
        for p, vec in zip(personas, vectors):
            w.writerow([p.user, *(repr(float(x)) for x in vec)])
    return path


def read_embeddings(path: str | Path) -> dict[str, tuple[float, ...]]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return {r[0]: tuple(float(x) for x in r[1:]) for r in rows[1:]}
