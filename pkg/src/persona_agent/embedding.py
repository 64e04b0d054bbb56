"""Text encoders, cosine similarity and exhaustive top-k ranking."""

from __future__ import annotations

import hashlib
import json
import math
from fractions import Fraction
import re
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from persona_agent.core import PersonaAgentError

Vector = tuple[float, ...]

DEFAULT_DIM = 256

_TOKEN_RE = re.compile(r"[a-z0-9]+")

STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been
    before being below between both but by can could did do does doing down during
    each few for from further had has have having he her here hers herself him
    himself his how i if in into is it its itself just me more most my myself no nor
    not of off on once only or other our ours ourselves out over own same she should
    so some such than that the their theirs them themselves then there these they
    this those through to too under until up very was we were what when where which
    while who whom why will with would you your yours yourself yourselves
    """.split()
)


class DimensionMismatch(PersonaAgentError):
    pass


class ExternalEncoderError(PersonaAgentError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumerics."""
    return _TOKEN_RE.findall(text.lower())


class Encoder(Protocol):
    dim: int

    @property
    def fingerprint(self) -> str: ...

    def embed(self, text: str) -> Vector: ...

    def embed_many(self, texts: Sequence[str]) -> list[Vector]: ...


@dataclass(frozen=True)
class HashedTfIdfEncoder:
    """Deterministic feature-hashing encoder.

    Each non-stopword token is hashed into one of ``dim`` buckets (blake2b over
    ``"{seed}:{token}"``), weighted by its count, and the vector is L2-normalized.
    """

    dim: int = DEFAULT_DIM
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise ValueError("dim must be positive")

    @property
    def fingerprint(self) -> str:
        return f"hashed-tfidf/v1/dim={self.dim}/seed={self.seed}"

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, text: str) -> Vector:
        counts = Counter(t for t in tokenize(text) if t not in STOPWORDS)
        values = [0.0] * self.dim
        for token, n in counts.items():
            values[self.bucket(token)] += float(n)
        norm = math.sqrt(math.fsum(v * v for v in values))
        if norm == 0.0:
            return tuple(values)
        return tuple(v / norm for v in values)

    def embed_many(self, texts: Sequence[str]) -> list[Vector]:
        return [self.embed(t) for t in texts]


@dataclass(frozen=True)
class ExternalEncoder:
    """Encoder backed by an HTTP endpoint.

    Wire format: POST ``{"texts": [...]}``, response ``{"vectors": [[...], ...]}``.
    """

    endpoint: str
    dim: int
    model: str = "external"
    token: str | None = field(default=None, repr=False)
    timeout: float = 30.0

    @property
    def fingerprint(self) -> str:
        return f"external/{self.model}/dim={self.dim}"

    def embed(self, text: str) -> Vector:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> list[Vector]:
        body = json.dumps({"texts": list(texts)}).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read())
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ExternalEncoderError(f"embedding request to {self.endpoint} failed: {exc}") from exc
        vectors = payload.get("vectors") if isinstance(payload, dict) else None
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise ExternalEncoderError("malformed embedding response: expected one vector per text")
        out = []
        for vec in vectors:
            if len(vec) != self.dim:
                raise ExternalEncoderError(f"expected dim {self.dim}, got {len(vec)}")
            v = tuple(float(x) for x in vec)
            if not all(math.isfinite(x) for x in v):
                raise ExternalEncoderError("embedding contains non-finite components")
            out.append(v)
        return out


def embed(encoder: Encoder, text: str) -> Vector:
    return encoder.embed(text)


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0.0 if either is the zero vector."""
    if len(a) != len(b):
        raise DimensionMismatch(f"dimension mismatch: {len(a)} != {len(b)}")
    # fsum is order-independent, so exact ties between differently laid out vectors survive
    dot = math.fsum(x * y for x, y in zip(a, b))
    na = math.fsum(x * x for x in a)
    nb = math.fsum(y * y for y in b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    sim = dot / (math.sqrt(na) * math.sqrt(nb))
    return max(-1.0, min(1.0, sim))


def _scaled_ints(v: Sequence[float]) -> list[int]:
    # every float is n / 2**j; bring the vector to one power-of-two denominator
    ratios = [float(x).as_integer_ratio() for x in v]
    den = max((d for _, d in ratios), default=1)
    return [n * (den // d) for n, d in ratios]


def _exact_key(query_ints: list[int], v: Sequence[float]) -> Fraction:
    """Exact ``sign(cos) * cos**2``; the common scale factors cancel in the ratio."""
    vi = _scaled_ints(v)
    dot = sum(a * b for a, b in zip(query_ints, vi))
    nq = sum(a * a for a in query_ints)
    nv = sum(b * b for b in vi)
    if nq == 0 or nv == 0:
        return Fraction(0)
    return Fraction((1 if dot >= 0 else -1) * dot * dot, nq * nv)


# Float cosines of mathematically equal similarities can differ in the last bits.
# Runs of scores closer than this are re-ranked exactly.
_TIE_WINDOW = 1e-9


def top_k(query: Sequence[float], corpus: Sequence[Sequence[float]], k: int) -> list[int]:
    """Indices of the ``k`` corpus vectors most similar to ``query``.

    Exhaustive scan; equal similarities keep the smaller index first. Near-equal
    float scores are resolved with exact rational arithmetic, so true ties are
    never broken by rounding noise.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = [cosine_similarity(query, v) for v in corpus]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    out: list[int] = []
    query_ints: list[int] | None = None
    start = 0
    while start < len(order) and len(out) < k:
        end = start + 1
        while end < len(order) and scores[order[end - 1]] - scores[order[end]] < _TIE_WINDOW:
            end += 1
        group = order[start:end]
        if len(group) > 1:
            if query_ints is None:
                query_ints = _scaled_ints(query)
            exact = {i: _exact_key(query_ints, corpus[i]) for i in group}
            group.sort(key=lambda i: (-exact[i], i))
        out.extend(group)
        start = end
    return out[:k]
