"""Embedding providers, cosine similarity, and rate-limit backoff.

Two providers ship with the toolkit:

* ``ReferenceEmbedder`` — a deterministic, offline hashed character-trigram
  embedder. It is the default for tests, fixtures, and desk-scale runs.
* ``RemoteEmbedder`` — a JSON-over-HTTP client for an external embedding
  service. Throttle responses (HTTP 429 with an optional ``Retry-After``
  header) surface as :class:`ThrottledError`; :func:`embed_batch` turns
  those into waits governed by a :class:`BackoffPolicy`.

All similarity numbers within a run should come from one provider instance
so they are mutually comparable; the run manifest records the provider
identity for that reason.
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass
from typing import Callable, List, Optional, Protocol, Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    ExhaustedRetriesError,
    ThrottledError,
    TransportError,
    ZeroVectorError,
)

logger = logging.getLogger(__name__)

#: Vectors are plain float64 numpy arrays of a fixed per-provider dimension.
EmbeddingVector = np.ndarray

DEFAULT_DIMENSION = 256


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity a.b / (|a||b|) in double precision.

    Zero vectors are a hard error rather than a silent 0.0: a zero score
    would flow straight into evaluation metrics and corrupt them.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"cosine: shapes {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def reference_embedder(text: str, d: int = DEFAULT_DIMENSION) -> EmbeddingVector:
    """Deterministic offline embedding: hashed character trigrams.

    The text is padded with one boundary byte on each side, every character
    trigram is hashed with CRC-32, counts are folded into ``d`` buckets, and
    the result is L2-normalized. Identical text therefore always yields the
    bitwise-identical vector, across processes and platforms.

    Empty or whitespace-only text has no trigrams and returns the zero
    vector; downstream cosine calls on it fail loudly by design.
    """
    if d <= 0:
        raise ValueError("embedding dimension must be positive")
    vec = np.zeros(d, dtype=np.float64)
    marked = "\x02" + text + "\x03"
    data = marked.encode("utf-8")
    if len(data) < 3:
        return vec
    for i in range(len(data) - 2):
        bucket = zlib.crc32(data[i : i + 3]) % d
        vec[bucket] += 1.0
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


@dataclass(frozen=True)
class BackoffPolicy:
    """Exponential backoff with a cap: delay(i) = min(base * factor**i, max_delay)."""

    base_delay: float = 1.0
    factor: float = 2.0
    max_delay: float = 60.0
    max_attempts: int = 8

    def __post_init__(self) -> None:
        if self.base_delay <= 0 or self.max_delay <= 0:
            raise ValueError("delays must be strictly positive")
        if self.factor <= 1.0:
            raise ValueError("factor must exceed 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")


@dataclass(frozen=True)
class RateLimitSignal:
    """What the provider said about throttling. retry_after only when throttled."""

    status: str = "ok"  # "ok" | "throttled"
    retry_after: Optional[float] = None

    def __post_init__(self) -> None:
        if self.retry_after is not None and self.status != "throttled":
            raise ValueError("retry_after is only meaningful when throttled")


def next_delay(policy: BackoffPolicy, attempt: int, signal: RateLimitSignal) -> float:
    """Wait time in seconds before retry number ``attempt`` (0-based).

    A server-provided ``Retry-After`` wins exactly; otherwise the policy's
    exponential schedule applies. ``attempt >= max_attempts`` means the
    retry budget is spent.
    """
    if attempt < 0:
        raise ValueError("attempt must be non-negative")
    if attempt >= policy.max_attempts:
        raise ExhaustedRetriesError(
            f"retry budget exhausted after {policy.max_attempts} attempts"
        )
    if signal.retry_after is not None:
        return float(signal.retry_after)
    return min(policy.base_delay * policy.factor**attempt, policy.max_delay)


class EmbeddingProvider(Protocol):
    """Contract every embedding backend satisfies."""

    identity: str
    dimension: int

    def embed(self, texts: Sequence[str]) -> List[EmbeddingVector]:
        """One vector per text, order-preserving. May raise ThrottledError."""
        ...


class ReferenceEmbedder:
    """Provider wrapper around :func:`reference_embedder`. Pure, never throttles."""

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        self.dimension = dimension
        self.identity = f"reference-trigram-d{dimension}"

    def embed(self, texts: Sequence[str]) -> List[EmbeddingVector]:
        return [reference_embedder(t, self.dimension) for t in texts]


class RemoteEmbedder:
    """JSON-over-HTTP embedding client.

    Request body: ``{"texts": [...]}``; response: ``{"vectors": [[...], ...]}``.
    A 429 status raises :class:`ThrottledError` carrying the ``Retry-After``
    header when the server sent one. Anything else unexpected raises
    :class:`TransportError`.
    """

    def __init__(self, endpoint: str, dimension: int, timeout: float = 30.0):
        self.endpoint = endpoint
        self.dimension = dimension
        self.timeout = timeout
        self.identity = f"remote:{endpoint}"

    def embed(self, texts: Sequence[str]) -> List[EmbeddingVector]:
        import requests

        if not texts:
            return []
        try:
            resp = requests.post(
                self.endpoint, json={"texts": list(texts)}, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"embedding request failed: {exc}") from exc
        if resp.status_code == 429:
            raise ThrottledError(retry_after=_parse_retry_after(resp.headers.get("Retry-After")))
        if resp.status_code != 200:
            raise TransportError(f"embedding endpoint returned {resp.status_code}")
        try:
            vectors = resp.json()["vectors"]
        except (ValueError, KeyError) as exc:
            raise TransportError(f"malformed embedding response: {exc}") from exc
        if len(vectors) != len(texts):
            raise TransportError(
                f"embedding count mismatch: {len(vectors)} vectors for {len(texts)} texts"
            )
        out = []
        for v in vectors:
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != (self.dimension,):
                raise TransportError(
                    f"expected dimension {self.dimension}, got shape {arr.shape}"
                )
            out.append(arr)
        return out


def _parse_retry_after(raw: Optional[str]) -> Optional[float]:
    if raw is None:
        return None
    try:
        return float(raw)
    except ValueError:
        return None


def embed_batch(
    texts: Sequence[str],
    provider: EmbeddingProvider,
    policy: Optional[BackoffPolicy] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> List[EmbeddingVector]:
    """Embed texts through a provider, retrying throttles per the policy.

    Outputs are order-preserving: vector i embeds texts[i]. The ``sleep``
    hook exists so tests can run against a simulated clock and account for
    every waiting interval exactly.
    """
    if not texts:
        return []
    if policy is None:
        policy = BackoffPolicy()
    attempt = 0
    while True:
        try:
            vectors = provider.embed(texts)
        except ThrottledError as exc:
            signal = RateLimitSignal(status="throttled", retry_after=exc.retry_after)
            delay = next_delay(policy, attempt, signal)
            logger.info("throttled; waiting %.3fs (attempt %d)", delay, attempt)
            sleep(delay)
            attempt += 1
            continue
        if len(vectors) != len(texts):
            raise TransportError(
                f"provider returned {len(vectors)} vectors for {len(texts)} texts"
            )
        return vectors
