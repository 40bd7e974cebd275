"""Candidate re-ranking and the listwise training objective.

The scorer is an opaque contract (query + passages in, one scalar per
passage out); built-in scorers cover offline use and tests, and
``RemoteScorer`` speaks the JSON wire protocol so an external cross-encoder
can serve scores. The listwise objective is softmax cross-entropy between
model scores and a label distribution that spreads mass evenly over the
positive passages; its gradient has the closed form softmax(s) - y.

Wire protocol (JSON over HTTP):
    request  {"request_id": str, "query": str, "passages": [str, ...]}
    response {"request_id": str, "scores": [float, ...]}
The scores array must match the passages array in length. Canonical
encoding is UTF-8 JSON with sorted keys and compact separators; golden
fixtures under ``fixtures/scorer_wire/`` are stored byte-exactly in that
form.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import EmptyCandidateError, NoPositiveError, ScorerProtocolError, TransportError
from .tokenization import tokenize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CandidateList:
    """A query with its retrieved passages and, when known, binary labels."""

    query: str
    passages: Tuple[str, ...]
    labels: Optional[Tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if not self.passages:
            raise EmptyCandidateError("a candidate list needs at least one passage")
        if self.labels is not None:
            if len(self.labels) != len(self.passages):
                raise ValueError("labels must align with passages")
            if any(l not in (0, 1) for l in self.labels):
                raise ValueError("labels must be binary")


@dataclass(frozen=True)
class RerankedCandidates:
    """Re-ranked passages with provenance back to the retrieval order."""

    query: str
    passages: Tuple[str, ...]
    scores: Optional[Tuple[float, ...]]
    original_ranks: Tuple[int, ...]
    labels: Optional[Tuple[int, ...]]
    fallback_used: bool = False


# ---------------------------------------------------------------------------
# Listwise math
# ---------------------------------------------------------------------------


def softmax_normalize(scores: Sequence[float]) -> np.ndarray:
    """Stable softmax: exp(s - max) / sum."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise EmptyCandidateError("softmax over an empty score list")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores must be finite")
    shifted = arr - arr.max()
    expd = np.exp(shifted)
    return expd / expd.sum()


def target_distribution(labels: Sequence[int]) -> np.ndarray:
    """y_i = r_i / sum(r): even mass over the positives."""
    arr = np.asarray(labels, dtype=np.float64)
    if arr.size == 0:
        raise EmptyCandidateError("no labels given")
    total = arr.sum()
    if total <= 0:
        raise NoPositiveError("a candidate list without positives has no target")
    return arr / total


def listwise_loss(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Cross-entropy -sum(y_i * log P_i), computed via log-sum-exp."""
    arr = np.asarray(scores, dtype=np.float64)
    y = target_distribution(labels)
    if arr.shape != y.shape:
        raise ValueError("scores and labels must align")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores must be finite")
    shifted = arr - arr.max()
    log_probs = shifted - np.log(np.exp(shifted).sum())
    return float(-np.dot(y, log_probs))


def listwise_loss_gradient(scores: Sequence[float], labels: Sequence[int]) -> np.ndarray:
    """d loss / d s_i = softmax(s)_i - y_i; entries sum to zero."""
    return softmax_normalize(scores) - target_distribution(labels)


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------


class ScorerContract(Protocol):
    identity: str
    max_input_tokens: int

    def score(self, query: str, passages: Sequence[str]) -> List[float]: ...


def truncate_pair(query: str, passage: str, max_tokens: int) -> Tuple[str, str]:
    """Joint truncation to the scorer's input budget, cutting the passage tail first."""
    q_tokens = tokenize(query)
    if len(q_tokens) > max_tokens:
        q_tokens = q_tokens[:max_tokens]
    room = max_tokens - len(q_tokens)
    p_tokens = tokenize(passage)[:room]
    return " ".join(q_tokens), " ".join(p_tokens)


class LexicalOverlapScorer:
    """Token-multiset overlap between query and passage, normalized by query size.

    Deterministic and dependency-free; stands in for a trained cross-encoder
    in offline pipelines and tests.
    """

    def __init__(self, max_input_tokens: int = 512):
        self.identity = "lexical-overlap"
        self.max_input_tokens = max_input_tokens

    def score(self, query: str, passages: Sequence[str]) -> List[float]:
        scores = []
        for passage in passages:
            q, p = truncate_pair(query, passage, self.max_input_tokens)
            q_counts = Counter(t.lower() for t in tokenize(q))
            p_counts = Counter(t.lower() for t in tokenize(p))
            common = sum((q_counts & p_counts).values())
            total = sum(q_counts.values())
            scores.append(common / total if total else 0.0)
        return scores


class RemoteScorer:
    """Wire-protocol client for an external scoring service."""

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        max_input_tokens: int = 512,
    ):
        self.endpoint = endpoint
        self.timeout = timeout
        self.max_input_tokens = max_input_tokens
        self.identity = f"remote:{endpoint}"
        self._counter = 0

    def score(self, query: str, passages: Sequence[str]) -> List[float]:
        import requests

        self._counter += 1
        request = ScoreRequest(
            request_id=f"req-{self._counter}", query=query, passages=tuple(passages)
        )
        try:
            resp = requests.post(
                self.endpoint,
                data=encode_score_request(request),
                headers={"Content-Type": "application/json"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"scorer request failed: {exc}") from exc
        if resp.status_code != 200:
            raise ScorerProtocolError(f"scorer returned status {resp.status_code}")
        response = decode_score_response(resp.content)
        validate_score_response(request, response)
        return list(response.scores)


# ---------------------------------------------------------------------------
# Re-ranking
# ---------------------------------------------------------------------------


def rerank_topk(
    candidates: CandidateList, scorer: ScorerContract, m: Optional[int] = None
) -> RerankedCandidates:
    """Reorder passages by descending score, stable on ties, truncated to m.

    A scorer failure must not block answering: the retrieval order is kept,
    the fallback flag is set, and the failure is logged.
    """
    n = len(candidates.passages)
    m = n if m is None else m
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}]")
    try:
        scores = scorer.score(candidates.query, candidates.passages)
        if len(scores) != n:
            raise ScorerProtocolError(
                f"scorer returned {len(scores)} scores for {n} passages"
            )
        if not all(np.isfinite(s) for s in scores):
            raise ScorerProtocolError("scorer returned non-finite scores")
    except Exception as exc:
        logger.warning("scorer %s failed (%s); keeping retrieval order", scorer.identity, exc)
        order = list(range(m))
        return RerankedCandidates(
            query=candidates.query,
            passages=tuple(candidates.passages[i] for i in order),
            scores=None,
            original_ranks=tuple(order),
            labels=_project_labels(candidates.labels, order),
            fallback_used=True,
        )
    order = sorted(range(n), key=lambda i: (-scores[i], i))[:m]
    return RerankedCandidates(
        query=candidates.query,
        passages=tuple(candidates.passages[i] for i in order),
        scores=tuple(float(scores[i]) for i in order),
        original_ranks=tuple(order),
        labels=_project_labels(candidates.labels, order),
        fallback_used=False,
    )


def _project_labels(
    labels: Optional[Tuple[int, ...]], order: List[int]
) -> Optional[Tuple[int, ...]]:
    if labels is None:
        return None
    return tuple(labels[i] for i in order)


# ---------------------------------------------------------------------------
# Wire codec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRequest:
    request_id: str
    query: str
    passages: Tuple[str, ...]


@dataclass(frozen=True)
class ScoreResponse:
    request_id: str
    scores: Tuple[float, ...]


def _canonical(obj) -> bytes:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )


def encode_score_request(request: ScoreRequest) -> bytes:
    return _canonical(
        {
            "request_id": request.request_id,
            "query": request.query,
            "passages": list(request.passages),
        }
    )


def decode_score_request(data: bytes) -> ScoreRequest:
    obj = _decode_json(data)
    request_id = obj.get("request_id")
    query = obj.get("query")
    passages = obj.get("passages")
    if not isinstance(request_id, str) or not isinstance(query, str):
        raise ScorerProtocolError("request_id and query must be strings")
    if not isinstance(passages, list) or not all(isinstance(p, str) for p in passages):
        raise ScorerProtocolError("passages must be a list of strings")
    if not passages:
        raise ScorerProtocolError("passages must be non-empty")
    return ScoreRequest(request_id=request_id, query=query, passages=tuple(passages))


def encode_score_response(response: ScoreResponse) -> bytes:
    return _canonical(
        {"request_id": response.request_id, "scores": list(response.scores)}
    )


def decode_score_response(data: bytes) -> ScoreResponse:
    obj = _decode_json(data)
    request_id = obj.get("request_id")
    scores = obj.get("scores")
    if not isinstance(request_id, str):
        raise ScorerProtocolError("request_id must be a string")
    if not isinstance(scores, list) or not all(
        isinstance(s, (int, float)) and not isinstance(s, bool) for s in scores
    ):
        raise ScorerProtocolError("scores must be a list of numbers")
    values = tuple(float(s) for s in scores)
    if not all(np.isfinite(v) for v in values):
        raise ScorerProtocolError("scores must be finite")
    return ScoreResponse(request_id=request_id, scores=values)


def validate_score_response(request: ScoreRequest, response: ScoreResponse) -> None:
    if response.request_id != request.request_id:
        raise ScorerProtocolError(
            f"response id {response.request_id!r} does not match request {request.request_id!r}"
        )
    if len(response.scores) != len(request.passages):
        raise ScorerProtocolError(
            f"{len(response.scores)} scores for {len(request.passages)} passages"
        )


def _decode_json(data: bytes) -> dict:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ScorerProtocolError(f"malformed JSON payload: {exc}") from exc
    if not isinstance(obj, dict):
        raise ScorerProtocolError("payload must be a JSON object")
    return obj
