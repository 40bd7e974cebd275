"""The nine-way evaluation battery for retrieval-augmented QA runs.

Cosine-based metrics (answer relevance, context relevance, groundedness,
answer-source match, context coverage, over-retrieval penalty) all use one
embedding provider per run so values stay mutually comparable. The retrieval
context for the relevance/groundedness metrics is the newline-joined
concatenation of the retrieved texts in rank order; a per-chunk mean is
available as an explicitly non-default mode.

Faithfulness takes the set-membership formulation literally: a statement
counts as supported when, after normalization (lowercasing, whitespace
collapse, terminal punctuation stripped), it is contained verbatim in some
retrieved context. Fluency is a pluggable scorer psi returning [0, 10],
normalized to [0, 1]; the default is a deterministic heuristic documented on
:func:`heuristic_fluency` so an LLM judge can be wired in without touching
the metric layer.

Instances that fail a metric's precondition get a per-metric null with a
recorded reason instead of a silent zero, and batch aggregation reports
coverage alongside means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .chunking import segment_sentences
from .embedding import EmbeddingProvider, ReferenceEmbedder, cosine
from .errors import EmptyContextError, EmptyStatementsError
from .tokenization import tokenize

logger = logging.getLogger(__name__)

METRIC_NAMES = ("AR", "CR", "GR", "FIM", "CC", "ASM", "LF", "ORP", "FT")

_TERMINAL_PUNCT = ".!?。！？"


@dataclass(frozen=True)
class EvalInstance:
    """One QA record plus the run artifacts needed to score it."""

    file_name: str
    question: str
    answer: str
    answer_source: str
    generated_response: str
    retrieved: Tuple[Tuple[str, str], ...]  # (file_id, context text) in rank order
    source_file_id: str


FluencyScorer = Callable[[str], float]


def heuristic_fluency(text: str) -> float:
    """Deterministic stand-in for an LLM fluency judge, on the [0, 10] scale.

    Closed form: with T whitespace tokens, S sentences (min 1), mean length
    m = T/S and type-token ratio ttr = unique(T)/T (lowercased),

        length_score = m/6          if m < 6
                       1            if 6 <= m <= 28
                       max(0, 1 - (m - 28)/28)   otherwise
        psi = 10 * (0.6 * length_score + 0.4 * ttr)

    Empty text scores 0.
    """
    tokens = [t.lower() for t in tokenize(text)]
    if not tokens:
        return 0.0
    sentences = segment_sentences(text)
    mean_len = len(tokens) / max(1, len(sentences))
    if mean_len < 6:
        length_score = mean_len / 6
    elif mean_len <= 28:
        length_score = 1.0
    else:
        length_score = max(0.0, 1.0 - (mean_len - 28) / 28)
    ttr = len(set(tokens)) / len(tokens)
    return 10.0 * (0.6 * length_score + 0.4 * ttr)


@dataclass(frozen=True)
class MetricConfig:
    tau: float = 0.7
    fluency_scorer: FluencyScorer = field(default=heuristic_fluency, repr=False)
    embedder: EmbeddingProvider = field(default_factory=ReferenceEmbedder, repr=False)
    context_mode: str = "concat"  # "concat" (default) | "mean"

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.context_mode not in ("concat", "mean"):
            raise ValueError("context_mode must be 'concat' or 'mean'")


@dataclass
class EvalResult:
    """Nine metric values; a None entry carries its reason in ``errors``."""

    AR: Optional[float] = None
    CR: Optional[float] = None
    GR: Optional[float] = None
    FIM: Optional[int] = None
    CC: Optional[float] = None
    ASM: Optional[float] = None
    LF: Optional[float] = None
    ORP: Optional[float] = None
    FT: Optional[float] = None
    errors: Dict[str, str] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


# ---------------------------------------------------------------------------
# Individual metrics
# ---------------------------------------------------------------------------


def file_id_match(retrieved_ids: Sequence[str], source_id: str) -> int:
    """Binary indicator: is the gold file among the retrieved ids (set semantics)."""
    return 1 if source_id in set(retrieved_ids) else 0


def context_coverage(
    contexts: Sequence[str], source: str, embedder: EmbeddingProvider
) -> float:
    """Best semantic match between any retrieved context and the gold span."""
    if not contexts:
        raise EmptyContextError("context coverage needs at least one context")
    source_vec = embedder.embed([source])[0]
    return max(cosine(vec, source_vec) for vec in embedder.embed(list(contexts)))


def segment_statements(response: str) -> List[str]:
    """Factual statement segmentation; identical to sentence unit splitting."""
    return segment_sentences(response)


def _normalize_for_containment(text: str) -> str:
    collapsed = " ".join(text.lower().split())
    return collapsed.rstrip(_TERMINAL_PUNCT).rstrip()


def faithfulness(response: str, contexts: Sequence[str]) -> float:
    """Fraction of response statements contained verbatim in some context."""
    if not contexts:
        raise EmptyContextError("faithfulness needs at least one context")
    statements = segment_statements(response)
    if not statements:
        raise EmptyStatementsError("response yields no statements; faithfulness undefined")
    normalized_contexts = [_normalize_for_containment(c) for c in contexts]
    supported = 0
    for statement in statements:
        needle = _normalize_for_containment(statement)
        if needle and any(needle in hay for hay in normalized_contexts):
            supported += 1
    return supported / len(statements)


def over_retrieval_penalty(
    contexts: Sequence[str], source: str, tau: float, embedder: EmbeddingProvider
) -> float:
    """Share of retrieved contexts NOT similar (strictly above tau) to the gold span."""
    if not contexts:
        raise EmptyContextError("over-retrieval penalty needs at least one context")
    source_vec = embedder.embed([source])[0]
    above = sum(
        1 for vec in embedder.embed(list(contexts)) if cosine(vec, source_vec) > tau
    )
    return 1.0 - above / len(contexts)


def language_fluency(response: str, scorer: FluencyScorer) -> float:
    """psi(response)/10, clamped to [0, 1] with a warning when psi leaves range."""
    raw = float(scorer(response))
    if not 0.0 <= raw <= 10.0:
        logger.warning("fluency scorer returned %s outside [0, 10]; clamping", raw)
        raw = min(10.0, max(0.0, raw))
    return raw / 10.0


# ---------------------------------------------------------------------------
# Instance and batch evaluation
# ---------------------------------------------------------------------------


def evaluate_instance(inst: EvalInstance, config: MetricConfig) -> EvalResult:
    """Compute all nine metrics; per-metric failures become nulls with reasons."""
    result = EvalResult()
    embedder = config.embedder
    contexts = [text for _, text in inst.retrieved]
    retrieved_ids = [fid for fid, _ in inst.retrieved]

    def attempt(name: str, fn: Callable[[], float]) -> None:
        try:
            setattr(result, name, fn())
        except Exception as exc:
            result.errors[name] = str(exc)

    def sim(x: str, y: str) -> float:
        vx, vy = embedder.embed([x, y])
        return cosine(vx, vy)

    def context_sim(other: str) -> float:
        if not contexts:
            raise EmptyContextError("no retrieved contexts")
        if config.context_mode == "mean":
            return sum(sim(other, c) for c in contexts) / len(contexts)
        return sim(other, "\n".join(contexts))

    attempt("AR", lambda: sim(inst.question, inst.generated_response))
    attempt("CR", lambda: context_sim(inst.question))
    attempt("GR", lambda: context_sim(inst.generated_response))
    attempt("FIM", lambda: file_id_match(retrieved_ids, inst.source_file_id))
    attempt("CC", lambda: context_coverage(contexts, inst.answer_source, embedder))
    attempt("ASM", lambda: sim(inst.generated_response, inst.answer))
    attempt("LF", lambda: language_fluency(inst.generated_response, config.fluency_scorer))
    attempt(
        "ORP",
        lambda: over_retrieval_penalty(contexts, inst.answer_source, config.tau, embedder),
    )
    attempt("FT", lambda: faithfulness(inst.generated_response, contexts))
    return result


def evaluate_batch(
    instances: Sequence[EvalInstance], config: MetricConfig
) -> List[EvalResult]:
    """Independent per-instance evaluation; order of results mirrors the input."""
    return [evaluate_instance(inst, config) for inst in instances]


def aggregate_results(results: Sequence[EvalResult]) -> Dict[str, Dict[str, float]]:
    """Per-metric mean over non-null values plus coverage accounting."""
    summary: Dict[str, Dict[str, float]] = {}
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in results if getattr(r, name) is not None]
        summary[name] = {
            "mean": sum(values) / len(values) if values else float("nan"),
            "count": len(values),
            "nulls": len(results) - len(values),
        }
    return summary
