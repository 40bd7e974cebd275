"""Training and evaluation dataset construction from a chunked corpus.

The reranker training set pairs each grounded QA item with its supporting
chunk (label 1) and a quota of negatives drawn in three tiers: chunks from
other documents, semantically distinct chunks of the same document, and a
uniform random fallback when the first two run dry. Tier shortfalls cascade
to the next tier; the gold chunk is never sampled. Every build is
deterministic under its seed, down to the output bytes.

The evaluation set uses the four-field QA schema (file_name, question,
answer, answer_source) and must be sampled from documents disjoint from the
training sample; any overlap fails the build rather than silently leaking.

QA generation sits behind a small contract. The shipped generator is
template-based: questions are formed from document sentences and answers are
verbatim spans, so every pair is grounded by construction. An LLM-backed
generator can be plugged in through the same contract.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

from .chunking import Chunk
from .embedding import EmbeddingProvider, cosine
from .errors import InsufficientChunksError, LeakageError, UngroundedQAError
from .ingest import DocumentRecord, NormalizedDocument

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    answer_source: str
    file_id: str
    file_name: str

    def __post_init__(self) -> None:
        if not self.answer:
            raise ValueError("answer must be non-empty")
        if not self.answer_source:
            raise ValueError("answer_source must be non-empty")


@dataclass(frozen=True)
class ListwiseExample:
    """One JSONL line of the reranker training set."""

    question: str
    passage: str
    label: int
    file_id: str
    file_name: str
    answer: Optional[str] = None
    answer_source: Optional[str] = None

    def to_json(self) -> str:
        record: Dict[str, object] = {
            "question": self.question,
            "passage": self.passage,
            "label": self.label,
            "file_id": self.file_id,
            "file_name": self.file_name,
        }
        if self.label == 1:
            record["answer"] = self.answer
            record["answer_source"] = self.answer_source
        return json.dumps(record, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ListwiseExample":
        obj = json.loads(line)
        return cls(
            question=obj["question"],
            passage=obj["passage"],
            label=int(obj["label"]),
            file_id=obj["file_id"],
            file_name=obj["file_name"],
            answer=obj.get("answer"),
            answer_source=obj.get("answer_source"),
        )


@dataclass(frozen=True)
class SamplingConfig:
    sample_fraction: float = 0.20
    seed: int = 0
    negatives_per_positive: int = 6
    negative_quota: Tuple[int, int, int] = (3, 2, 1)  # cross-doc, intra-doc, fallback
    distinctness_ceiling: float = 0.8
    max_pairs_per_document: int = 15

    def __post_init__(self) -> None:
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        if sum(self.negative_quota) != self.negatives_per_positive:
            raise ValueError("negative_quota must sum to negatives_per_positive")
        if not 1 <= self.max_pairs_per_document <= 15:
            raise ValueError("max_pairs_per_document must lie in [1, 15]")


def stratified_sample(
    records: Sequence[DocumentRecord], fraction: float, seed: int
) -> List[DocumentRecord]:
    """Per-MIME-type sampling: round(fraction * count) per stratum, at least one.

    Rounding is half-up. Selection within a stratum is seeded per
    (seed, mime type), so reruns reproduce the sample exactly.
    """
    if not records:
        raise ValueError("cannot sample from an empty corpus")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    strata: Dict[str, List[DocumentRecord]] = {}
    for record in records:
        strata.setdefault(record.mime_type, []).append(record)
    chosen: List[DocumentRecord] = []
    for mime in sorted(strata):
        members = sorted(strata[mime], key=lambda r: r.file_id)
        want = max(1, int(math.floor(fraction * len(members) + 0.5)))
        want = min(want, len(members))
        rng = random.Random(f"{seed}|{mime}")
        chosen.extend(rng.sample(members, want))
    return sorted(chosen, key=lambda r: r.file_id)


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------


def _normalize_span(text: str) -> str:
    return " ".join(text.lower().split())


def _overlaps_gold(chunk_text: str, answer_source: str) -> bool:
    chunk_n = _normalize_span(chunk_text)
    span_n = _normalize_span(answer_source)
    if not chunk_n or not span_n:
        return False
    return span_n in chunk_n or chunk_n in span_n


def gold_chunks(positive: QAPair, corpus_chunks: Sequence[Chunk]) -> List[Chunk]:
    """Chunks of the positive's document that overlap its evidence span."""
    return [
        c
        for c in corpus_chunks
        if c.source_file_id == positive.file_id and _overlaps_gold(c.text, positive.answer_source)
    ]


def sample_negatives(
    positive: QAPair,
    corpus_chunks: Sequence[Chunk],
    config: SamplingConfig,
    embedder: EmbeddingProvider,
    file_names: Mapping[str, str],
) -> List[ListwiseExample]:
    """Draw the configured quota of negatives for one positive.

    Tier 1 takes chunks from other documents; tier 2 takes same-document
    chunks that are disjoint from the evidence span and semantically distinct
    from it (cosine below the distinctness ceiling); tier 3 fills any
    remainder uniformly from all still-eligible chunks. Runs out of
    candidates only after all three tiers are exhausted.
    """
    keyed = sorted(
        (c for c in corpus_chunks if c.source_file_id is not None),
        key=lambda c: (c.source_file_id, c.unit_indices, c.text),
    )
    # Gold means: same document AND overlapping the evidence span.
    eligible = [
        c
        for c in keyed
        if not (c.source_file_id == positive.file_id and _overlaps_gold(c.text, positive.answer_source))
    ]
    rng = random.Random(f"{config.seed}|{positive.question}")
    span_vec = embedder.embed([positive.answer_source])[0]

    cross = [c for c in eligible if c.source_file_id != positive.file_id]
    intra_all = [c for c in eligible if c.source_file_id == positive.file_id]
    intra = [
        c
        for c in intra_all
        if cosine(embedder.embed([c.text])[0], span_vec) < config.distinctness_ceiling
    ]

    q_cross, q_intra, q_fallback = config.negative_quota
    picked: List[Chunk] = []
    take_cross = min(q_cross, len(cross))
    picked.extend(rng.sample(cross, take_cross))
    carry = q_cross - take_cross

    want_intra = q_intra + carry
    pool_intra = [c for c in intra if c not in picked]
    take_intra = min(want_intra, len(pool_intra))
    picked.extend(rng.sample(pool_intra, take_intra))
    carry = want_intra - take_intra

    want_fallback = q_fallback + carry
    pool_fallback = [c for c in eligible if c not in picked]
    take_fallback = min(want_fallback, len(pool_fallback))
    picked.extend(rng.sample(pool_fallback, take_fallback))

    if len(picked) < config.negatives_per_positive:
        raise InsufficientChunksError(
            f"only {len(picked)} eligible negatives for question {positive.question!r}"
        )
    return [
        ListwiseExample(
            question=positive.question,
            passage=c.text,
            label=0,
            file_id=c.source_file_id or "",
            file_name=file_names.get(c.source_file_id or "", c.source_file_id or ""),
        )
        for c in picked
    ]


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_rerank_dataset(
    qapairs: Sequence[QAPair],
    corpus_chunks: Sequence[Chunk],
    config: SamplingConfig,
    embedder: EmbeddingProvider,
    file_names: Mapping[str, str],
) -> List[ListwiseExample]:
    """One positive plus the negative quota per question, in question order.

    Ungrounded pairs (no chunk carries their evidence span) are rejected
    with a reason rather than silently skipped.
    """
    examples: List[ListwiseExample] = []
    for positive in qapairs:
        golds = gold_chunks(positive, corpus_chunks)
        if not golds:
            raise UngroundedQAError(
                f"answer_source for {positive.question!r} not found in any chunk of "
                f"{positive.file_id!r}"
            )
        examples.append(
            ListwiseExample(
                question=positive.question,
                passage=golds[0].text,
                label=1,
                file_id=positive.file_id,
                file_name=positive.file_name,
                answer=positive.answer,
                answer_source=positive.answer_source,
            )
        )
        examples.extend(
            sample_negatives(positive, corpus_chunks, config, embedder, file_names)
        )
    return examples


def write_jsonl(examples: Iterable[ListwiseExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(example.to_json() + "\n")


def read_jsonl(path) -> List[ListwiseExample]:
    with open(path, "r", encoding="utf-8") as fh:
        return [ListwiseExample.from_json(line) for line in fh if line.strip()]


def build_eval_dataset(
    qapairs: Sequence[QAPair],
    config: SamplingConfig,
    train_file_ids: Iterable[str],
) -> List[Dict[str, str]]:
    """Evaluation records in the four-field QA schema, leakage-checked.

    Fails when any evaluation document also fed the training sample, or when
    a document carries more QA pairs than the allowed 1..15 band.
    """
    train_ids = set(train_file_ids)
    per_doc: Dict[str, int] = {}
    for pair in qapairs:
        if pair.file_id in train_ids:
            raise LeakageError(
                f"file_id {pair.file_id!r} appears in both train and eval samples"
            )
        per_doc[pair.file_id] = per_doc.get(pair.file_id, 0) + 1
    for fid, count in sorted(per_doc.items()):
        if not 1 <= count <= 15:
            raise ValueError(f"document {fid!r} has {count} QA pairs, outside [1, 15]")
    return [
        {
            "file_name": pair.file_name,
            "question": pair.question,
            "answer": pair.answer,
            "answer_source": pair.answer_source,
        }
        for pair in qapairs
    ]


def write_eval_jsonl(records: Sequence[Dict[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_eval_jsonl(path) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# QA generation contract
# ---------------------------------------------------------------------------


class QAGenerator(Protocol):
    def generate(self, doc: NormalizedDocument) -> List[QAPair]: ...


class TemplateQAGenerator:
    """Grounded-by-construction QA fixtures from document sentences.

    Questions are templated from the opening tokens of evenly spaced
    sentences; the answer and its evidence span are the sentence verbatim.
    """

    def __init__(self, pairs_per_document: int = 3, seed: int = 0, min_tokens: int = 4):
        if not 1 <= pairs_per_document <= 15:
            raise ValueError("pairs_per_document must lie in [1, 15]")
        self.pairs_per_document = pairs_per_document
        self.seed = seed
        self.min_tokens = min_tokens

    def generate(self, doc: NormalizedDocument) -> List[QAPair]:
        from .chunking import segment_sentences

        if doc.extraction_status != "ok":
            return []
        sentences = [
            s
            for block in doc.blocks
            for s in segment_sentences(block)
            if len(s.split()) >= self.min_tokens
        ]
        if not sentences:
            return []
        rng = random.Random(f"{self.seed}|{doc.file_id}")
        count = min(self.pairs_per_document, len(sentences))
        picked = sorted(rng.sample(range(len(sentences)), count))
        pairs = []
        seen_questions = set()
        for idx in picked:
            sentence = sentences[idx]
            lead = " ".join(sentence.split()[:4])
            question = f"What does {doc.file_name} state about {lead}?"
            if question in seen_questions:
                question = f"What does {doc.file_name} state about {lead} (item {idx})?"
            seen_questions.add(question)
            pairs.append(
                QAPair(
                    question=question,
                    answer=sentence,
                    answer_source=sentence,
                    file_id=doc.file_id,
                    file_name=doc.file_name,
                )
            )
        return pairs
