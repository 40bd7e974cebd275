"""Document chunking: recursive delimiter splitting and two-stage semantic aggregation.

Three strategies are exposed:

* ``split_rcs`` — recursive character splitting: a segment within the token
  budget is emitted as-is, an oversized one is re-split on the next-priority
  delimiter, and a segment no delimiter can break falls back to hard token
  windows. Consecutive chunks share a fixed token overlap for continuity.
* ``chunk_hisacc`` — two-stage semantic aggregation: sentence-level units are
  embedded, adjacent units whose cosine similarity clears ``theta`` are swept
  into local groups, then a skip-window pass merges groups whose average
  pairwise similarity clears ``gamma``, linking related but non-contiguous
  passages (body text and a matching appendix, say) into one chunk.
* ``split_sentence_pack`` — the plain sentence-boundary baseline: consecutive
  units packed greedily under the budget.

All strategies guarantee every emitted chunk stays within the token budget.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .embedding import EmbeddingProvider
from .errors import DimensionMismatchError, ZeroVectorError
from .tokenization import Tokenizer, tokenize


@dataclass(frozen=True)
class Unit:
    """A minimal semantic unit (normally one sentence) in document order."""

    index: int
    text: str
    token_count: int


@dataclass(frozen=True)
class Group:
    """An ordered run of unit indices produced by the local aggregation sweep."""

    unit_indices: Tuple[int, ...]
    token_count: int

    def __post_init__(self) -> None:
        if not self.unit_indices:
            raise ValueError("a group must contain at least one unit")
        if any(b <= a for a, b in zip(self.unit_indices, self.unit_indices[1:])):
            raise ValueError("unit indices must be strictly increasing")


@dataclass(frozen=True)
class Chunk:
    """A retrieval unit: text, the unit indices it covers, and its token count.

    ``unit_indices`` is empty for RCS chunks, which are not unit-based.
    """

    text: str
    unit_indices: Tuple[int, ...]
    token_count: int
    source_file_id: Optional[str] = None


@dataclass(frozen=True)
class ChunkingConfig:
    """Tunables for all strategies.

    token_budget is the hard per-chunk cap; overlap applies to RCS only.
    theta gates stage-1 adjacent aggregation, gamma gates stage-2 skip-window
    merging, and window is how many following groups each group may merge
    with. Defaults align the budget with a 512-token reranker input; they are
    plain artifact defaults, surfaced as CLI flags.
    """

    token_budget: int = 512
    overlap: int = 50
    delimiters: Tuple[str, ...] = ("\n\n", "\n", ". ", " ")
    theta: float = 0.75
    gamma: float = 0.80
    window: int = 3
    tokenizer: Tokenizer = field(default=tokenize, repr=False)

    def __post_init__(self) -> None:
        if self.token_budget <= 0:
            raise ValueError("token_budget must be positive")
        if not 0 <= self.overlap < self.token_budget:
            raise ValueError("overlap must satisfy 0 <= overlap < token_budget")
        if not self.delimiters:
            raise ValueError("delimiters must be non-empty")
        if self.window < 1:
            raise ValueError("window must be >= 1")


_SENTENCE_BOUNDARY = re.compile(r"(?<=[.!?。！？])\s+")


def segment_sentences(text: str) -> List[str]:
    """Sentence segmentation: split after terminal punctuation, then on newlines.

    Terminal punctuation is {. ! ? 。 ！ ？} followed by whitespace or end of
    text. Pieces without terminal structure (headings, list rows) fall back
    to newline boundaries. No empty segments are returned.
    """
    out: List[str] = []
    for piece in _SENTENCE_BOUNDARY.split(text):
        for line in piece.splitlines():
            line = line.strip()
            if line:
                out.append(line)
    return out


def split_units(text: str, config: ChunkingConfig) -> List[Unit]:
    """Segment text into ordered units, none exceeding the token budget.

    A sentence longer than the budget cannot be represented as a single
    retrieval unit without breaking the per-chunk budget guarantee, so it is
    hard-split into consecutive token windows, each its own unit.
    """
    units: List[Unit] = []
    for sentence in segment_sentences(text):
        toks = config.tokenizer(sentence)
        if len(toks) <= config.token_budget:
            units.append(Unit(index=len(units), text=sentence, token_count=len(toks)))
            continue
        for start in range(0, len(toks), config.token_budget):
            window = toks[start : start + config.token_budget]
            units.append(
                Unit(index=len(units), text=" ".join(window), token_count=len(window))
            )
    return units


# ---------------------------------------------------------------------------
# Recursive character splitting
# ---------------------------------------------------------------------------


def split_rcs(
    text: str, config: ChunkingConfig, source_file_id: Optional[str] = None
) -> List[Chunk]:
    """Recursive delimiter split under the token budget, with fixed overlap.

    A segment within the budget is emitted; an oversized one is re-split on
    the next-priority delimiter, and consecutive sub-segments are packed
    back together greedily (up to budget minus overlap) so that fine
    delimiters like single spaces do not shred the text into atoms. Chunk
    i+1 is prefixed with the trailing ``overlap`` tokens of chunk i; the
    prefix is trimmed when it would push the chunk over the budget.
    """
    if not text.strip():
        return []
    segments = _rcs_segments(text, list(config.delimiters), config)
    chunks: List[Chunk] = []
    prev_tokens: Optional[List[str]] = None
    for segment in segments:
        seg_tokens = config.tokenizer(segment)
        carried: List[str] = []
        if prev_tokens is not None and config.overlap > 0:
            take = min(config.overlap, config.token_budget - len(seg_tokens))
            if take > 0:
                carried = prev_tokens[-take:]
        if carried:
            chunk_text = " ".join(carried) + " " + segment
            chunk_tokens = carried + seg_tokens
        else:
            chunk_text = segment
            chunk_tokens = seg_tokens
        chunks.append(
            Chunk(
                text=chunk_text,
                unit_indices=(),
                token_count=len(chunk_tokens),
                source_file_id=source_file_id,
            )
        )
        prev_tokens = chunk_tokens
    return chunks


def _rcs_segments(text: str, delimiters: List[str], config: ChunkingConfig) -> List[str]:
    """Recursion: emit if within budget, else re-split on the next delimiter."""
    if len(config.tokenizer(text)) <= config.token_budget:
        stripped = text.strip()
        return [text] if stripped else []
    for i, delim in enumerate(delimiters):
        parts = _split_keep_left(text, delim)
        if len(parts) > 1:
            out: List[str] = []
            for part in parts:
                out.extend(_rcs_segments(part, delimiters[i + 1 :], config))
            joiner = delim if not delim.strip() else " "
            return _pack_segments(out, joiner, config)
    # No delimiter can break the segment: hard token windows. Window size
    # leaves room for the overlap prefix added at assembly time.
    toks = config.tokenizer(text)
    stride = config.token_budget - config.overlap
    return [" ".join(toks[i : i + stride]) for i in range(0, len(toks), stride)]


def _pack_segments(segments: List[str], joiner: str, config: ChunkingConfig) -> List[str]:
    """Greedily rejoin consecutive segments, leaving room for the overlap prefix."""
    target = config.token_budget - config.overlap
    packed: List[str] = []
    current: List[str] = []
    current_tokens = 0
    for segment in segments:
        seg_tokens = len(config.tokenizer(segment))
        if current and current_tokens + seg_tokens > target:
            packed.append(joiner.join(current))
            current = []
            current_tokens = 0
        current.append(segment)
        current_tokens += seg_tokens
    if current:
        packed.append(joiner.join(current))
    return packed


def _split_keep_left(text: str, delim: str) -> List[str]:
    """Split on a delimiter, keeping non-whitespace delimiter text on the left piece."""
    raw = text.split(delim)
    if len(raw) < 2:
        return [text]
    keep = delim.strip()
    pieces = [p + keep for p in raw[:-1]] + [raw[-1]]
    return [p for p in (piece.strip() for piece in pieces) if p]


# ---------------------------------------------------------------------------
# Two-stage semantic aggregation
# ---------------------------------------------------------------------------


def _normalized_matrix(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    mat = np.asarray(embeddings, dtype=np.float64)
    if mat.ndim != 2:
        raise DimensionMismatchError("embeddings must share one dimension")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVectorError("unit embedding is all-zero; cannot compute similarity")
    return mat / norms[:, None]


def aggregate_local(
    units: Sequence[Unit], embeddings: Sequence[np.ndarray], config: ChunkingConfig
) -> List[Group]:
    """Stage 1: left-to-right sweep joining adjacent units.

    Unit i+1 joins the current group iff cosine(v_i, v_{i+1}) >= theta (ties
    merge) and the group stays within the token budget; otherwise it starts a
    new group. The output partitions the units in document order.
    """
    if len(units) != len(embeddings):
        raise DimensionMismatchError(
            f"{len(units)} units but {len(embeddings)} embeddings"
        )
    if not units:
        return []
    normed = _normalized_matrix(embeddings)
    groups: List[Group] = []
    current = [units[0].index]
    current_tokens = units[0].token_count
    for prev, unit in zip(units, units[1:]):
        sim = float(np.dot(normed[prev.index], normed[unit.index]))
        if sim >= config.theta and current_tokens + unit.token_count <= config.token_budget:
            current.append(unit.index)
            current_tokens += unit.token_count
        else:
            groups.append(Group(tuple(current), current_tokens))
            current = [unit.index]
            current_tokens = unit.token_count
    groups.append(Group(tuple(current), current_tokens))
    return groups


def group_similarity(
    a: Group, b: Group, embeddings: Sequence[np.ndarray]
) -> float:
    """Average cosine over all cross pairs of member units (exact pairwise mean)."""
    normed = _normalized_matrix(embeddings)
    sims = normed[list(a.unit_indices)] @ normed[list(b.unit_indices)].T
    return float(np.mean(sims))


def merge_skip_window(
    groups: Sequence[Group],
    units: Sequence[Unit],
    embeddings: Sequence[np.ndarray],
    config: ChunkingConfig,
    source_file_id: Optional[str] = None,
) -> List[Chunk]:
    """Stage 2: skip-window merging of semantically tied groups.

    One left-to-right pass over group positions. At position a, each of the
    next ``window`` groups is examined in order; the first one whose average
    pairwise similarity to the current group reaches gamma and whose merge
    respects the token budget is absorbed (member units keep document order),
    and the window is re-examined from the merged group. When no merge
    applies at a, the scan advances. Surviving groups become chunks.
    """
    unit_by_index = {u.index: u for u in units}
    if not groups:
        return []
    normed = _normalized_matrix(embeddings)
    pair_sims = normed @ normed.T

    def sim(ga: List[int], gb: List[int]) -> float:
        return float(np.mean(pair_sims[np.ix_(ga, gb)]))

    work: List[List[int]] = [list(g.unit_indices) for g in groups]
    tokens: List[int] = [g.token_count for g in groups]
    a = 0
    while a < len(work):
        merged = True
        while merged:
            merged = False
            upper = min(len(work), a + config.window + 1)
            for b in range(a + 1, upper):
                if tokens[a] + tokens[b] > config.token_budget:
                    continue
                if sim(work[a], work[b]) >= config.gamma:
                    combined = sorted(work[a] + work[b])
                    work[a] = combined
                    tokens[a] += tokens[b]
                    del work[b]
                    del tokens[b]
                    merged = True
                    break
        a += 1
    chunks: List[Chunk] = []
    for indices, tok in zip(work, tokens):
        texts = [unit_by_index[i].text for i in indices]
        chunks.append(
            Chunk(
                text=" ".join(texts),
                unit_indices=tuple(indices),
                token_count=tok,
                source_file_id=source_file_id,
            )
        )
    return chunks


def chunk_hisacc(
    text: str,
    embedder: EmbeddingProvider,
    config: ChunkingConfig,
    source_file_id: Optional[str] = None,
) -> List[Chunk]:
    """Full two-stage pipeline: units -> per-unit embeddings -> sweep -> skip-window."""
    units = split_units(text, config)
    if not units:
        return []
    embeddings = embedder.embed([u.text for u in units])
    groups = aggregate_local(units, embeddings, config)
    return merge_skip_window(groups, units, embeddings, config, source_file_id)


def split_sentence_pack(
    text: str, config: ChunkingConfig, source_file_id: Optional[str] = None
) -> List[Chunk]:
    """Sentence-boundary baseline: pack consecutive units greedily under the budget."""
    units = split_units(text, config)
    chunks: List[Chunk] = []
    current: List[Unit] = []
    current_tokens = 0
    for unit in units:
        if current and current_tokens + unit.token_count > config.token_budget:
            chunks.append(_pack(current, current_tokens, source_file_id))
            current = []
            current_tokens = 0
        current.append(unit)
        current_tokens += unit.token_count
    if current:
        chunks.append(_pack(current, current_tokens, source_file_id))
    return chunks


def _pack(units: List[Unit], tokens: int, source_file_id: Optional[str]) -> Chunk:
    return Chunk(
        text=" ".join(u.text for u in units),
        unit_indices=tuple(u.index for u in units),
        token_count=tokens,
        source_file_id=source_file_id,
    )
