"""End-to-end pipeline driver, ablation grid runner, and latency profiler.

``run_pipeline`` wires scan -> diff -> normalize -> chunk -> embed -> index
incrementally: unchanged files are never re-embedded, updated and deleted
files have their previous chunks evicted (eviction on delete is flag
controlled), and every run writes a manifest sufficient to reproduce it.

``run_ablation`` executes the full grid {chunking strategy} x {rerank
on/off} x {K} and scores every cell with the nine-metric battery. Since
answer generation is out of scope here, the reference answer stands in as
the generated response; the numbers isolate retrieval-side effects and are
labeled as such in the report.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .chunking import Chunk, ChunkingConfig, chunk_hisacc, split_rcs, split_sentence_pack
from .dataset import QAPair
from .embedding import EmbeddingProvider, ReferenceEmbedder, embed_batch
from .errors import EmptyIndexError, RegkitError
from .ingest import (
    DocumentRecord,
    ExtractorRegistry,
    LocalDirectoryConnector,
    NormalizedDocument,
    SourceConnector,
    SyncManifest,
    apply_delta,
    diff_manifest,
    load_manifest,
    normalize_document,
    save_manifest,
    scan_source,
)
from .ragmetrics import EvalInstance, MetricConfig, evaluate_batch, METRIC_NAMES
from .rerank import CandidateList, ScorerContract, rerank_topk
from .vindex import (
    FlatIndex,
    IndexedChunk,
    IvfIndex,
    IvfParams,
    build_flat,
    build_ivf,
    load as load_index,
    persist as persist_index,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("rcs", "hisacc", "sentence")


@dataclass(frozen=True)
class PipelineConfig:
    strategy: str = "hisacc"
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    index_kind: str = "flat"  # "flat" | "ivf"
    ivf: Optional[IvfParams] = None
    evict_deleted: bool = True

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.index_kind not in ("flat", "ivf"):
            raise ValueError("index_kind must be 'flat' or 'ivf'")


@dataclass
class StageTimings:
    samples: Dict[str, List[float]] = field(default_factory=dict)

    def add(self, stage: str, seconds: float) -> None:
        self.samples.setdefault(stage, []).append(seconds)

    def percentiles(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for stage, values in sorted(self.samples.items()):
            arr = np.asarray(values)
            out[stage] = {
                "p50": float(np.percentile(arr, 50)),
                "p90": float(np.percentile(arr, 90)),
                "p99": float(np.percentile(arr, 99)),
            }
        return out


@dataclass
class RunManifest:
    """Everything needed to reproduce a pipeline run bit-identically."""

    config: Dict[str, object]
    embedder_identity: str
    dataset_digests: Dict[str, str]
    started_at: str
    finished_at: str
    stage_timings: Dict[str, Dict[str, float]]
    counts: Dict[str, int]

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True, ensure_ascii=False)


@dataclass
class PipelineResult:
    index: object
    manifest: SyncManifest
    run_manifest: RunManifest
    delta_added: int
    delta_updated: int
    delta_deleted: int
    documents: Dict[str, NormalizedDocument]
    chunk_ids_by_file: Dict[str, List[str]]


def chunk_document(
    doc: NormalizedDocument,
    strategy: str,
    config: ChunkingConfig,
    embedder: EmbeddingProvider,
) -> List[Chunk]:
    """Chunk one normalized document under the named strategy."""
    text = doc.text
    if strategy == "rcs":
        return split_rcs(text, config, source_file_id=doc.file_id)
    if strategy == "hisacc":
        return chunk_hisacc(text, embedder, config, source_file_id=doc.file_id)
    if strategy == "sentence":
        return split_sentence_pack(text, config, source_file_id=doc.file_id)
    raise ValueError(f"unknown strategy {strategy!r}")


def _utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def run_pipeline(
    corpus_dir: str | Path,
    config: PipelineConfig,
    embedder: EmbeddingProvider,
    workdir: str | Path,
    extractors: Optional[ExtractorRegistry] = None,
    connector: Optional[SourceConnector] = None,
) -> PipelineResult:
    """Incremental scan/diff/normalize/chunk/embed/index over a corpus directory.

    State lives in ``workdir``: the sync manifest, the per-file chunk map,
    and the run manifest. Per-file failures are recorded and skipped; one
    bad document never aborts the run.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    extractors = extractors or ExtractorRegistry.default()
    connector = connector or LocalDirectoryConnector(corpus_dir)
    timings = StageTimings()
    started = _utc_now()

    manifest_path = workdir / "manifest.tsv"
    state_path = workdir / "pipeline_state.json"
    old_manifest = load_manifest(manifest_path) if manifest_path.exists() else SyncManifest(records={})
    state = _load_state(state_path)

    t0 = time.perf_counter()
    records = scan_source(connector)
    timings.add("scan", time.perf_counter() - t0)

    delta = diff_manifest(old_manifest, records)
    new_manifest = apply_delta(old_manifest, delta)
    new_manifest.snapshot_at = datetime.now(timezone.utc).replace(microsecond=0)

    index = _restore_index(state, workdir, config, embedder)
    chunk_map: Dict[str, List[str]] = state.get("chunk_ids_by_file", {})
    documents: Dict[str, NormalizedDocument] = {}
    failures: Dict[str, str] = {}

    stale_ids: List[str] = []
    for record in delta.updated:
        stale_ids.extend(chunk_map.pop(record.file_id, []))
    if config.evict_deleted:
        for fid in delta.deleted:
            stale_ids.extend(chunk_map.pop(fid, []))
    if stale_ids and index is not None:
        index.remove(stale_ids)

    fresh_chunks: List[IndexedChunk] = []
    for record in list(delta.added) + list(delta.updated):
        try:
            t0 = time.perf_counter()
            doc = normalize_document(record, connector.fetch(record.file_id), extractors)
            timings.add("normalize", time.perf_counter() - t0)
            documents[record.file_id] = doc
            if doc.extraction_status != "ok":
                chunk_map[record.file_id] = []
                continue
            t0 = time.perf_counter()
            chunks = chunk_document(doc, config.strategy, config.chunking, embedder)
            timings.add("chunk", time.perf_counter() - t0)
            t0 = time.perf_counter()
            vectors = embed_batch([c.text for c in chunks], embedder)
            timings.add("embed", time.perf_counter() - t0)
            indexed = [
                IndexedChunk(
                    chunk_id=f"{record.file_id}#{i}",
                    vector=vec,
                    file_id=record.file_id,
                    chunk_index=i,
                    text=chunk.text,
                )
                for i, (chunk, vec) in enumerate(zip(chunks, vectors))
            ]
            fresh_chunks.extend(indexed)
            chunk_map[record.file_id] = [c.chunk_id for c in indexed]
        except RegkitError as exc:
            failures[record.file_id] = str(exc)
            logger.warning("pipeline: %s failed: %s", record.file_id, exc)

    t0 = time.perf_counter()
    if index is None:
        if config.index_kind == "ivf":
            params = config.ivf or _default_ivf(len(fresh_chunks))
            index = build_ivf(fresh_chunks, params) if fresh_chunks else build_flat([], embedder.dimension)
        else:
            index = build_flat(fresh_chunks, embedder.dimension)
    elif fresh_chunks:
        index.upsert(fresh_chunks)
    timings.add("index", time.perf_counter() - t0)

    save_manifest(new_manifest, manifest_path)
    _save_state(state_path, chunk_map)
    persist_index(index, workdir / "index.regidx")

    run_manifest = RunManifest(
        config={
            "strategy": config.strategy,
            "index_kind": config.index_kind,
            "token_budget": config.chunking.token_budget,
            "overlap": config.chunking.overlap,
            "theta": config.chunking.theta,
            "gamma": config.chunking.gamma,
            "window": config.chunking.window,
            "evict_deleted": config.evict_deleted,
        },
        embedder_identity=embedder.identity,
        dataset_digests={"manifest": _digest_file(manifest_path)},
        started_at=started,
        finished_at=_utc_now(),
        stage_timings=timings.percentiles(),
        counts={
            "added": len(delta.added),
            "updated": len(delta.updated),
            "deleted": len(delta.deleted),
            "indexed_chunks": len(fresh_chunks),
            "failures": len(failures),
        },
    )
    (workdir / "run_manifest.json").write_text(run_manifest.to_json(), encoding="utf-8")
    return PipelineResult(
        index=index,
        manifest=new_manifest,
        run_manifest=run_manifest,
        delta_added=len(delta.added),
        delta_updated=len(delta.updated),
        delta_deleted=len(delta.deleted),
        documents=documents,
        chunk_ids_by_file=chunk_map,
    )


def _default_ivf(n: int) -> IvfParams:
    nlist = max(1, int(np.sqrt(max(1, n))))
    return IvfParams(nlist=nlist, nprobe=max(1, nlist // 4))


def _load_state(path: Path) -> Dict:
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {}


def _save_state(path: Path, chunk_map: Dict[str, List[str]]) -> None:
    path.write_text(
        json.dumps({"chunk_ids_by_file": chunk_map}, sort_keys=True), encoding="utf-8"
    )


def _restore_index(state, workdir: Path, config: PipelineConfig, embedder):
    index_path = workdir / "index.regidx"
    if state.get("chunk_ids_by_file") and index_path.exists():
        return load_index(index_path)
    return None


def _digest_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Retrieval endpoint
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievedContext:
    file_id: str
    chunk_index: int
    text: str
    retrieval_score: float
    retrieval_rank: int
    rerank_score: Optional[float] = None
    rerank_rank: Optional[int] = None

    def as_dict(self) -> Dict[str, object]:
        return {
            "file_id": self.file_id,
            "chunk_index": self.chunk_index,
            "text": self.text,
            "retrieval_score": self.retrieval_score,
            "retrieval_rank": self.retrieval_rank,
            "rerank_score": self.rerank_score,
            "rerank_rank": self.rerank_rank,
        }


@dataclass(frozen=True)
class RetrievalAnswer:
    question: str
    k: int
    rerank_used: bool
    rerank_fallback: bool
    contexts: Tuple[RetrievedContext, ...]

    def as_dict(self) -> Dict[str, object]:
        return {
            "question": self.question,
            "k": self.k,
            "rerank_used": self.rerank_used,
            "rerank_fallback": self.rerank_fallback,
            "contexts": [c.as_dict() for c in self.contexts],
        }


def answer_retrieve(
    question: str,
    k: int,
    rerank_flag: bool,
    index,
    embedder: EmbeddingProvider,
    scorer: Optional[ScorerContract] = None,
) -> RetrievalAnswer:
    """Top-k retrieval with optional re-ranking, provenance included."""
    if len(index) == 0:
        raise EmptyIndexError("cannot retrieve from an empty index")
    query_vec = embedder.embed([question])[0]
    result = index.search(query_vec, k)
    contexts = [
        RetrievedContext(
            file_id=hit.file_id,
            chunk_index=hit.chunk_index,
            text=hit.text,
            retrieval_score=hit.similarity,
            retrieval_rank=rank,
        )
        for rank, hit in enumerate(result.hits)
    ]
    if not rerank_flag or not contexts:
        return RetrievalAnswer(
            question=question,
            k=k,
            rerank_used=False,
            rerank_fallback=False,
            contexts=tuple(contexts),
        )
    if scorer is None:
        raise ValueError("rerank requested but no scorer configured")
    candidates = CandidateList(query=question, passages=tuple(c.text for c in contexts))
    reranked = rerank_topk(candidates, scorer)
    reordered = []
    for new_rank, original in enumerate(reranked.original_ranks):
        base = contexts[original]
        reordered.append(
            replace(
                base,
                rerank_score=None if reranked.scores is None else reranked.scores[new_rank],
                rerank_rank=new_rank,
            )
        )
    return RetrievalAnswer(
        question=question,
        k=k,
        rerank_used=True,
        rerank_fallback=reranked.fallback_used,
        contexts=tuple(reordered),
    )


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationConfig:
    strategies: Tuple[str, ...] = ("rcs", "hisacc")
    rerank_modes: Tuple[bool, ...] = (False, True)
    k_values: Tuple[int, ...] = (3, 5, 10, 15)
    seed: int = 0
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self) -> None:
        if not self.strategies or not self.k_values:
            raise ValueError("strategies and k_values must be non-empty")
        for strategy in self.strategies:
            if strategy not in STRATEGIES:
                raise ValueError(f"unknown strategy {strategy!r}")


def config_label(strategy: str, rerank_on: bool) -> str:
    label = {"rcs": "RCS", "hisacc": "HiSACC", "sentence": "Sentence"}[strategy]
    return f"{label}+rerank" if rerank_on else label


def run_ablation(
    documents: Mapping[str, NormalizedDocument],
    file_names: Mapping[str, str],
    eval_records: Sequence[Mapping[str, str]],
    ablation: AblationConfig,
    embedder: EmbeddingProvider,
    scorer: ScorerContract,
) -> List[Dict[str, object]]:
    """Run the full grid and return one row per (strategy, rerank, K).

    The reference answer stands in for generated text (generation is out of
    scope), so rows read on retrieval quality, not generator quality.
    """
    name_to_id = {name: fid for fid, name in file_names.items()}
    rows: List[Dict[str, object]] = []
    for strategy in ablation.strategies:
        index = _build_strategy_index(documents, strategy, ablation.chunking, embedder)
        for rerank_on in ablation.rerank_modes:
            for k in ablation.k_values:
                instances = []
                for record in eval_records:
                    source_id = name_to_id.get(record["file_name"], record["file_name"])
                    answer = answer_retrieve(
                        record["question"],
                        k,
                        rerank_on,
                        index,
                        embedder,
                        scorer=scorer,
                    )
                    instances.append(
                        EvalInstance(
                            file_name=record["file_name"],
                            question=record["question"],
                            answer=record["answer"],
                            answer_source=record["answer_source"],
                            generated_response=record["answer"],
                            retrieved=tuple(
                                (c.file_id, c.text) for c in answer.contexts
                            ),
                            source_file_id=source_id,
                        )
                    )
                results = evaluate_batch(instances, ablation.metrics)
                row: Dict[str, object] = {
                    "config": config_label(strategy, rerank_on),
                    "K": k,
                }
                for name in METRIC_NAMES:
                    values = [
                        getattr(r, name) for r in results if getattr(r, name) is not None
                    ]
                    row[name] = sum(values) / len(values) if values else None
                rows.append(row)
    return rows


def _build_strategy_index(
    documents: Mapping[str, NormalizedDocument],
    strategy: str,
    chunking: ChunkingConfig,
    embedder: EmbeddingProvider,
) -> FlatIndex:
    indexed: List[IndexedChunk] = []
    for fid in sorted(documents):
        doc = documents[fid]
        if doc.extraction_status != "ok":
            continue
        chunks = chunk_document(doc, strategy, chunking, embedder)
        vectors = embed_batch([c.text for c in chunks], embedder)
        for i, (chunk, vec) in enumerate(zip(chunks, vectors)):
            indexed.append(
                IndexedChunk(
                    chunk_id=f"{fid}#{i}",
                    vector=vec,
                    file_id=fid,
                    chunk_index=i,
                    text=chunk.text,
                )
            )
    return build_flat(indexed, embedder.dimension)


REPORT_COLUMNS = ("config", "K") + METRIC_NAMES


def report_csv(rows: Sequence[Mapping[str, object]]) -> str:
    """Machine-readable report; column order mirrors the metric table."""
    lines = [",".join(REPORT_COLUMNS)]
    for row in rows:
        cells = []
        for col in REPORT_COLUMNS:
            value = row.get(col)
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(f"{value:.6f}")
            else:
                cells.append(str(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def report_table(rows: Sequence[Mapping[str, object]]) -> str:
    """Aligned text table for human eyes."""
    headers = list(REPORT_COLUMNS)
    grid = [headers]
    for row in rows:
        cells = []
        for col in headers:
            value = row.get(col)
            if value is None:
                cells.append("-")
            elif isinstance(value, float):
                cells.append(f"{value:.4f}")
            else:
                cells.append(str(value))
        grid.append(cells)
    widths = [max(len(line[i]) for line in grid) for i in range(len(headers))]
    out = []
    for line in grid:
        out.append("  ".join(cell.rjust(width) for cell, width in zip(line, widths)))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Latency profiling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyRow:
    k: int
    stage: str  # "retrieve" | "retrieve+rerank"
    p50: float
    p90: float
    p99: float


def profile_latency(
    index,
    embedder: EmbeddingProvider,
    scorer: ScorerContract,
    questions: Sequence[str],
    k_values: Sequence[int] = (3, 5, 10, 15),
    repetitions: int = 25,
) -> List[LatencyRow]:
    """Per-K latency percentiles for retrieve-only vs retrieve-plus-rerank.

    Each repetition round measures every K once, so transient machine load
    hits all K values evenly instead of biasing whichever K ran first.
    """
    retrieve_times: Dict[int, List[float]] = {k: [] for k in k_values}
    rerank_times: Dict[int, List[float]] = {k: [] for k in k_values}
    query_vectors = [embedder.embed([q])[0] for q in questions]
    for _ in range(repetitions):
        for k in k_values:
            for question, vec in zip(questions, query_vectors):
                t0 = time.perf_counter()
                result = index.search(vec, k)
                retrieve_times[k].append(time.perf_counter() - t0)
                passages = tuple(hit.text for hit in result.hits)
                if not passages:
                    continue
                t0 = time.perf_counter()
                index.search(vec, k)
                rerank_topk(CandidateList(query=question, passages=passages), scorer)
                rerank_times[k].append(time.perf_counter() - t0)
    rows: List[LatencyRow] = []
    for k in k_values:
        rows.append(_latency_row(k, "retrieve", retrieve_times[k]))
        rows.append(_latency_row(k, "retrieve+rerank", rerank_times[k]))
    return rows


def _latency_row(k: int, stage: str, samples: Sequence[float]) -> LatencyRow:
    arr = np.asarray(samples) if samples else np.asarray([0.0])
    return LatencyRow(
        k=k,
        stage=stage,
        p50=float(np.percentile(arr, 50)),
        p90=float(np.percentile(arr, 90)),
        p99=float(np.percentile(arr, 99)),
    )
