"""regkit command line.

Subcommands mirror the pipeline stages: sync, ingest, chunk, index, query,
build-train-data, build-eval-data, evaluate, ablate, profile, serve.
Defaults may come from a JSON config file (--config); explicit flags always
win. The documented config keys are listed in the README.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .chunking import ChunkingConfig
from .dataset import (
    QAPair,
    SamplingConfig,
    TemplateQAGenerator,
    build_eval_dataset,
    build_rerank_dataset,
    read_eval_jsonl,
    read_jsonl,
    stratified_sample,
    write_eval_jsonl,
    write_jsonl,
)
from .embedding import ReferenceEmbedder, RemoteEmbedder, embed_batch
from .harness import (
    AblationConfig,
    PipelineConfig,
    answer_retrieve,
    chunk_document,
    profile_latency,
    report_csv,
    report_table,
    run_ablation,
    run_pipeline,
)
from .ingest import (
    ExtractorRegistry,
    LocalDirectoryConnector,
    SyncManifest,
    diff_manifest,
    apply_delta,
    load_manifest,
    normalize_document,
    save_manifest,
    scan_source,
)
from .ragmetrics import (
    EvalInstance,
    MetricConfig,
    aggregate_results,
    evaluate_batch,
    METRIC_NAMES,
)
from .rerank import LexicalOverlapScorer, RemoteScorer
from .vindex import (
    IndexedChunk,
    IvfParams,
    build_flat,
    build_ivf,
    load as load_index,
    persist as persist_index,
    rebuild_ivf,
)

logger = logging.getLogger(__name__)

EMBED_ENDPOINT_ENV = "REGKIT_EMBED_ENDPOINT"
SCORER_ENDPOINT_ENV = "REGKIT_SCORER_ENDPOINT"


def make_embedder(kind: str, dimension: int):
    if kind == "reference":
        return ReferenceEmbedder(dimension)
    if kind == "remote":
        endpoint = os.environ.get(EMBED_ENDPOINT_ENV)
        if not endpoint:
            raise SystemExit(f"remote embedder requires {EMBED_ENDPOINT_ENV}")
        return RemoteEmbedder(endpoint, dimension)
    raise SystemExit(f"unknown embedder kind {kind!r}")


def make_scorer(kind: str):
    if kind == "lexical":
        return LexicalOverlapScorer()
    if kind == "remote":
        endpoint = os.environ.get(SCORER_ENDPOINT_ENV)
        if not endpoint:
            raise SystemExit(f"remote scorer requires {SCORER_ENDPOINT_ENV}")
        return RemoteScorer(endpoint)
    raise SystemExit(f"unknown scorer kind {kind!r}")


def embedder_for_index(kind: str, dimension: int, index):
    """Query-time embedder: the reference embedder adopts the index dimension,
    a remote one must match it."""
    if kind == "reference":
        return ReferenceEmbedder(index.dimension)
    embedder = make_embedder(kind, dimension)
    if embedder.dimension != index.dimension:
        raise SystemExit(
            f"embedder dimension {embedder.dimension} does not match "
            f"index dimension {index.dimension}"
        )
    return embedder


def chunking_from_args(args) -> ChunkingConfig:
    return ChunkingConfig(
        token_budget=args.l,
        overlap=args.overlap,
        theta=args.theta,
        gamma=args.gamma,
        window=args.window,
    )


def add_chunking_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--strategy", choices=("rcs", "hisacc", "sentence"), default="hisacc")
    parser.add_argument("--l", type=int, default=512, help="token budget per chunk")
    parser.add_argument("--overlap", type=int, default=50)
    parser.add_argument("--theta", type=float, default=0.75)
    parser.add_argument("--gamma", type=float, default=0.80)
    parser.add_argument("--window", type=int, default=3)


def add_embedder_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--embedder", choices=("reference", "remote"), default="reference")
    parser.add_argument("--dimension", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"regkit {__version__}")
    parser.add_argument("--config", type=Path, help="JSON config file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sync", help="scan a source and update the sync manifest")
    p.add_argument("corpus_dir", type=Path)
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("ingest", help="incremental scan/chunk/embed/index pipeline")
    p.add_argument("corpus_dir", type=Path)
    p.add_argument("--workdir", type=Path, required=True)
    add_chunking_flags(p)
    add_embedder_flags(p)
    p.add_argument("--index-kind", choices=("flat", "ivf"), default="flat")
    p.add_argument("--keep-deleted", action="store_true",
                   help="keep chunks of deleted files until the next rebuild")

    p = sub.add_parser("chunk", help="chunk a corpus to JSONL")
    p.add_argument("corpus_dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    add_chunking_flags(p)
    add_embedder_flags(p)

    p = sub.add_parser("index", help="vector index operations")
    index_sub = p.add_subparsers(dest="index_command", required=True)
    pb = index_sub.add_parser("build")
    pb.add_argument("chunks_jsonl", type=Path)
    pb.add_argument("--out", type=Path, required=True)
    pb.add_argument("--kind", choices=("flat", "ivf"), default="flat")
    pb.add_argument("--nlist", type=int)
    pb.add_argument("--nprobe", type=int)
    pb.add_argument("--seed", type=int, default=0)
    add_embedder_flags(pb)
    ps = index_sub.add_parser("search")
    ps.add_argument("index_file", type=Path)
    ps.add_argument("query")
    ps.add_argument("-k", type=int, default=5)
    add_embedder_flags(ps)
    pu = index_sub.add_parser("upsert")
    pu.add_argument("index_file", type=Path)
    pu.add_argument("chunks_jsonl", type=Path)
    add_embedder_flags(pu)
    pr = index_sub.add_parser("rebuild")
    pr.add_argument("index_file", type=Path)
    pr.add_argument("--nlist", type=int)
    pr.add_argument("--nprobe", type=int)

    p = sub.add_parser("query", help="retrieve (and optionally rerank) for one question")
    p.add_argument("question")
    p.add_argument("--workdir", type=Path, required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--scorer", choices=("lexical", "remote"), default="lexical")
    add_embedder_flags(p)

    p = sub.add_parser("build-train-data", help="build the reranker training JSONL")
    p.add_argument("corpus_dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--fraction", type=float, default=0.20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negatives", type=int, default=6)
    p.add_argument("--quotas", type=str, default="3,2,1",
                   help="cross-document,intra-document,fallback")
    p.add_argument("--pairs-per-doc", type=int, default=3)
    add_chunking_flags(p)
    add_embedder_flags(p)

    p = sub.add_parser("build-eval-data", help="build the evaluation QA JSONL")
    p.add_argument("corpus_dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--train-file", type=Path,
                   help="training JSONL used for the leakage check")
    p.add_argument("--pairs-per-doc", type=int, default=3)

    p = sub.add_parser("evaluate", help="score retrieval runs with the nine metrics")
    p.add_argument("eval_jsonl", type=Path)
    p.add_argument("--workdir", type=Path, required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--scorer", choices=("lexical", "remote"), default="lexical")
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--out", type=Path, help="per-instance JSONL output")
    add_embedder_flags(p)

    p = sub.add_parser("ablate", help="run the strategy x rerank x K grid")
    p.add_argument("corpus_dir", type=Path)
    p.add_argument("eval_jsonl", type=Path)
    p.add_argument("--out-csv", type=Path)
    p.add_argument("--k-values", type=str, default="3,5,10,15")
    p.add_argument("--strategies", type=str, default="rcs,hisacc")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--scorer", choices=("lexical", "remote"), default="lexical")
    add_chunking_flags(p)
    add_embedder_flags(p)

    p = sub.add_parser("profile", help="latency percentiles per K, with and without rerank")
    p.add_argument("--workdir", type=Path, required=True)
    p.add_argument("--k-values", type=str, default="3,5,10,15")
    p.add_argument("--questions", type=int, default=8)
    p.add_argument("--repetitions", type=int, default=25)
    p.add_argument("--scorer", choices=("lexical", "remote"), default="lexical")
    add_embedder_flags(p)

    p = sub.add_parser("serve", help="run the retrieval HTTP service")
    p.add_argument("--workdir", type=Path, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--scorer", choices=("lexical", "remote"), default="lexical")
    add_embedder_flags(p)

    return parser


def _apply_config_file(argv: List[str], parser: argparse.ArgumentParser) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(overrides, dict):
            raise SystemExit("config file must contain a JSON object")
        explicit = {a.lstrip("-").replace("-", "_").split("=")[0] for a in argv if a.startswith("--")}
        for key, value in overrides.items():
            attr = key.replace("-", "_")
            if hasattr(args, attr) and attr not in explicit:
                setattr(args, attr, value)
    return args


def _normalized_docs(corpus_dir: Path):
    connector = LocalDirectoryConnector(corpus_dir)
    extractors = ExtractorRegistry.default()
    records = scan_source(connector)
    docs = {}
    for record in records:
        docs[record.file_id] = normalize_document(
            record, connector.fetch(record.file_id), extractors
        )
    return records, docs


def _load_workdir_index(workdir: Path):
    index_path = workdir / "index.regidx"
    if not index_path.exists():
        raise SystemExit(f"no index at {index_path}; run `regkit ingest` first")
    return load_index(index_path)


def cmd_sync(args) -> int:
    connector = LocalDirectoryConnector(args.corpus_dir)
    records = scan_source(connector)
    old = load_manifest(args.manifest) if args.manifest.exists() else SyncManifest(records={})
    delta = diff_manifest(old, records)
    new_manifest = apply_delta(old, delta)
    save_manifest(new_manifest, args.manifest)
    print(
        f"added={len(delta.added)} updated={len(delta.updated)} deleted={len(delta.deleted)}"
    )
    return 0


def cmd_ingest(args) -> int:
    config = PipelineConfig(
        strategy=args.strategy,
        chunking=chunking_from_args(args),
        index_kind=args.index_kind,
        evict_deleted=not args.keep_deleted,
    )
    embedder = make_embedder(args.embedder, args.dimension)
    result = run_pipeline(args.corpus_dir, config, embedder, args.workdir)
    counts = result.run_manifest.counts
    print(
        "ingest: added={added} updated={updated} deleted={deleted} "
        "chunks={indexed_chunks} failures={failures}".format(**counts)
    )
    return 0


def cmd_chunk(args) -> int:
    records, docs = _normalized_docs(args.corpus_dir)
    embedder = make_embedder(args.embedder, args.dimension)
    config = chunking_from_args(args)
    with open(args.out, "w", encoding="utf-8") as fh:
        for fid in sorted(docs):
            doc = docs[fid]
            if doc.extraction_status != "ok":
                continue
            for i, chunk in enumerate(chunk_document(doc, args.strategy, config, embedder)):
                fh.write(
                    json.dumps(
                        {
                            "file_id": fid,
                            "chunk_index": i,
                            "unit_indices": list(chunk.unit_indices),
                            "token_count": chunk.token_count,
                            "text": chunk.text,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
    print(f"wrote chunks for {len(docs)} documents to {args.out}")
    return 0


def _read_chunk_dump(path: Path, embedder) -> List[IndexedChunk]:
    chunks = []
    with open(path, "r", encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    vectors = embed_batch([r["text"] for r in records], embedder)
    for record, vec in zip(records, vectors):
        chunks.append(
            IndexedChunk(
                chunk_id=f"{record['file_id']}#{record['chunk_index']}",
                vector=vec,
                file_id=record["file_id"],
                chunk_index=record["chunk_index"],
                text=record["text"],
            )
        )
    return chunks


def cmd_index(args) -> int:
    if args.index_command == "build":
        embedder = make_embedder(args.embedder, args.dimension)
        chunks = _read_chunk_dump(args.chunks_jsonl, embedder)
        if args.kind == "ivf":
            nlist = args.nlist or max(1, int(len(chunks) ** 0.5))
            nprobe = args.nprobe or max(1, nlist // 4)
            index = build_ivf(chunks, IvfParams(nlist=nlist, nprobe=nprobe, seed=args.seed))
        else:
            index = build_flat(chunks)
        persist_index(index, args.out)
        print(f"indexed {len(chunks)} chunks -> {args.out}")
        return 0
    if args.index_command == "search":
        index = load_index(args.index_file)
        embedder = embedder_for_index(args.embedder, args.dimension, index)
        result = index.search(embedder.embed([args.query])[0], args.k)
        for rank, hit in enumerate(result.hits):
            print(f"{rank:3d}  {hit.similarity:.4f}  {hit.chunk_id}  {hit.text[:70]!r}")
        return 0
    if args.index_command == "upsert":
        index = load_index(args.index_file)
        embedder = embedder_for_index(args.embedder, args.dimension, index)
        chunks = _read_chunk_dump(args.chunks_jsonl, embedder)
        index.upsert(chunks)
        persist_index(index, args.index_file)
        print(f"upserted {len(chunks)} chunks")
        return 0
    if args.index_command == "rebuild":
        index = load_index(args.index_file)
        params = None
        if args.nlist:
            params = IvfParams(nlist=args.nlist, nprobe=args.nprobe or max(1, args.nlist // 4))
        index = rebuild_ivf(index, params)
        persist_index(index, args.index_file)
        print("rebuilt")
        return 0
    raise SystemExit(f"unknown index command {args.index_command!r}")


def cmd_query(args) -> int:
    index = _load_workdir_index(args.workdir)
    embedder = embedder_for_index(args.embedder, args.dimension, index)
    scorer = make_scorer(args.scorer) if args.rerank else None
    answer = answer_retrieve(args.question, args.k, args.rerank, index, embedder, scorer)
    print(json.dumps(answer.as_dict(), ensure_ascii=False, indent=2))
    return 0


def _parse_quotas(raw: str, negatives: int):
    parts = tuple(int(x) for x in raw.split(","))
    if len(parts) != 3:
        raise SystemExit("--quotas must have three comma-separated integers")
    if sum(parts) != negatives:
        raise SystemExit("--quotas must sum to --negatives")
    return parts


def cmd_build_train_data(args) -> int:
    records, docs = _normalized_docs(args.corpus_dir)
    embedder = make_embedder(args.embedder, args.dimension)
    config = SamplingConfig(
        sample_fraction=args.fraction,
        seed=args.seed,
        negatives_per_positive=args.negatives,
        negative_quota=_parse_quotas(args.quotas, args.negatives),
    )
    sampled = stratified_sample(records, args.fraction, args.seed)
    generator = TemplateQAGenerator(pairs_per_document=args.pairs_per_doc, seed=args.seed)
    qapairs: List[QAPair] = []
    for record in sampled:
        qapairs.extend(generator.generate(docs[record.file_id]))
    chunk_config = chunking_from_args(args)
    corpus_chunks = []
    for fid in sorted(docs):
        doc = docs[fid]
        if doc.extraction_status == "ok":
            corpus_chunks.extend(chunk_document(doc, args.strategy, chunk_config, embedder))
    file_names = {r.file_id: r.file_name for r in records}
    examples = build_rerank_dataset(qapairs, corpus_chunks, config, embedder, file_names)
    write_jsonl(examples, args.out)
    print(f"wrote {len(examples)} examples ({len(qapairs)} questions) to {args.out}")
    return 0


def cmd_build_eval_data(args) -> int:
    records, docs = _normalized_docs(args.corpus_dir)
    sampled = stratified_sample(records, args.fraction, args.seed)
    generator = TemplateQAGenerator(pairs_per_document=args.pairs_per_doc, seed=args.seed)
    qapairs: List[QAPair] = []
    for record in sampled:
        qapairs.extend(generator.generate(docs[record.file_id]))
    train_ids: List[str] = []
    if args.train_file:
        train_ids = sorted(
            {ex.file_id for ex in read_jsonl(args.train_file) if ex.label == 1}
        )
    eval_records = build_eval_dataset(
        qapairs, SamplingConfig(sample_fraction=args.fraction, seed=args.seed), train_ids
    )
    write_eval_jsonl(eval_records, args.out)
    print(f"wrote {len(eval_records)} eval records to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    index = _load_workdir_index(args.workdir)
    embedder = embedder_for_index(args.embedder, args.dimension, index)
    scorer = make_scorer(args.scorer) if args.rerank else None
    manifest = load_manifest(args.workdir / "manifest.tsv")
    name_to_id = {r.file_name: fid for fid, r in manifest.records.items()}
    config = MetricConfig(tau=args.tau, embedder=embedder)
    instances = []
    for record in read_eval_jsonl(args.eval_jsonl):
        answer = answer_retrieve(
            record["question"], args.k, args.rerank, index, embedder, scorer
        )
        instances.append(
            EvalInstance(
                file_name=record["file_name"],
                question=record["question"],
                answer=record["answer"],
                answer_source=record["answer_source"],
                generated_response=record["answer"],
                retrieved=tuple((c.file_id, c.text) for c in answer.contexts),
                source_file_id=name_to_id.get(record["file_name"], record["file_name"]),
            )
        )
    results = evaluate_batch(instances, config)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for inst, result in zip(instances, results):
                row = {"question": inst.question, **result.as_dict(), "errors": result.errors}
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    summary = aggregate_results(results)
    print(f"tau={args.tau}")
    for name in METRIC_NAMES:
        stats = summary[name]
        print(f"{name:4s} mean={stats['mean']:.4f} n={stats['count']} nulls={stats['nulls']}")
    return 0


def cmd_ablate(args) -> int:
    records, docs = _normalized_docs(args.corpus_dir)
    embedder = make_embedder(args.embedder, args.dimension)
    scorer = make_scorer(args.scorer)
    eval_records = read_eval_jsonl(args.eval_jsonl)
    file_names = {r.file_id: r.file_name for r in records}
    ablation = AblationConfig(
        strategies=tuple(args.strategies.split(",")),
        k_values=tuple(int(k) for k in args.k_values.split(",")),
        seed=args.seed,
        chunking=chunking_from_args(args),
        metrics=MetricConfig(tau=args.tau, embedder=embedder),
    )
    rows = run_ablation(docs, file_names, eval_records, ablation, embedder, scorer)
    print(f"tau={args.tau}")
    print(report_table(rows), end="")
    if args.out_csv:
        args.out_csv.write_text(report_csv(rows), encoding="utf-8")
        print(f"wrote {args.out_csv}")
    return 0


def cmd_profile(args) -> int:
    index = _load_workdir_index(args.workdir)
    embedder = embedder_for_index(args.embedder, args.dimension, index)
    scorer = make_scorer(args.scorer)
    sample_ids = index.chunk_ids[: args.questions]
    questions = []
    for cid in sample_ids:
        flat = index if not hasattr(index, "_flat") else index._flat
        questions.append(flat.chunk(cid).text[:200])
    rows = profile_latency(
        index,
        embedder,
        scorer,
        questions,
        k_values=tuple(int(k) for k in args.k_values.split(",")),
        repetitions=args.repetitions,
    )
    print(f"{'k':>4} {'stage':>18} {'p50 ms':>9} {'p90 ms':>9} {'p99 ms':>9}")
    for row in rows:
        print(
            f"{row.k:>4} {row.stage:>18} {row.p50 * 1e3:>9.3f} "
            f"{row.p90 * 1e3:>9.3f} {row.p99 * 1e3:>9.3f}"
        )
    return 0


def cmd_serve(args) -> int:
    from .service import RetrievalService

    index = _load_workdir_index(args.workdir)
    embedder = embedder_for_index(args.embedder, args.dimension, index)
    scorer = make_scorer(args.scorer)
    service = RetrievalService(index, embedder, scorer=scorer, host=args.host, port=args.port)
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        service.shutdown()
    return 0


COMMANDS = {
    "sync": cmd_sync,
    "ingest": cmd_ingest,
    "chunk": cmd_chunk,
    "index": cmd_index,
    "query": cmd_query,
    "build-train-data": cmd_build_train_data,
    "build-eval-data": cmd_build_eval_data,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "profile": cmd_profile,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    args = _apply_config_file(argv, parser)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
