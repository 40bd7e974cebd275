import json

import numpy as np
import pytest
import requests

from synthcorpus import SPLIT_TOPIC_CHUNKING, make_split_topic_corpus
from regkit.chunking import ChunkingConfig
from regkit.embedding import ReferenceEmbedder
from regkit.errors import EmptyIndexError
from regkit.harness import (
    AblationConfig,
    PipelineConfig,
    answer_retrieve,
    chunk_document,
    config_label,
    profile_latency,
    report_csv,
    report_table,
    run_ablation,
    run_pipeline,
)
from regkit.ingest import ExtractorRegistry, LocalDirectoryConnector, normalize_document, scan_source
from regkit.ragmetrics import METRIC_NAMES, MetricConfig
from regkit.rerank import LexicalOverlapScorer
from regkit.service import RetrievalService
from regkit.vindex import IndexedChunk, build_flat


class CountingEmbedder(ReferenceEmbedder):
    def __init__(self, dimension):
        super().__init__(dimension)
        self.calls = 0

    def embed(self, texts):
        self.calls += len(texts)
        return super().embed(texts)


def write_corpus(path, docs):
    path.mkdir(exist_ok=True)
    for name, text in docs.items():
        (path / name).write_text(text)


SMALL_DOCS = {
    f"doc{i}.txt": (
        f"Document {i} covers regulation topic number {i}. "
        f"The retention period is {i + 1} years.\n\n"
        f"Another paragraph about audits and controls for topic {i}."
    )
    for i in range(4)
}

PIPE_CONFIG = PipelineConfig(
    strategy="hisacc",
    chunking=ChunkingConfig(token_budget=64, theta=0.99, gamma=0.99),
)


class TestRunPipeline:
    def test_empty_corpus(self, tmp_path):
        corpus = tmp_path / "corpus"
        corpus.mkdir()
        result = run_pipeline(corpus, PIPE_CONFIG, ReferenceEmbedder(32), tmp_path / "work")
        assert len(result.index) == 0
        assert (tmp_path / "work" / "manifest.tsv").exists()

    def test_rerun_without_changes_embeds_nothing(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, SMALL_DOCS)
        embedder = CountingEmbedder(32)
        run_pipeline(corpus, PIPE_CONFIG, embedder, tmp_path / "work")
        before = embedder.calls
        second = run_pipeline(corpus, PIPE_CONFIG, embedder, tmp_path / "work")
        assert embedder.calls == before
        assert second.delta_added == second.delta_updated == second.delta_deleted == 0

    def test_incremental_add_equals_rebuild(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, SMALL_DOCS)
        embedder = ReferenceEmbedder(32)
        run_pipeline(corpus, PIPE_CONFIG, embedder, tmp_path / "incr")
        (corpus / "doc9.txt").write_text("Fresh document about sterilization procedures entirely.")
        incr = run_pipeline(corpus, PIPE_CONFIG, embedder, tmp_path / "incr")
        assert incr.delta_added == 1
        scratch = run_pipeline(corpus, PIPE_CONFIG, embedder, tmp_path / "scratch")
        query = embedder.embed(["sterilization procedures"])[0]
        a = incr.index.search(query, 5)
        b = scratch.index.search(query, 5)
        assert [h.chunk_id for h in a.hits] == [h.chunk_id for h in b.hits]
        for ha, hb in zip(a.hits, b.hits):
            assert ha.similarity == pytest.approx(hb.similarity, abs=1e-12)

    def test_update_and_delete_evict_chunks(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, SMALL_DOCS)
        embedder = ReferenceEmbedder(32)
        run_pipeline(corpus, PIPE_CONFIG, embedder, tmp_path / "work")
        (corpus / "doc0.txt").unlink()
        (corpus / "doc1.txt").write_text("Rewritten content about labeling controls only.")
        result = run_pipeline(corpus, PIPE_CONFIG, embedder, tmp_path / "work")
        assert result.delta_deleted == 1 and result.delta_updated == 1
        assert not any(cid.startswith("doc0.txt#") for cid in result.index.chunk_ids)
        scratch = run_pipeline(corpus, PIPE_CONFIG, embedder, tmp_path / "scratch")
        assert sorted(result.index.chunk_ids) == sorted(scratch.index.chunk_ids)

    def test_keep_deleted_flag(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, SMALL_DOCS)
        config = PipelineConfig(
            strategy="hisacc",
            chunking=PIPE_CONFIG.chunking,
            evict_deleted=False,
        )
        embedder = ReferenceEmbedder(32)
        run_pipeline(corpus, config, embedder, tmp_path / "work")
        (corpus / "doc0.txt").unlink()
        result = run_pipeline(corpus, config, embedder, tmp_path / "work")
        assert any(cid.startswith("doc0.txt#") for cid in result.index.chunk_ids)

    def test_failures_recorded_not_fatal(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, {"good.txt": "Fine text.", "bad.txt": b"\xff\xfe invalid".decode("latin1")})
        (corpus / "bad.txt").write_bytes(b"\xff\xfe\x00\x00 not utf8")
        result = run_pipeline(corpus, PIPE_CONFIG, ReferenceEmbedder(32), tmp_path / "work")
        assert result.documents["bad.txt"].extraction_status == "failed"
        assert any(cid.startswith("good.txt#") for cid in result.index.chunk_ids)

    def test_run_manifest_contents(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, SMALL_DOCS)
        result = run_pipeline(corpus, PIPE_CONFIG, ReferenceEmbedder(32), tmp_path / "work")
        manifest = json.loads((tmp_path / "work" / "run_manifest.json").read_text())
        assert manifest["embedder_identity"] == "reference-trigram-d32"
        assert manifest["config"]["strategy"] == "hisacc"
        assert "scan" in manifest["stage_timings"]
        assert manifest["counts"]["added"] == 4

    def test_ivf_pipeline_incremental(self, tmp_path):
        corpus = tmp_path / "corpus"
        write_corpus(corpus, SMALL_DOCS)
        config = PipelineConfig(
            strategy="sentence",
            chunking=PIPE_CONFIG.chunking,
            index_kind="ivf",
        )
        embedder = ReferenceEmbedder(32)
        first = run_pipeline(corpus, config, embedder, tmp_path / "work")
        assert first.index.kind == "ivf"
        (corpus / "extra.txt").write_text("Entirely new material about serialization controls.")
        second = run_pipeline(corpus, config, embedder, tmp_path / "work")
        assert second.delta_added == 1
        query = embedder.embed(["serialization controls"])[0]
        hits = second.index.search(query, 3).hits
        assert any(h.file_id == "extra.txt" for h in hits)


class TestAnswerRetrieve:
    def _index(self, embedder):
        texts = [f"passage number {i} about compliance topic {i}" for i in range(8)]
        vectors = embedder.embed(texts)
        chunks = [
            IndexedChunk(f"c{i}", vectors[i], f"f{i}", i, texts[i]) for i in range(8)
        ]
        return build_flat(chunks)

    def test_exact_text_rank_one(self, embedder64):
        index = self._index(embedder64)
        answer = answer_retrieve(
            "passage number 3 about compliance topic 3", 1, False, index, embedder64
        )
        assert answer.contexts[0].file_id == "f3"
        assert answer.contexts[0].retrieval_score == pytest.approx(1.0, abs=1e-12)

    def test_topk_nesting_without_rerank(self, embedder64):
        index = self._index(embedder64)
        small = answer_retrieve("compliance topic", 3, False, index, embedder64)
        large = answer_retrieve("compliance topic", 6, False, index, embedder64)
        assert [c.file_id for c in small.contexts] == [c.file_id for c in large.contexts][:3]

    def test_rerank_provenance_shows_both_orders(self, embedder64):
        index = self._index(embedder64)

        class FlipTopTwo:
            identity = "flip"
            max_input_tokens = 512

            def score(self, query, passages):
                scores = [float(len(passages) - i) for i in range(len(passages))]
                scores[0], scores[1] = scores[1], scores[0]
                return scores

        answer = answer_retrieve(
            "passage number 0 about compliance topic 0", 3, True, index, embedder64,
            scorer=FlipTopTwo(),
        )
        assert answer.rerank_used and not answer.rerank_fallback
        assert answer.contexts[0].retrieval_rank == 1
        assert answer.contexts[0].rerank_rank == 0
        assert answer.contexts[1].retrieval_rank == 0
        assert answer.contexts[1].rerank_rank == 1

    def test_empty_index_rejected(self, embedder64):
        with pytest.raises(EmptyIndexError):
            answer_retrieve("q", 3, False, build_flat([], dimension=64), embedder64)

    def test_scorer_failure_keeps_order_and_flags(self, embedder64):
        index = self._index(embedder64)

        class Boom:
            identity = "boom"
            max_input_tokens = 512

            def score(self, query, passages):
                raise RuntimeError("no scores today")

        answer = answer_retrieve("compliance topic", 4, True, index, embedder64, scorer=Boom())
        assert answer.rerank_fallback
        assert [c.retrieval_rank for c in answer.contexts] == [0, 1, 2, 3]


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("ablation")
    files, eval_records = make_split_topic_corpus()
    corpus = tmp_path / "corpus"
    write_corpus(corpus, files)
    connector = LocalDirectoryConnector(corpus)
    records = scan_source(connector)
    extractors = ExtractorRegistry.default()
    docs = {
        r.file_id: normalize_document(r, connector.fetch(r.file_id), extractors)
        for r in records
    }
    file_names = {r.file_id: r.file_name for r in records}
    embedder = ReferenceEmbedder(256)
    ablation = AblationConfig(
        chunking=ChunkingConfig(**SPLIT_TOPIC_CHUNKING),
        metrics=MetricConfig(embedder=embedder),
    )
    rows = run_ablation(
        docs, file_names, eval_records, ablation, embedder, LexicalOverlapScorer()
    )
    return rows, docs, file_names, eval_records, ablation, embedder


class TestAblation:
    def test_full_grid_shape(self, grid):
        rows = grid[0]
        assert len(rows) == 16
        labels = {(row["config"], row["K"]) for row in rows}
        assert len(labels) == 16
        for row in rows:
            for name in METRIC_NAMES:
                assert row[name] is not None

    def test_deterministic_rerun(self, grid):
        rows, docs, file_names, eval_records, ablation, embedder = grid
        again = run_ablation(
            docs, file_names, eval_records, ablation, embedder, LexicalOverlapScorer()
        )
        assert report_csv(again) == report_csv(rows)

    def test_hisacc_fim_dominates_rcs(self, grid):
        rows = grid[0]
        by = {(r["config"], r["K"]): r for r in rows}
        for k in (3, 5, 10, 15):
            assert by[("HiSACC", k)]["FIM"] >= by[("RCS", k)]["FIM"]
        assert by[("HiSACC", 3)]["FIM"] > by[("RCS", 3)]["FIM"]

    def test_report_formats(self, grid):
        rows = grid[0]
        csv_text = report_csv(rows)
        lines = csv_text.strip().splitlines()
        assert lines[0] == "config,K," + ",".join(METRIC_NAMES)
        assert len(lines) == 17
        table = report_table(rows)
        assert "HiSACC+rerank" in table

    def test_config_labels(self):
        assert config_label("rcs", False) == "RCS"
        assert config_label("hisacc", True) == "HiSACC+rerank"


class TestProfileLatency:
    def test_single_chunk_percentiles_defined(self, embedder64):
        vec = embedder64.embed(["only passage"])[0]
        index = build_flat([IndexedChunk("c0", vec, "f0", 0, "only passage")])
        rows = profile_latency(
            index, embedder64, LexicalOverlapScorer(), ["only passage"],
            k_values=(1,), repetitions=3,
        )
        assert {r.stage for r in rows} == {"retrieve", "retrieve+rerank"}
        for row in rows:
            assert row.p50 <= row.p90 <= row.p99

    def test_rerank_cost_grows_with_k(self, embedder64):
        texts = [
            " ".join(f"word{i}token{j}" for j in range(180)) for i in range(300)
        ]
        vectors = embedder64.embed(texts)
        chunks = [
            IndexedChunk(f"c{i:04d}", vectors[i], f"f{i}", i, texts[i])
            for i in range(300)
        ]
        index = build_flat(chunks)
        rows = profile_latency(
            index, embedder64, LexicalOverlapScorer(),
            ["word1token1 word2token2 word3token3"],
            k_values=(3, 15), repetitions=15,
        )
        rerank = {r.k: r.p50 for r in rows if r.stage == "retrieve+rerank"}
        assert rerank[15] > rerank[3]


class TestService:
    @pytest.fixture()
    def service(self, embedder64):
        texts = [f"passage number {i} about topic" for i in range(5)]
        vectors = embedder64.embed(texts)
        chunks = [IndexedChunk(f"c{i}", vectors[i], f"f{i}", i, texts[i]) for i in range(5)]
        index = build_flat(chunks)
        with RetrievalService(index, embedder64, scorer=LexicalOverlapScorer(), port=0) as svc:
            yield svc

    def test_health(self, service):
        assert requests.get(service.address + "/health").json() == {"status": "ok"}

    def test_query_matches_direct_call(self, service, embedder64):
        payload = {"question": "passage number 3 about topic", "k": 2, "rerank": True}
        via_http = requests.post(service.address + "/query", json=payload).json()
        direct = answer_retrieve(
            payload["question"], 2, True, service.index, embedder64,
            scorer=LexicalOverlapScorer(),
        ).as_dict()
        assert via_http == json.loads(json.dumps(direct))

    def test_malformed_body_rejected(self, service):
        response = requests.post(service.address + "/query", data=b"{broken")
        assert response.status_code == 400

    def test_missing_question_rejected(self, service):
        response = requests.post(service.address + "/query", json={"k": 3})
        assert response.status_code == 400

    def test_bad_k_rejected(self, service):
        response = requests.post(
            service.address + "/query", json={"question": "q", "k": 0}
        )
        assert response.status_code == 400

    def test_unknown_path_404(self, service):
        assert requests.get(service.address + "/nope").status_code == 404
