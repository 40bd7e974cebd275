"""In-process vector store: exact flat search and an IVF-style coarse index.

Stored vectors are L2-normalized once at insert, so cosine similarity is a
plain dot product at query time. Ranking ties break by ascending chunk_id
everywhere; every search is therefore fully deterministic, which the golden
tests rely on.

The IVF index clusters normalized vectors with seeded k-means (k-means++
style seeding, a fixed number of iterations) and scans the ``nprobe``
closest inverted lists per query. Incremental upserts assign new vectors to
the nearest existing centroid and never move centroids; ``rebuild`` exists
for when drift warrants re-clustering.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    CorruptIndexError,
    DimensionMismatchError,
    DuplicateChunkIdError,
    IndexVersionError,
    ZeroVectorError,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class IndexedChunk:
    """An embedded chunk as stored in the index."""

    chunk_id: str
    vector: np.ndarray
    file_id: str
    chunk_index: int
    text: str


@dataclass(frozen=True)
class IvfParams:
    nlist: int
    nprobe: int
    kmeans_iters: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.nlist < 1:
            raise ValueError("nlist must be >= 1")
        if not 1 <= self.nprobe <= self.nlist:
            raise ValueError("nprobe must satisfy 1 <= nprobe <= nlist")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be >= 1")


@dataclass(frozen=True)
class ScoredHit:
    chunk_id: str
    similarity: float
    file_id: str
    chunk_index: int
    text: str


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked hits (similarity non-increasing, ties by chunk_id) plus the query."""

    hits: Tuple[ScoredHit, ...]
    query_vector: np.ndarray


def _normalize(vector: np.ndarray, dimension: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(vector, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatchError(f"expected a 1-d vector, got shape {arr.shape}")
    if dimension is not None and arr.shape[0] != dimension:
        raise DimensionMismatchError(
            f"vector dimension {arr.shape[0]} does not match index dimension {dimension}"
        )
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ZeroVectorError("cannot index or query an all-zero vector")
    return arr / norm


class FlatIndex:
    """Exact top-K cosine retrieval by full scan over normalized vectors."""

    kind = "flat"

    def __init__(self, dimension: int):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self._ids: List[str] = []
        self._pos: Dict[str, int] = {}
        self._vectors: List[np.ndarray] = []
        self._meta: List[Tuple[str, int, str]] = []  # (file_id, chunk_index, text)
        self._matrix: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def chunk_ids(self) -> List[str]:
        return list(self._ids)

    def upsert(self, chunks: Iterable[IndexedChunk]) -> None:
        """Insert new chunks or replace ones whose chunk_id already exists."""
        for chunk in chunks:
            vec = _normalize(chunk.vector, self.dimension)
            meta = (chunk.file_id, chunk.chunk_index, chunk.text)
            pos = self._pos.get(chunk.chunk_id)
            if pos is None:
                self._pos[chunk.chunk_id] = len(self._ids)
                self._ids.append(chunk.chunk_id)
                self._vectors.append(vec)
                self._meta.append(meta)
            else:
                self._vectors[pos] = vec
                self._meta[pos] = meta
        self._matrix = None

    def remove(self, chunk_ids: Iterable[str]) -> None:
        """Drop chunks; unknown ids are a warning, not an error."""
        doomed = set()
        for cid in chunk_ids:
            if cid in self._pos:
                doomed.add(cid)
            else:
                logger.warning("remove: unknown chunk_id %r (no-op)", cid)
        if not doomed:
            return
        keep = [i for i, cid in enumerate(self._ids) if cid not in doomed]
        self._ids = [self._ids[i] for i in keep]
        self._vectors = [self._vectors[i] for i in keep]
        self._meta = [self._meta[i] for i in keep]
        self._pos = {cid: i for i, cid in enumerate(self._ids)}
        self._matrix = None

    @classmethod
    def _from_stored(
        cls,
        dimension: int,
        ids: Sequence[str],
        matrix: np.ndarray,
        meta: Sequence[Tuple[str, int, str]],
    ) -> "FlatIndex":
        """Rebuild from persisted, already-normalized rows without touching them."""
        index = cls(dimension)
        index._ids = list(ids)
        index._pos = {cid: i for i, cid in enumerate(index._ids)}
        index._vectors = [matrix[i] for i in range(matrix.shape[0])]
        index._meta = list(meta)
        return index

    def _stacked(self) -> np.ndarray:
        if self._matrix is None:
            if self._vectors:
                self._matrix = np.vstack(self._vectors)
            else:
                self._matrix = np.empty((0, self.dimension), dtype=np.float64)
        return self._matrix

    def search(self, query_vector: np.ndarray, k: int) -> RetrievalResult:
        if k < 1:
            raise ValueError("k must be >= 1")
        query = _normalize(query_vector, self.dimension)
        if not self._ids:
            return RetrievalResult(hits=(), query_vector=query)
        sims = self._stacked() @ query
        order = _ranked_order(sims, self._ids)
        hits = tuple(self._hit(pos, sims) for pos in order[:k])
        return RetrievalResult(hits=hits, query_vector=query)

    def _hit(self, pos: int, sims: np.ndarray) -> ScoredHit:
        file_id, chunk_index, text = self._meta[pos]
        return ScoredHit(
            chunk_id=self._ids[pos],
            similarity=float(sims[pos]),
            file_id=file_id,
            chunk_index=chunk_index,
            text=text,
        )

    def chunk(self, chunk_id: str) -> IndexedChunk:
        pos = self._pos[chunk_id]
        file_id, chunk_index, text = self._meta[pos]
        return IndexedChunk(chunk_id, self._vectors[pos].copy(), file_id, chunk_index, text)


def _ranked_order(sims: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """Positions sorted by descending similarity, then ascending chunk_id."""
    id_arr = np.asarray(ids)
    return np.lexsort((id_arr, -sims))


def build_flat(chunks: Sequence[IndexedChunk], dimension: Optional[int] = None) -> FlatIndex:
    """Exact index over the given chunks. Duplicate chunk_ids are rejected."""
    if dimension is None:
        if not chunks:
            raise ValueError("dimension is required for an empty index")
        dimension = int(np.asarray(chunks[0].vector).shape[0])
    seen = set()
    for chunk in chunks:
        if chunk.chunk_id in seen:
            raise DuplicateChunkIdError(f"duplicate chunk_id {chunk.chunk_id!r}")
        seen.add(chunk.chunk_id)
    index = FlatIndex(dimension)
    index.upsert(chunks)
    return index


# ---------------------------------------------------------------------------
# IVF
# ---------------------------------------------------------------------------


def _kmeans(vectors: np.ndarray, nlist: int, iters: int, seed: int) -> np.ndarray:
    """Seeded k-means++ over normalized rows; centroids stay L2-normalized."""
    rng = np.random.default_rng(seed)
    n = vectors.shape[0]
    centroids = np.empty((nlist, vectors.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = vectors[first]
    # k-means++ style: sample next centers proportionally to cosine distance.
    for j in range(1, nlist):
        sims = vectors @ centroids[:j].T
        dist = 1.0 - np.max(sims, axis=1)
        dist = np.clip(dist, 0.0, None)
        total = float(dist.sum())
        if total <= 0.0:
            centroids[j] = vectors[int(rng.integers(n))]
            continue
        pick = np.searchsorted(np.cumsum(dist), rng.random() * total)
        centroids[j] = vectors[min(int(pick), n - 1)]
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        assign = np.argmax(vectors @ centroids.T, axis=1)
        for j in range(nlist):
            members = vectors[assign == j]
            if len(members) == 0:
                continue  # empty cluster keeps its previous centroid
            mean = members.mean(axis=0)
            norm = float(np.linalg.norm(mean))
            if norm > 0.0:
                centroids[j] = mean / norm
    return centroids


class IvfIndex:
    """Coarse inverted-file index over normalized vectors."""

    kind = "ivf"

    def __init__(self, dimension: int, params: IvfParams, centroids: np.ndarray):
        self.dimension = dimension
        self.params = params
        self.centroids = centroids
        self._flat = FlatIndex(dimension)  # storage + metadata reuse
        self._assignments: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._flat)

    @property
    def chunk_ids(self) -> List[str]:
        return self._flat.chunk_ids

    def _nearest_centroid(self, vec: np.ndarray) -> int:
        sims = self.centroids @ vec
        return int(np.argmax(sims))  # ties: lowest centroid id wins

    def upsert(self, chunks: Iterable[IndexedChunk]) -> None:
        chunks = list(chunks)
        self._flat.upsert(chunks)
        for chunk in chunks:
            vec = _normalize(chunk.vector, self.dimension)
            self._assignments[chunk.chunk_id] = self._nearest_centroid(vec)

    def remove(self, chunk_ids: Iterable[str]) -> None:
        chunk_ids = list(chunk_ids)
        self._flat.remove(chunk_ids)
        for cid in chunk_ids:
            self._assignments.pop(cid, None)

    def search(
        self, query_vector: np.ndarray, k: int, nprobe: Optional[int] = None
    ) -> RetrievalResult:
        if k < 1:
            raise ValueError("k must be >= 1")
        nprobe = self.params.nprobe if nprobe is None else nprobe
        nprobe = min(nprobe, self.params.nlist)
        query = _normalize(query_vector, self.dimension)
        if len(self._flat) == 0:
            return RetrievalResult(hits=(), query_vector=query)
        centroid_sims = self.centroids @ query
        probe = np.lexsort((np.arange(len(centroid_sims)), -centroid_sims))[:nprobe]
        probe_set = set(int(p) for p in probe)
        positions = [
            self._flat._pos[cid]
            for cid, lst in self._assignments.items()
            if lst in probe_set
        ]
        if not positions:
            return RetrievalResult(hits=(), query_vector=query)
        positions.sort()
        matrix = self._flat._stacked()[positions]
        sims = matrix @ query
        ids = [self._flat._ids[p] for p in positions]
        order = _ranked_order(sims, ids)
        hits = []
        for local in order[:k]:
            pos = positions[int(local)]
            file_id, chunk_index, text = self._flat._meta[pos]
            hits.append(
                ScoredHit(
                    chunk_id=self._flat._ids[pos],
                    similarity=float(sims[int(local)]),
                    file_id=file_id,
                    chunk_index=chunk_index,
                    text=text,
                )
            )
        return RetrievalResult(hits=tuple(hits), query_vector=query)


def build_ivf(chunks: Sequence[IndexedChunk], params: IvfParams) -> IvfIndex:
    """Cluster normalized chunk vectors and build the inverted lists."""
    if params.nlist > len(chunks):
        raise ValueError(
            f"nlist={params.nlist} exceeds corpus size {len(chunks)}"
        )
    dimension = int(np.asarray(chunks[0].vector).shape[0])
    seen = set()
    normalized = []
    for chunk in chunks:
        if chunk.chunk_id in seen:
            raise DuplicateChunkIdError(f"duplicate chunk_id {chunk.chunk_id!r}")
        seen.add(chunk.chunk_id)
        normalized.append(_normalize(chunk.vector, dimension))
    matrix = np.vstack(normalized)
    centroids = _kmeans(matrix, params.nlist, params.kmeans_iters, params.seed)
    index = IvfIndex(dimension, params, centroids)
    index.upsert(chunks)
    return index


def rebuild_ivf(index: IvfIndex, params: Optional[IvfParams] = None) -> IvfIndex:
    """Re-cluster from the current chunk set (the answer to centroid drift)."""
    params = params or index.params
    chunks = [index._flat.chunk(cid) for cid in index.chunk_ids]
    return build_ivf(chunks, params)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def search_topk(index, query_vector: np.ndarray, k: int) -> RetrievalResult:
    """Uniform entry point over flat and IVF indexes."""
    return index.search(query_vector, k)


def persist(index, path: str | Path) -> None:
    """Write a versioned index container (zip of metadata + arrays)."""
    path = Path(path)
    flat = index if isinstance(index, FlatIndex) else index._flat
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": index.kind,
        "dimension": index.dimension,
        "count": len(flat),
    }
    if isinstance(index, IvfIndex):
        meta.update(
            nlist=index.params.nlist,
            nprobe=index.params.nprobe,
            kmeans_iters=index.params.kmeans_iters,
            seed=index.params.seed,
        )
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, sort_keys=True))
        zf.writestr("vectors.npy", _npy_bytes(flat._stacked()))
        records = [
            {"chunk_id": cid, "file_id": m[0], "chunk_index": m[1], "text": m[2]}
            for cid, m in zip(flat._ids, flat._meta)
        ]
        zf.writestr(
            "chunks.jsonl",
            "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records),
        )
        if isinstance(index, IvfIndex):
            zf.writestr("centroids.npy", _npy_bytes(index.centroids))
            assigns = np.array(
                [index._assignments[cid] for cid in flat._ids], dtype=np.int64
            )
            zf.writestr("assignments.npy", _npy_bytes(assigns))


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def load(path: str | Path):
    """Load a persisted index; truncated or unreadable files raise CorruptIndexError."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            version = meta.get("format_version")
            if version != FORMAT_VERSION:
                raise IndexVersionError(f"unsupported index format version {version!r}")
            vectors = np.load(io.BytesIO(zf.read("vectors.npy")))
            records = [
                json.loads(line)
                for line in zf.read("chunks.jsonl").decode("utf-8").splitlines()
                if line
            ]
            if meta["count"] != len(records) or vectors.shape[0] != len(records):
                raise CorruptIndexError("record count does not match header")
            ids = [r["chunk_id"] for r in records]
            row_meta = [(r["file_id"], r["chunk_index"], r["text"]) for r in records]
            flat = FlatIndex._from_stored(meta["dimension"], ids, vectors, row_meta)
            if meta["kind"] == "flat":
                return flat
            if meta["kind"] == "ivf":
                params = IvfParams(
                    nlist=meta["nlist"],
                    nprobe=meta["nprobe"],
                    kmeans_iters=meta["kmeans_iters"],
                    seed=meta["seed"],
                )
                centroids = np.load(io.BytesIO(zf.read("centroids.npy")))
                assigns = np.load(io.BytesIO(zf.read("assignments.npy")))
                index = IvfIndex(meta["dimension"], params, centroids)
                index._flat = flat
                index._assignments = {cid: int(a) for cid, a in zip(ids, assigns)}
                return index
            raise CorruptIndexError(f"unknown index kind {meta['kind']!r}")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError, EOFError) as exc:
        raise CorruptIndexError(f"unreadable index file {path}: {exc}") from exc
