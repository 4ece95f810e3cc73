"""First-stage retrieval and reranking: exact dense search over a contiguous
embedding matrix, posting-list sparse search, weighted score fusion with a
fixed dense coefficient of 1, and re-scoring of the top candidates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .representation import (
    DenseEmbedding,
    HybridRecord,
    SparseVector,
    matryoshka_slice,
)

DEFAULT_LAMBDA_SPARSE = 0.003  # geometric middle of the working 0.001..0.01 range
DEFAULT_RERANK_DEPTH = 100
CANDIDATE_POOL_FLOOR = 1000  # standard TREC run depth


class IndexError_(ValueError):
    """Invalid index construction or search request."""


@dataclass
class DenseIndex:
    doc_ids: list[str]
    matrix: np.ndarray  # (N, d_search), rows unit-norm

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if len(self.doc_ids) != self.matrix.shape[0]:
            raise IndexError_("one embedding row per doc id required")
        if self.matrix.size:
            norms = np.linalg.norm(self.matrix, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise IndexError_("dense index rows must be unit-norm")

    def __len__(self) -> int:
        return len(self.doc_ids)


@dataclass
class InvertedIndex:
    doc_ids: list[str]
    postings: dict[int, list[tuple[int, float]]]  # token -> [(ordinal, weight)]

    def __post_init__(self):
        for token, plist in self.postings.items():
            if any(w <= 0 for _, w in plist):
                raise IndexError_(f"non-positive posting weight under token {token}")
            ordinals = [o for o, _ in plist]
            if len(set(ordinals)) != len(ordinals):
                raise IndexError_(f"duplicate doc in posting list of token {token}")
            # keep lists ordered by doc id
            plist.sort(key=lambda ow: self.doc_ids[ow[0]])

    def __len__(self) -> int:
        return len(self.doc_ids)


class SearchHit(NamedTuple):
    doc_id: str
    score: float
    dense_score: float
    sparse_score: float


@dataclass
class SearchResult:
    query_id: str
    hits: list[SearchHit]

    def __post_init__(self):
        ids = [h.doc_id for h in self.hits]
        if len(set(ids)) != len(ids):
            raise IndexError_(f"duplicate doc ids in result for query {self.query_id}")
        scores = [h.score for h in self.hits]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise IndexError_(f"scores must be non-increasing for query {self.query_id}")

    def doc_ids(self) -> list[str]:
        return [h.doc_id for h in self.hits]


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def build(records: Sequence[HybridRecord], d_search: int) -> tuple[DenseIndex, InvertedIndex]:
    """Slice every record's dense side to ``d_search`` and invert the sparse side."""
    doc_ids: list[str] = []
    seen: set[str] = set()
    rows = []
    postings: dict[int, list[tuple[int, float]]] = {}
    for rec in records:
        if rec.doc_id in seen:
            raise IndexError_(f"duplicate doc id '{rec.doc_id}'")
        seen.add(rec.doc_id)
        ordinal = len(doc_ids)
        doc_ids.append(rec.doc_id)
        rows.append(matryoshka_slice(rec.dense, d_search).values)
        for token, weight in rec.sparse.weights.items():
            postings.setdefault(token, []).append((ordinal, weight))
    matrix = np.vstack(rows) if rows else np.zeros((0, d_search))
    return DenseIndex(doc_ids, matrix), InvertedIndex(doc_ids, postings)


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


def _top_k(doc_ids: Sequence[str], scores: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by score, ties broken by ascending doc id."""
    order = sorted(range(len(doc_ids)), key=lambda i: (-scores[i], doc_ids[i]))
    return [(doc_ids[i], float(scores[i])) for i in order[:k]]


def dense_search(index: DenseIndex, query: DenseEmbedding, k: int) -> list[tuple[str, float]]:
    """Exhaustive cosine scan; the query must be normalized at index width."""
    if k <= 0:
        raise IndexError_(f"k must be positive, got {k}")
    if query.dim != index.matrix.shape[1]:
        raise IndexError_(
            f"query width {query.dim} vs index width {index.matrix.shape[1]}"
        )
    if not len(index):
        return []
    scores = index.matrix @ query.values
    return _top_k(index.doc_ids, scores, k)


def sparse_search(index: InvertedIndex, query: SparseVector, k: int) -> list[tuple[str, float]]:
    """Posting-list accumulation; only docs sharing a token are candidates."""
    if k <= 0:
        raise IndexError_(f"k must be positive, got {k}")
    accumulator: dict[int, float] = {}
    for token, q_weight in query.weights.items():
        for ordinal, d_weight in index.postings.get(token, ()):
            accumulator[ordinal] = accumulator.get(ordinal, 0.0) + q_weight * d_weight
    if not accumulator:
        return []
    ordinals = list(accumulator.keys())
    scores = np.array([accumulator[o] for o in ordinals])
    ids = [index.doc_ids[o] for o in ordinals]
    return _top_k(ids, scores, k)


def hybrid_search(dense_index: DenseIndex, inverted_index: InvertedIndex,
                  q_dense: DenseEmbedding, q_sparse: SparseVector, k: int,
                  lambda_sparse: float = DEFAULT_LAMBDA_SPARSE,
                  query_id: str = "q") -> SearchResult:
    """Fused = 1 * dense + lambda * sparse over the union of both candidate
    pools, substituting 0 for a missing component."""
    if lambda_sparse < 0:
        raise IndexError_("lambda_sparse must be non-negative")
    if k < 1:
        raise IndexError_(f"k must be positive, got {k}")
    pool = min(max(k, CANDIDATE_POOL_FLOOR), max(len(dense_index), 1))
    dense_hits = dict(dense_search(dense_index, q_dense, pool))
    # Degenerate fusion: with the sparse coefficient at 0 the sparse pool is
    # not consulted, so the result is exactly the dense ranking.
    sparse_hits = (
        dict(sparse_search(inverted_index, q_sparse, pool)) if lambda_sparse > 0 else {}
    )
    candidates = sorted(set(dense_hits) | set(sparse_hits))
    if not candidates:
        return SearchResult(query_id, [])
    fused = []
    for doc_id in candidates:
        d = dense_hits.get(doc_id, 0.0)
        s = sparse_hits.get(doc_id, 0.0)
        fused.append(SearchHit(doc_id, 1.0 * d + lambda_sparse * s, d, s))
    fused.sort(key=lambda h: (-h.score, h.doc_id))
    return SearchResult(query_id, fused[:k])


def rerank(candidates: SearchResult, score_fn: Callable[[str], float],
           top_n: int = DEFAULT_RERANK_DEPTH) -> SearchResult:
    """Re-score the first ``top_n`` hits and sort them by the new score
    (stable, so equal scores keep their recall order); any remainder stays
    below in original order, carried on monotonically decreasing scores.
    """
    if not candidates.hits:
        return SearchResult(candidates.query_id, [])
    head = candidates.hits[:top_n]
    tail = candidates.hits[top_n:]
    rescored = [
        SearchHit(h.doc_id, float(score_fn(h.doc_id)), h.dense_score, h.sparse_score)
        for h in head
    ]
    rescored.sort(key=lambda h: -h.score)
    floor = min(h.score for h in rescored)
    kept = [
        SearchHit(h.doc_id, floor - 1.0 - i, h.dense_score, h.sparse_score)
        for i, h in enumerate(tail)
    ]
    return SearchResult(candidates.query_id, rescored + kept)


# ---------------------------------------------------------------------------
# TREC run output
# ---------------------------------------------------------------------------


def write_run(path: str | Path, results: Iterable[SearchResult], tag: str = "lodestone") -> None:
    """Standard 'qid Q0 docid rank score tag' lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            for rank, hit in enumerate(result.hits, start=1):
                fh.write(f"{result.query_id} Q0 {hit.doc_id} {rank} {hit.score:.6f} {tag}\n")


# ---------------------------------------------------------------------------
# Persistence: checkpoint container + postings sidecar
# ---------------------------------------------------------------------------


def save_index(directory: str | Path, dense: DenseIndex, inverted: InvertedIndex,
               meta: dict | None = None) -> None:
    """Write dense matrix (container), doc ids (text), postings (sidecar).

    Sidecar records, little-endian: token_id u32, count u32, then count
    pairs of (doc_ordinal u32, weight f64).
    """
    from .checkpoint import save_arrays

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_arrays(directory / "dense.ckpt", {"embeddings": dense.matrix})
    (directory / "docids.txt").write_text(
        "".join(f"{d}\n" for d in dense.doc_ids), encoding="utf-8"
    )
    with open(directory / "postings.bin", "wb") as fh:
        for token in sorted(inverted.postings):
            plist = inverted.postings[token]
            fh.write(struct.pack("<II", token, len(plist)))
            for ordinal, weight in plist:
                fh.write(struct.pack("<Id", ordinal, weight))
    info = {"n_docs": len(dense), "d_search": int(dense.matrix.shape[1])}
    info.update(meta or {})
    (directory / "meta.json").write_text(json.dumps(info, indent=2), encoding="utf-8")


def load_index(directory: str | Path) -> tuple[DenseIndex, InvertedIndex, dict]:
    from .checkpoint import load_arrays

    directory = Path(directory)
    arrays = load_arrays(directory / "dense.ckpt")
    doc_ids = (directory / "docids.txt").read_text(encoding="utf-8").splitlines()
    postings: dict[int, list[tuple[int, float]]] = {}
    raw = (directory / "postings.bin").read_bytes()
    off = 0
    while off < len(raw):
        if off + 8 > len(raw):
            raise IndexError_("postings.bin: truncated record header")
        token, count = struct.unpack_from("<II", raw, off)
        off += 8
        plist = []
        for _ in range(count):
            if off + 12 > len(raw):
                raise IndexError_("postings.bin: truncated posting pair")
            ordinal, weight = struct.unpack_from("<Id", raw, off)
            off += 12
            plist.append((ordinal, weight))
        postings[token] = plist
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    return DenseIndex(doc_ids, arrays["embeddings"]), InvertedIndex(doc_ids, postings), meta
