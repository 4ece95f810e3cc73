"""Frozen-weight representation extraction: dense [CLS] embeddings,
matryoshka prefix slices, sparse term weights, and cross-encoder scores.

Everything here is inference-side plain numpy; the differentiable training
counterparts live in losses.py.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .encoder import EncoderOutput
from .tokenizer import CLS_ID, SEP_ID, SPECIAL_IDS


class RepresentationError(ValueError):
    """Degenerate or inconsistent representation request."""


@dataclass
class DenseEmbedding:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise RepresentationError("dense embedding must be a vector")
        if self.normalized and abs(np.linalg.norm(self.values) - 1.0) > 1e-6:
            raise RepresentationError("normalized flag set on a non-unit vector")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class SparseVector:
    """Nonzero per-token weights; keys are token ids, all weights positive."""

    weights: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        cleaned = {}
        for token, w in self.weights.items():
            w = float(w)
            if w < 0:
                raise RepresentationError(f"negative sparse weight for token {token}")
            if w > 0:
                cleaned[int(token)] = w
        self.weights = cleaned

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class HybridRecord:
    doc_id: str
    dense: DenseEmbedding
    sparse: SparseVector
    token_count: int = 0

    def __post_init__(self):
        if not self.dense.normalized:
            raise RepresentationError(f"record {self.doc_id}: dense side must be normalized")


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def dense_embed(output: EncoderOutput, seq_index: int) -> DenseEmbedding:
    """L2-normalized copy of the sequence's [CLS] hidden state."""
    cls = output.cls_hiddens.data
    if not 0 <= seq_index < cls.shape[0]:
        raise RepresentationError(f"sequence index {seq_index} out of range")
    row = np.asarray(cls[seq_index], dtype=np.float64)
    norm = float(np.linalg.norm(row))
    if norm == 0.0:
        raise RepresentationError("cannot normalize a zero [CLS] vector")
    return DenseEmbedding(row / norm, normalized=True)


def matryoshka_slice(emb: DenseEmbedding, d: int) -> DenseEmbedding:
    """Renormalized prefix of the first ``d`` dimensions (d a multiple of 32)."""
    if d <= 0 or d % 32 != 0 or d > emb.dim:
        raise RepresentationError(
            f"slice width {d} invalid for a {emb.dim}-dim embedding "
            "(need a positive multiple of 32, at most the full width)"
        )
    prefix = emb.values[:d]
    norm = float(np.linalg.norm(prefix))
    if norm == 0.0:
        raise RepresentationError(f"zero vector after slicing to {d} dimensions")
    return DenseEmbedding(prefix / norm, normalized=True)


def cosine(a: DenseEmbedding, b: DenseEmbedding) -> float:
    """Dot product of normalized embeddings."""
    if not (a.normalized and b.normalized):
        raise RepresentationError("cosine expects normalized embeddings")
    return float(a.values @ b.values)


def sparse_weights(output: EncoderOutput, seq_index: int, w_sparse: np.ndarray,
                   special_ids: frozenset[int] = SPECIAL_IDS) -> SparseVector:
    """ReLU-projected term weight per distinct real token.

    A token occurring several times keeps its maximum weight; zero-weight
    tokens are omitted; special tokens never receive weights.
    """
    w = np.asarray(w_sparse, dtype=np.float64).reshape(-1)
    batch = output.batch
    if not 0 <= seq_index < batch.batch_size:
        raise RepresentationError(f"sequence index {seq_index} out of range")
    lo, hi = batch.cu_seqlens[seq_index], batch.cu_seqlens[seq_index + 1]
    hiddens = np.asarray(output.token_hiddens.data[lo:hi], dtype=np.float64)
    if w.shape[0] != hiddens.shape[1]:
        raise RepresentationError(
            f"sparse projection of width {w.shape[0]} vs hidden size {hiddens.shape[1]}"
        )
    raw = np.maximum(hiddens @ w, 0.0)
    weights: dict[int, float] = {}
    for token, value in zip(batch.tokens[lo:hi].tolist(), raw.tolist()):
        if token in special_ids:
            continue
        if value > weights.get(token, 0.0):
            weights[token] = value
    return SparseVector({t: v for t, v in weights.items() if v > 0.0})


def sparse_score(q: SparseVector, d: SparseVector) -> float:
    """Joint importance of co-occurring terms: sum of weight products."""
    if len(q.weights) > len(d.weights):
        q, d = d, q
    return float(sum(w * d.weights[t] for t, w in q.weights.items() if t in d.weights))


def rerank_score(pair_output: EncoderOutput, w_rerank: np.ndarray,
                 seq_index: int = 0) -> float:
    """Relevance of an encoded '[CLS] query [SEP] document' pair: W . h_cls."""
    w = np.asarray(w_rerank, dtype=np.float64).reshape(-1)
    cls = np.asarray(pair_output.cls_hiddens.data[seq_index], dtype=np.float64)
    if w.shape[0] != cls.shape[0]:
        raise RepresentationError(
            f"rerank projection of width {w.shape[0]} vs hidden size {cls.shape[0]}"
        )
    return float(cls @ w)


def build_pair_ids(query_ids: list[int], doc_ids: list[int], max_len: int,
                   cls_id: int = CLS_ID, sep_id: int = SEP_ID) -> list[int]:
    """'[CLS] q [SEP] d' ids for the cross-encoder, document truncated first."""
    if max_len < 3:
        raise RepresentationError("pair encoding needs room for [CLS] and [SEP]")
    query = list(query_ids)[: max_len - 2]
    budget = max_len - 2 - len(query)
    return [cls_id] + query + [sep_id] + list(doc_ids)[:budget]


# ---------------------------------------------------------------------------
# Embedding dump format
# ---------------------------------------------------------------------------


def write_embeddings(path: str | Path, records: Iterable[HybridRecord]) -> None:
    """JSONL per document: {"id", "dense": [...], "sparse": {token_id: w}}."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "id": rec.doc_id,
                "dense": [round(float(v), 10) for v in rec.dense.values],
                "sparse": {str(t): round(float(w), 10)
                           for t, w in sorted(rec.sparse.weights.items())},
                "token_count": rec.token_count,
            }) + "\n")


def read_embeddings(path: str | Path) -> Iterator[HybridRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                values = np.asarray(obj["dense"], dtype=np.float64)
                norm = float(np.linalg.norm(values))
                if norm == 0.0:
                    raise RepresentationError("zero dense vector")
                yield HybridRecord(
                    doc_id=str(obj["id"]),
                    dense=DenseEmbedding(values / norm, normalized=True),
                    sparse=SparseVector({int(t): float(w)
                                         for t, w in obj.get("sparse", {}).items()}),
                    token_count=int(obj.get("token_count", 0)),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise RepresentationError(f"{path}:{lineno}: {exc}") from None
