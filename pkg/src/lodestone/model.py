"""Trained-model bundle (encoder + retrieval heads + tokenizer) with
frozen-weight embedding and cross-encoder scoring helpers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .encoder import Encoder, EncoderConfig
from .losses import LossConfig
from .representation import (
    HybridRecord,
    build_pair_ids,
    dense_embed,
    rerank_score,
    sparse_weights,
)
from .tokenizer import CLS_ID, WordTokenizer
from .unpad import batch_from_sequences

HEAD_SPARSE = "heads.sparse.weight"
HEAD_RERANK = "heads.rerank.weight"

DEFAULT_QUERY_LEN = 512
DEFAULT_DOC_LEN = 1024


@dataclass
class ModelBundle:
    encoder: Encoder
    w_sparse: np.ndarray  # (H, 1)
    w_rerank: np.ndarray  # (H, 1)
    tokenizer: WordTokenizer
    loss_config: LossConfig
    stage: str = "untrained"

    @property
    def hidden_size(self) -> int:
        return self.encoder.config.hidden_size


def init_heads(config: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        HEAD_SPARSE: rng.normal(0.0, 0.02, size=(config.hidden_size, 1)).astype(config.dtype),
        HEAD_RERANK: rng.normal(0.0, 0.02, size=(config.hidden_size, 1)).astype(config.dtype),
    }


def save_bundle(directory: str | Path, bundle: ModelBundle) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = dict(bundle.encoder.state_arrays())
    arrays[HEAD_SPARSE] = bundle.w_sparse
    arrays[HEAD_RERANK] = bundle.w_rerank
    save_arrays(directory / "model.ckpt", arrays)
    bundle.tokenizer.save(directory / "tokenizer.json")
    meta = {
        "stage": bundle.stage,
        "encoder": bundle.encoder.config.to_dict(),
        "loss": bundle.loss_config.to_dict(),
    }
    (directory / "config.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")


def load_bundle(directory: str | Path) -> ModelBundle:
    directory = Path(directory)
    meta = json.loads((directory / "config.json").read_text(encoding="utf-8"))
    config = EncoderConfig.from_dict(meta["encoder"])
    arrays = load_arrays(directory / "model.ckpt")
    w_sparse = arrays.pop(HEAD_SPARSE)
    w_rerank = arrays.pop(HEAD_RERANK)
    return ModelBundle(
        encoder=Encoder(config, params=arrays),
        w_sparse=w_sparse,
        w_rerank=w_rerank,
        tokenizer=WordTokenizer.load(directory / "tokenizer.json"),
        loss_config=LossConfig.from_dict(meta["loss"]),
        stage=meta.get("stage", "untrained"),
    )


# ---------------------------------------------------------------------------
# Frozen-weight inference
# ---------------------------------------------------------------------------


class Embedder:
    """Dense + sparse extraction over batches of raw texts (eval mode)."""

    def __init__(self, bundle: ModelBundle, max_query_len: int = DEFAULT_QUERY_LEN,
                 max_doc_len: int = DEFAULT_DOC_LEN, texts_per_batch: int = 32):
        self.bundle = bundle
        cap = bundle.encoder.config.max_seq_len
        self.max_len = {"query": min(max_query_len, cap), "doc": min(max_doc_len, cap)}
        self.texts_per_batch = texts_per_batch

    def text_ids(self, text: str, kind: str = "doc") -> list[int]:
        budget = self.max_len[kind] - 1  # room for [CLS]
        return [CLS_ID] + self.bundle.tokenizer.encode(text)[:budget]

    def embed(self, items: list[tuple[str, str]], kind: str = "doc") -> list[HybridRecord]:
        """items: (id, text) pairs; returns one HybridRecord per item."""
        records: list[HybridRecord] = []
        for start in range(0, len(items), self.texts_per_batch):
            group = items[start : start + self.texts_per_batch]
            seqs = [self.text_ids(text, kind) for _, text in group]
            batch = batch_from_sequences(seqs)
            out = self.bundle.encoder.encode(batch)
            for b, (item_id, _) in enumerate(group):
                records.append(HybridRecord(
                    doc_id=item_id,
                    dense=dense_embed(out, b),
                    sparse=sparse_weights(out, b, self.bundle.w_sparse,
                                          self.bundle.tokenizer.special_ids),
                    token_count=len(seqs[b]) - 1,
                ))
        return records


class CrossScorer:
    """Cross-encoder relevance over '[CLS] query [SEP] document' pairs."""

    def __init__(self, bundle: ModelBundle, max_len: int | None = None,
                 pairs_per_batch: int = 16):
        self.bundle = bundle
        self.max_len = max_len or bundle.encoder.config.max_seq_len
        self.pairs_per_batch = pairs_per_batch

    def score_pairs(self, query: str, docs: list[str]) -> list[float]:
        tok = self.bundle.tokenizer
        q_ids = tok.encode(query)
        scores: list[float] = []
        for start in range(0, len(docs), self.pairs_per_batch):
            group = docs[start : start + self.pairs_per_batch]
            seqs = [build_pair_ids(q_ids, tok.encode(doc), self.max_len) for doc in group]
            out = self.bundle.encoder.encode(batch_from_sequences(seqs))
            scores.extend(rerank_score(out, self.bundle.w_rerank, b)
                          for b in range(len(group)))
        return scores
