"""Stage trainers: the two-phase MLM curriculum, contrastive pre-training on
in-batch negatives, the combined matryoshka+sparse fine-tune with
length-grouped dynamic batching, and the cross-encoder reranker fine-tune.

Every trainer is deterministic under its RunConfig seed and returns the
updated model bundle plus a per-step loss log.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .encoder import Encoder, EncoderConfig
from .losses import (
    LossConfig,
    batch_dense_loss,
    l2_normalize,
    mlm_loss,
    rerank_loss,
    sparse_activations,
    trm_loss,
)
from .model import HEAD_RERANK, HEAD_SPARSE, ModelBundle, init_heads
from .optim import Adam, linear_schedule
from .pipeline import (
    Document,
    TrainingExample,
    check_finetune_shape,
    chunk,
    downsample_short,
    dynamic_batches,
    group_documents,
    group_pairs,
    language_sampling_probs,
    mlm_mask,
    sample_batch,
)
from .representation import build_pair_ids
from .tensor import ComputeGraph, Tensor, forward_backward
from .tokenizer import CLS_ID, WordTokenizer
from .unpad import batch_from_sequences


@dataclass
class StageResult:
    bundle: ModelBundle
    rows: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.rows]


def write_loss_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                             for k, v in row.items()})


# ---------------------------------------------------------------------------
# Bundle setup
# ---------------------------------------------------------------------------


def _prepare_bundle(cfg: RunConfig, texts: list[str],
                    init_from: ModelBundle | None) -> ModelBundle:
    """Continue from a checkpoint (stage rope base applied) or start fresh."""
    if init_from is not None:
        enc_cfg = init_from.encoder.config
        if enc_cfg.rope_base != cfg.rope_base:
            from .encoder import context_scaling

            enc_cfg = context_scaling(enc_cfg, cfg.rope_base / enc_cfg.rope_base)
        encoder = Encoder(enc_cfg, params=init_from.encoder.state_arrays())
        return ModelBundle(encoder, init_from.w_sparse.copy(), init_from.w_rerank.copy(),
                           init_from.tokenizer, cfg.loss, stage=cfg.stage)
    tokenizer = WordTokenizer.train(texts)
    enc_cfg = EncoderConfig(
        num_layers=cfg.num_layers,
        hidden_size=cfg.hidden_size,
        num_heads=cfg.num_heads,
        ffn_inner=cfg.ffn_inner,
        vocab_size=tokenizer.vocab_size,
        rope_base=cfg.rope_base,
        max_seq_len=cfg.max_seq_len,
        dropout=cfg.dropout,
        precision=cfg.precision,
    )
    heads = init_heads(enc_cfg, seed=cfg.seed)
    return ModelBundle(Encoder(enc_cfg, seed=cfg.seed), heads[HEAD_SPARSE],
                       heads[HEAD_RERANK], tokenizer, cfg.loss, stage=cfg.stage)


def _optimizer(cfg: RunConfig, params: dict[str, Tensor]) -> Adam:
    return Adam(params, lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def _cls_and_truncate(ids: list[int], budget: int) -> list[int]:
    return [CLS_ID] + ids[: budget - 1]


# ---------------------------------------------------------------------------
# Stage 1/2: masked language modeling
# ---------------------------------------------------------------------------


def train_mlm(cfg: RunConfig, docs: list[Document],
              init_from: ModelBundle | None = None) -> StageResult:
    rng = np.random.default_rng(cfg.seed)
    bundle = _prepare_bundle(cfg, [d.text for d in docs], init_from)
    tokenizer = bundle.tokenizer
    if cfg.stage == "mlm-long":
        docs = downsample_short(docs, cfg.effective_chunk_len, cfg.keep_short_prob, rng,
                                lambda d: len(d.text.split()))
    sources = group_documents(docs)
    probs = language_sampling_probs([s.count(cfg.sampling_unit) for s in sources], cfg.alpha)
    opt = _optimizer(cfg, bundle.encoder.params)
    chunk_budget = cfg.effective_chunk_len
    rows = []
    for step in range(cfg.steps):
        _, batch_docs = sample_batch(sources, probs, cfg.batch_size, rng)
        seqs: list[np.ndarray] = []
        labels: list[np.ndarray] = []
        indices: list[np.ndarray] = []
        offset = 0
        for doc in batch_docs:
            ids = tokenizer.encode(doc.text)
            if not ids:
                continue
            pieces = chunk(ids, chunk_budget - 1)
            piece = pieces[int(rng.integers(0, len(pieces)))]
            corrupted, piece_labels, piece_idx = mlm_mask(
                [CLS_ID] + piece, cfg.mask_prob, rng, tokenizer.vocab_size,
                tokenizer.special_ids,
            )
            seqs.append(corrupted)
            labels.append(piece_labels)
            indices.append(piece_idx + offset)
            offset += len(corrupted)
        batch = batch_from_sequences(seqs)
        flat_labels = np.concatenate(labels) if labels else np.array([], dtype=np.int64)
        flat_idx = np.concatenate(indices) if indices else np.array([], dtype=np.int64)
        opt.zero_grad()
        graph = ComputeGraph()
        with graph:
            out = bundle.encoder.encode(batch, train=True, rng=rng)
            logits = bundle.encoder.mlm_logits(out, flat_idx)
            loss = mlm_loss(logits, flat_labels)
        forward_backward(graph, loss)
        opt.step(lr=cfg.lr * linear_schedule(step, cfg.steps, cfg.warmup_ratio))
        rows.append({"step": step, "loss": loss.item()})
    return StageResult(bundle, rows)


# ---------------------------------------------------------------------------
# Stage 3: contrastive pre-training (in-batch negatives only)
# ---------------------------------------------------------------------------


def _encode_cls(bundle: ModelBundle, seqs: list[list[int]], train: bool, rng,
                sub_batch: int | None = None):
    """Encode sequences (optionally in sub-batches) and gather [CLS] rows.

    Returns (cls (n, H) tensor, per-sequence (hiddens, tokens) list). The
    sub-batch path encodes chunks iteratively and gathers the embeddings,
    never letting attention cross sequence boundaries.
    """
    size = sub_batch or len(seqs)
    cls_parts = []
    per_seq = []
    for start in range(0, len(seqs), size):
        group = seqs[start : start + size]
        batch = batch_from_sequences(group)
        out = bundle.encoder.encode(batch, train=train, rng=rng)
        cls_parts.append(out.cls_hiddens)
        for b in range(len(group)):
            lo, hi = int(batch.cu_seqlens[b]), int(batch.cu_seqlens[b + 1])
            per_seq.append((out.token_hiddens[lo:hi, :], batch.tokens[lo:hi]))
    cls = cls_parts[0] if len(cls_parts) == 1 else T.concat(cls_parts, axis=0)
    return cls, per_seq


def _in_batch_accuracy(q_emb: np.ndarray, d_emb: np.ndarray, positives: np.ndarray) -> float:
    scores = q_emb @ d_emb.T
    return float(np.mean(scores.argmax(axis=1) == positives))


def train_contrastive(cfg: RunConfig, pairs: list[TrainingExample],
                      init_from: ModelBundle | None = None) -> StageResult:
    rng = np.random.default_rng(cfg.seed)
    texts = [p.query for p in pairs] + [p.positive for p in pairs]
    bundle = _prepare_bundle(cfg, texts, init_from)
    tokenizer = bundle.tokenizer
    sources = group_pairs(pairs)
    probs = language_sampling_probs([s.count(cfg.sampling_unit) for s in sources], cfg.alpha)
    opt = _optimizer(cfg, bundle.encoder.params)
    q_budget = min(cfg.max_query_len, bundle.encoder.config.max_seq_len)
    d_budget = min(cfg.max_doc_len, bundle.encoder.config.max_seq_len)
    rows = []
    for step in range(cfg.steps):
        _, batch_pairs = sample_batch(sources, probs, cfg.batch_size, rng)
        n = len(batch_pairs)
        seqs = [_cls_and_truncate(tokenizer.encode(p.query), q_budget) for p in batch_pairs]
        seqs += [_cls_and_truncate(tokenizer.encode(p.positive), d_budget) for p in batch_pairs]
        opt.zero_grad()
        graph = ComputeGraph()
        with graph:
            cls, _ = _encode_cls(bundle, seqs, train=True, rng=rng)
            q_emb = l2_normalize(cls[0:n, :])
            d_emb = l2_normalize(cls[n : 2 * n, :])
            loss = batch_dense_loss(q_emb, d_emb, np.arange(n), cfg.loss,
                                    tau=cfg.loss.tau_dense)
        forward_backward(graph, loss)
        opt.step(lr=cfg.lr * linear_schedule(step, cfg.steps, cfg.warmup_ratio))
        rows.append({
            "step": step,
            "loss": loss.item(),
            "accuracy": _in_batch_accuracy(q_emb.data, d_emb.data, np.arange(n)),
        })
    return StageResult(bundle, rows)


def in_batch_retrieval_accuracy(bundle: ModelBundle, pairs: list[TrainingExample],
                                batch_size: int = 8, max_query_len: int = 512,
                                max_doc_len: int = 1024) -> float:
    """Eval-mode fraction of queries whose own positive tops the batch."""
    tokenizer = bundle.tokenizer
    cap = bundle.encoder.config.max_seq_len
    q_budget, d_budget = min(max_query_len, cap), min(max_doc_len, cap)
    correct, total = 0, 0
    for start in range(0, len(pairs) - batch_size + 1, batch_size):
        group = pairs[start : start + batch_size]
        seqs = [_cls_and_truncate(tokenizer.encode(p.query), q_budget) for p in group]
        seqs += [_cls_and_truncate(tokenizer.encode(p.positive), d_budget) for p in group]
        cls, _ = _encode_cls(bundle, seqs, train=False, rng=None)
        emb = cls.data / np.linalg.norm(cls.data, axis=1, keepdims=True)
        n = len(group)
        scores = emb[:n] @ emb[n:].T
        correct += int((scores.argmax(axis=1) == np.arange(n)).sum())
        total += n
    return correct / max(total, 1)


# ---------------------------------------------------------------------------
# Stage 4: matryoshka + sparse fine-tune with dynamic batching
# ---------------------------------------------------------------------------


def train_trm(cfg: RunConfig, pairs: list[TrainingExample],
              init_from: ModelBundle) -> StageResult:
    rng = np.random.default_rng(cfg.seed)
    bundle = _prepare_bundle(cfg, [], init_from)
    tokenizer = bundle.tokenizer
    for ex in pairs:
        check_finetune_shape(ex, cfg.n_hard_negatives)
    schedule = cfg.effective_schedule()
    w_sparse = Tensor(bundle.w_sparse, requires_grad=True)
    params = dict(bundle.encoder.params)
    params[HEAD_SPARSE] = w_sparse
    opt = _optimizer(cfg, params)
    q_budget = min(cfg.max_query_len, bundle.encoder.config.max_seq_len)
    d_budget = min(cfg.max_doc_len, bundle.encoder.config.max_seq_len)
    per_query = 1 + cfg.n_hard_negatives
    rows = []
    step = 0
    while step < cfg.steps:
        order = rng.permutation(len(pairs))
        for batch_pairs, sub in dynamic_batches([pairs[i] for i in order], schedule):
            if step >= cfg.steps:
                break
            n = len(batch_pairs)
            seqs = [_cls_and_truncate(tokenizer.encode(p.query), q_budget)
                    for p in batch_pairs]
            for p in batch_pairs:
                seqs.append(_cls_and_truncate(tokenizer.encode(p.positive), d_budget))
                for neg in p.negatives[: cfg.n_hard_negatives]:
                    seqs.append(_cls_and_truncate(tokenizer.encode(neg), d_budget))
            opt.zero_grad()
            graph = ComputeGraph()
            with graph:
                cls, per_seq = _encode_cls(bundle, seqs, train=True, rng=rng,
                                           sub_batch=sub)
                q_emb = cls[0:n, :]
                d_emb = cls[n:, :]
                sparse = [
                    sparse_activations(h, toks, w_sparse, tokenizer.special_ids)
                    for h, toks in per_seq
                ]
                loss = trm_loss(q_emb, d_emb, sparse[:n], sparse[n:],
                                np.arange(n) * per_query, cfg.loss)
            forward_backward(graph, loss)
            opt.step(lr=cfg.lr * linear_schedule(step, cfg.steps, cfg.warmup_ratio))
            rows.append({"step": step, "loss": loss.item()})
            step += 1
    bundle.w_sparse = w_sparse.data
    return StageResult(bundle, rows)


# ---------------------------------------------------------------------------
# Stage 5: cross-encoder reranker fine-tune
# ---------------------------------------------------------------------------


def train_rerank(cfg: RunConfig, pairs: list[TrainingExample],
                 init_from: ModelBundle) -> StageResult:
    rng = np.random.default_rng(cfg.seed)
    bundle = _prepare_bundle(cfg, [], init_from)
    tokenizer = bundle.tokenizer
    for ex in pairs:
        check_finetune_shape(ex, cfg.rerank_hard_negatives)
    positives_pool = [p.positive for p in pairs]
    w_rerank = Tensor(bundle.w_rerank, requires_grad=True)
    params = dict(bundle.encoder.params)
    params[HEAD_RERANK] = w_rerank
    opt = _optimizer(cfg, params)
    schedule = cfg.effective_schedule()
    max_len = min(cfg.max_query_len + cfg.max_doc_len, bundle.encoder.config.max_seq_len)
    per_query = 1 + cfg.rerank_hard_negatives + cfg.rerank_random_negatives
    rows = []
    step = 0
    while step < cfg.steps:
        order = rng.permutation(len(pairs))
        for batch_pairs, sub in dynamic_batches([pairs[i] for i in order], schedule):
            if step >= cfg.steps:
                break
            n = len(batch_pairs)
            seqs = []
            for p in batch_pairs:
                q_ids = tokenizer.encode(p.query)
                docs = [p.positive] + list(p.negatives[: cfg.rerank_hard_negatives])
                for _ in range(cfg.rerank_random_negatives):
                    candidate = positives_pool[int(rng.integers(0, len(positives_pool)))]
                    docs.append(candidate)
                seqs.extend(build_pair_ids(q_ids, tokenizer.encode(d), max_len)
                            for d in docs)
            opt.zero_grad()
            graph = ComputeGraph()
            with graph:
                cls, _ = _encode_cls(bundle, seqs, train=True, rng=rng, sub_batch=sub)
                scores = T.matmul(cls, w_rerank)  # (n * per_query, 1)
                total = None
                for i in range(n):
                    lo = i * per_query
                    term = rerank_loss(scores[lo : lo + per_query, 0], cfg.loss.tau_dense)
                    total = term if total is None else total + term
                loss = total * (1.0 / n)
            forward_backward(graph, loss)
            opt.step(lr=cfg.lr * linear_schedule(step, cfg.steps, cfg.warmup_ratio))
            rows.append({"step": step, "loss": loss.item()})
            step += 1
    bundle.w_rerank = w_rerank.data
    return StageResult(bundle, rows)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def run_stage(cfg: RunConfig, corpus: list[Document] | None = None,
              pairs: list[TrainingExample] | None = None,
              init_from: ModelBundle | None = None) -> StageResult:
    if cfg.stage in ("mlm-short", "mlm-long"):
        if corpus is None:
            raise ValueError(f"stage {cfg.stage} needs a corpus")
        return train_mlm(cfg, corpus, init_from)
    if pairs is None:
        raise ValueError(f"stage {cfg.stage} needs training pairs")
    if cfg.stage == "contrastive-pretrain":
        return train_contrastive(cfg, pairs, init_from)
    if cfg.stage == "trm-finetune":
        if init_from is None:
            raise ValueError("trm-finetune continues from a checkpoint (--init-from)")
        return train_trm(cfg, pairs, init_from)
    if cfg.stage == "rerank-finetune":
        if init_from is None:
            raise ValueError("rerank-finetune continues from a checkpoint (--init-from)")
        return train_rerank(cfg, pairs, init_from)
    raise ValueError(f"unknown stage {cfg.stage}")
