"""Training objectives: contrastive InfoNCE with in-batch negatives, the
multi-dimension matryoshka sum, the sparse term-weight loss, their combined
fine-tuning objective, masked-LM cross-entropy, and the reranker loss.

Everything here composes recorded primitives, so any loss is differentiable
end to end whenever a ComputeGraph is active. Softmax normalizations use
detached max-subtraction for stability.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class LossError(ValueError):
    """Inconsistent loss inputs or configuration."""


def default_mrl_dims(hidden_size: int) -> list[int]:
    """All positive multiples of 32 up to the embedding width."""
    if hidden_size < 32:
        raise LossError(f"hidden size {hidden_size} too small for 32-wide slices")
    return [32 * k for k in range(1, hidden_size // 32 + 1)]


@dataclass(frozen=True)
class LossConfig:
    tau_dense: float = 0.01
    tau_mrl: float = 0.05
    tau_sparse: float = 0.01
    lambda_sparse: float = 1.0
    mrl_dims: tuple[int, ...] | None = None
    mrl_weights: tuple[float, ...] | None = None
    use_in_batch_negatives: bool = True

    def __post_init__(self):
        for name in ("tau_dense", "tau_mrl", "tau_sparse"):
            if getattr(self, name) <= 0:
                raise LossError(f"{name} must be positive")
        if self.lambda_sparse < 0:
            raise LossError("lambda_sparse must be non-negative")
        if self.mrl_dims is not None:
            dims = tuple(int(d) for d in self.mrl_dims)
            if not dims:
                raise LossError("mrl_dims must be non-empty when given")
            if any(d <= 0 or d % 32 != 0 for d in dims):
                raise LossError("every mrl dimension must be a positive multiple of 32")
            object.__setattr__(self, "mrl_dims", dims)
        if self.mrl_weights is not None:
            weights = tuple(float(w) for w in self.mrl_weights)
            if any(w <= 0 for w in weights):
                raise LossError("mrl weights must be positive")
            if self.mrl_dims is not None and len(weights) != len(self.mrl_dims):
                raise LossError("mrl_weights must align with mrl_dims")
            object.__setattr__(self, "mrl_weights", weights)

    def dims_for(self, hidden_size: int) -> list[int]:
        dims = list(self.mrl_dims) if self.mrl_dims else default_mrl_dims(hidden_size)
        if any(d > hidden_size for d in dims):
            raise LossError(f"mrl dimension beyond embedding width {hidden_size}: {dims}")
        return dims

    def weights_for(self, dims: list[int]) -> list[float]:
        if self.mrl_weights:
            if len(self.mrl_weights) != len(dims):
                raise LossError("mrl_weights must align with the dimension set")
            return list(self.mrl_weights)
        return [1.0] * len(dims)

    def to_dict(self) -> dict:
        return {
            "tau_dense": self.tau_dense,
            "tau_mrl": self.tau_mrl,
            "tau_sparse": self.tau_sparse,
            "lambda_sparse": self.lambda_sparse,
            "mrl_dims": list(self.mrl_dims) if self.mrl_dims else None,
            "mrl_weights": list(self.mrl_weights) if self.mrl_weights else None,
            "use_in_batch_negatives": self.use_in_batch_negatives,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if d.get("mrl_dims"):
            d["mrl_dims"] = tuple(d["mrl_dims"])
        if d.get("mrl_weights"):
            d["mrl_weights"] = tuple(d["mrl_weights"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def l2_normalize(t: Tensor, axis: int = -1) -> Tensor:
    """Rows scaled to unit norm (differentiable); zero rows fail fast."""
    sq = (t * t).sum(axis=axis, keepdims=True)
    return t * T.power(sq, -0.5)


def _as_score_vector(scores) -> Tensor:
    if isinstance(scores, Tensor):
        if scores.ndim == 2 and scores.shape[1] == 1:
            return scores[:, 0]
        if scores.ndim == 1:
            return scores
        raise LossError(f"scores must be a vector, got shape {scores.shape}")
    if isinstance(scores, (list, tuple)):
        if scores and isinstance(scores[0], Tensor):
            return T.concat([s if s.ndim == 1 else s[0] for s in scores], axis=0)
        return Tensor(np.asarray(scores, dtype=np.float64))
    raise LossError("scores must be a Tensor or a sequence")


def _as_scalar(value) -> Tensor:
    if isinstance(value, Tensor):
        if value.size != 1:
            raise LossError("positive score must be a scalar")
        return value.sum()
    return Tensor(float(value))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def info_nce(pos_score, all_scores, tau: float) -> Tensor:
    """-log( exp(pos/tau) / sum_i exp(s_i/tau) ), max-subtracted."""
    if tau <= 0:
        raise LossError("tau must be positive")
    scores = _as_score_vector(all_scores)
    if scores.size == 0:
        raise LossError("empty candidate score list")
    pos = _as_scalar(pos_score)
    shift = float(scores.data.max())  # detached; gradients are shift-invariant
    z = T.exp((scores - shift) * (1.0 / tau))
    lse = T.log(z.sum())
    return lse - (pos - shift) * (1.0 / tau)


def _info_nce_rows(score_matrix: Tensor, positives_index, tau: float) -> Tensor:
    """Mean row-wise InfoNCE of a (queries x candidates) score matrix."""
    n_q, n_d = score_matrix.shape
    idx = np.asarray(positives_index, dtype=np.int64)
    if idx.shape != (n_q,):
        raise LossError(f"positives_index must have one entry per query, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_d):
        raise LossError(f"positives_index out of bounds for {n_d} candidates")
    onehot = np.zeros((n_q, n_d), dtype=score_matrix.dtype)
    onehot[np.arange(n_q), idx] = 1.0
    shift = score_matrix.data.max(axis=1, keepdims=True)  # detached
    z = T.exp((score_matrix - shift) * (1.0 / tau))
    lse = T.log(z.sum(axis=1))
    pos = (score_matrix * onehot).sum(axis=1)
    return (lse - (pos - shift[:, 0]) * (1.0 / tau)).mean()


def batch_dense_loss(query_embs: Tensor, doc_embs: Tensor, positives_index,
                     config: LossConfig, tau: float | None = None) -> Tensor:
    """InfoNCE where every document in the batch is a candidate for every
    query: other queries' positives and declared hard negatives alike.

    Inputs must be length-normalized; scores are then cosine similarities.
    """
    tau = config.tau_dense if tau is None else tau
    scores = T.matmul(query_embs, T.transpose(doc_embs))
    return _info_nce_rows(scores, positives_index, tau)


def mrl_loss(query_embs: Tensor, doc_embs: Tensor, positives_index,
             config: LossConfig) -> Tensor:
    """Weighted sum of dense losses over renormalized prefix slices."""
    hidden = query_embs.shape[1]
    dims = config.dims_for(hidden)
    weights = config.weights_for(dims)
    total = None
    for d, w in zip(dims, weights):
        q = l2_normalize(query_embs[:, :d])
        docs = l2_normalize(doc_embs[:, :d])
        term = batch_dense_loss(q, docs, positives_index, config, tau=config.tau_mrl) * w
        total = term if total is None else total + term
    return total


def sparse_activations(token_hiddens: Tensor, tokens: np.ndarray, w_sparse: Tensor,
                       special_ids: frozenset[int]) -> dict[int, Tensor]:
    """Differentiable per-token term weights for one sequence.

    weight(token) = max over its occurrences of relu(h_t . W), with special
    tokens excluded. The max is folded as a + relu(b - a), keeping the whole
    thing on the tape.
    """
    raw = T.relu(T.matmul(token_hiddens, w_sparse))  # (L, 1)
    by_token: dict[int, list[int]] = {}
    for position, token in enumerate(np.asarray(tokens).tolist()):
        if token in special_ids:
            continue
        by_token.setdefault(int(token), []).append(position)
    out: dict[int, Tensor] = {}
    for token, positions in by_token.items():
        acc = raw[positions[0] : positions[0] + 1, :]
        for p in positions[1:]:
            nxt = raw[p : p + 1, :]
            acc = acc + T.relu(nxt - acc)
        out[token] = acc
    return out


def sparse_pair_score(q_weights: dict[int, Tensor], d_weights: dict[int, Tensor]) -> Tensor:
    """Sum of weight products over co-occurring tokens; (1, 1) tensor."""
    shared = sorted(set(q_weights) & set(d_weights))
    if not shared:
        return Tensor(np.zeros((1, 1)))
    total = None
    for token in shared:
        term = q_weights[token] * d_weights[token]
        total = term if total is None else total + term
    return total


def _check_sparse_nonnegative(reps) -> None:
    for rep in reps:
        for token, weight in rep.items():
            value = weight.data if isinstance(weight, Tensor) else weight
            if np.any(np.asarray(value) < 0):
                raise LossError(f"negative sparse weight for token {token}")


def _coerce_sparse(rep) -> dict[int, Tensor]:
    return {
        token: w if isinstance(w, Tensor) else Tensor(np.full((1, 1), float(w)))
        for token, w in rep.items()
    }


def sparse_loss(query_sparse, doc_sparse, positives_index, config: LossConfig) -> Tensor:
    """InfoNCE over sparse co-occurrence scores at the sparse temperature."""
    _check_sparse_nonnegative(query_sparse)
    _check_sparse_nonnegative(doc_sparse)
    queries = [_coerce_sparse(q) for q in query_sparse]
    docs = [_coerce_sparse(d) for d in doc_sparse]
    idx = np.asarray(positives_index, dtype=np.int64)
    if idx.shape != (len(queries),):
        raise LossError("positives_index must have one entry per query")
    if idx.size and (idx.min() < 0 or idx.max() >= len(docs)):
        raise LossError(f"positives_index out of bounds for {len(docs)} candidates")
    total = None
    for i, q in enumerate(queries):
        row = T.concat([sparse_pair_score(q, d) for d in docs], axis=0)  # (N, 1)
        term = info_nce(row[int(idx[i]) : int(idx[i]) + 1, 0], row, config.tau_sparse)
        total = term if total is None else total + term
    return total * (1.0 / len(queries))


def trm_loss(query_embs: Tensor, doc_embs: Tensor, query_sparse, doc_sparse,
             positives_index, config: LossConfig) -> Tensor:
    """lambda * sparse loss + the matryoshka sum (the fine-tuning objective)."""
    dense = mrl_loss(query_embs, doc_embs, positives_index, config)
    if config.lambda_sparse == 0.0:
        return dense
    sparse = sparse_loss(query_sparse, doc_sparse, positives_index, config)
    return dense + sparse * config.lambda_sparse


def mlm_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over masked positions only; empty selection is 0."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] != labels.shape[0]:
        raise LossError(
            f"{logits.shape[0]} logit rows vs {labels.shape[0]} labels"
        )
    if labels.size == 0:
        warnings.warn("mlm_loss over zero masked positions; defined as 0", stacklevel=2)
        return Tensor(0.0)
    n, vocab = logits.shape
    if labels.min() < 0 or labels.max() >= vocab:
        raise LossError("label id outside the vocabulary")
    onehot = np.zeros((n, vocab), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    shift = logits.data.max(axis=1, keepdims=True)  # detached
    z = T.exp(logits - shift)
    lse = T.log(z.sum(axis=1))
    pos = (logits * onehot).sum(axis=1)
    return (lse - (pos - shift[:, 0])).mean()


def rerank_loss(scores, tau: float) -> Tensor:
    """InfoNCE over one positive (first) plus any number of negative scores."""
    vec = _as_score_vector(scores)
    if vec.size == 0:
        raise LossError("rerank_loss needs at least the positive score")
    return info_nce(vec[0:1].sum(), vec, tau)
