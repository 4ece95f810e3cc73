"""Rotary-attention transformer encoder over unpadded token streams.

Post-norm BERT layout with attention restricted to block-diagonal spans of
the flat stream, a GELU-gated linear unit feed-forward, [CLS] pooling at the
sequence starts, and an MLM head projected only at masked positions.
Attention-score dropout is hard-wired to zero; hidden-state dropout applies
after the attention and feed-forward sublayers in training mode.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .unpad import UnpaddedBatch

MASK_VALUE = -1e9  # additive attention mask; large-negative, not -inf (keeps all ops finite)


class ConfigError(ValueError):
    """Inconsistent encoder configuration."""


def round_up_multiple(n: int, multiple: int) -> int:
    return ((n + multiple - 1) // multiple) * multiple


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    ffn_inner: int
    vocab_size: int  # rounded up to a multiple of 64 on construction
    rope_base: float = 10000.0
    max_seq_len: int = 2048
    dropout: float = 0.1
    attention_dropout: float = 0.0
    precision: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "vocab_size", round_up_multiple(int(self.vocab_size), 64))
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if self.head_size % 2 != 0:
            raise ConfigError(f"head_size {self.head_size} must be even for rotary pairs")
        if self.attention_dropout != 0.0:
            raise ConfigError("attention-score dropout is fixed at 0")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision tag '{self.precision}'")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "num_heads": self.num_heads,
            "ffn_inner": self.ffn_inner,
            "vocab_size": self.vocab_size,
            "rope_base": self.rope_base,
            "max_seq_len": self.max_seq_len,
            "dropout": self.dropout,
            "attention_dropout": self.attention_dropout,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def context_scaling(config: EncoderConfig, factor: float) -> EncoderConfig:
    """Rescale the rotary base (e.g. 160000 * 1/8 = 20000) leaving all else."""
    if factor <= 0:
        raise ConfigError(f"context scaling factor must be positive, got {factor}")
    return replace(config, rope_base=config.rope_base * factor)


# ---------------------------------------------------------------------------
# Rotary position embedding
# ---------------------------------------------------------------------------


def rope_angles(positions, head_size: int, base: float, dtype=np.float64) -> np.ndarray:
    """Rotation angles theta[t, i] = pos_t * base^(-2i / head_size)."""
    positions = np.asarray(positions, dtype=np.float64)
    half = head_size // 2
    inv_freq = base ** (-2.0 * np.arange(half) / head_size)
    return (positions[:, None] * inv_freq[None, :]).astype(dtype)


def rope_apply(states, positions, base: float):
    """Rotate dimension pairs (i, i + head_size/2) by position-scaled angles.

    Pair i of a row at position p maps (x, y) to
    (x cos t - y sin t, x sin t + y cos t) with t = p * base^(-2i/head_size).
    Accepts a Tensor (differentiable) or a plain array; returns the same kind.
    """
    raw = not isinstance(states, Tensor)
    x = T.as_tensor(states)
    if x.ndim != 2:
        raise ConfigError("rope_apply expects (tokens, head_size) activations")
    head_size = x.shape[1]
    if head_size % 2 != 0:
        raise ConfigError("head_size must be even for rotary pairs")
    angles = rope_angles(positions, head_size, base, dtype=x.dtype)
    cos_t, sin_t = np.cos(angles), np.sin(angles)
    half = head_size // 2
    x1, x2 = x[:, :half], x[:, half:]
    out = T.concat([x1 * cos_t - x2 * sin_t, x1 * sin_t + x2 * cos_t], axis=1)
    return out.data if raw else out


def rope_attention_logits(q, k, positions, base: float, scale: float | None = None) -> np.ndarray:
    """Unscaled rotary attention logits for a single head (plain arrays)."""
    q_rot = rope_apply(np.asarray(q), positions, base)
    k_rot = rope_apply(np.asarray(k), positions, base)
    if scale is None:
        scale = 1.0 / np.sqrt(q_rot.shape[1])
    return (q_rot @ k_rot.T) * scale


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

INIT_STD = 0.02


def init_params(config: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh weights: normal(0, 0.02) projections, zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    dt = config.dtype
    h, f, v = config.hidden_size, config.ffn_inner, config.vocab_size

    def proj(*shape):
        return rng.normal(0.0, INIT_STD, size=shape).astype(dt)

    params: dict[str, np.ndarray] = {}
    params["embed.token.weight"] = proj(v, h)
    params["embed.norm.scale"] = np.ones(h, dtype=dt)
    params["embed.norm.bias"] = np.zeros(h, dtype=dt)
    for i in range(config.num_layers):
        p = f"layer.{i}"
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.attention.{name}"] = proj(h, h)
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{p}.attention.{name}"] = np.zeros(h, dtype=dt)
        params[f"{p}.attention.norm.scale"] = np.ones(h, dtype=dt)
        params[f"{p}.attention.norm.bias"] = np.zeros(h, dtype=dt)
        params[f"{p}.ffn.wgate"] = proj(h, f)
        params[f"{p}.ffn.bgate"] = np.zeros(f, dtype=dt)
        params[f"{p}.ffn.wup"] = proj(h, f)
        params[f"{p}.ffn.bup"] = np.zeros(f, dtype=dt)
        params[f"{p}.ffn.wdown"] = proj(f, h)
        params[f"{p}.ffn.bdown"] = np.zeros(h, dtype=dt)
        params[f"{p}.ffn.norm.scale"] = np.ones(h, dtype=dt)
        params[f"{p}.ffn.norm.bias"] = np.zeros(h, dtype=dt)
    params["mlm.transform.weight"] = proj(h, h)
    params["mlm.transform.bias"] = np.zeros(h, dtype=dt)
    params["mlm.norm.scale"] = np.ones(h, dtype=dt)
    params["mlm.norm.bias"] = np.zeros(h, dtype=dt)
    params["mlm.decoder.weight"] = proj(h, v)
    params["mlm.decoder.bias"] = np.zeros(v, dtype=dt)
    return params


@dataclass
class EncoderOutput:
    """Per-token hidden states plus the [CLS] rows at sequence starts."""

    token_hiddens: Tensor
    cls_hiddens: Tensor
    batch: UnpaddedBatch


class Encoder:
    """Weights plus the forward passes (unpadded and padded-reference)."""

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.config = config
        arrays = init_params(config, seed) if params is None else params
        self.params: dict[str, Tensor] = {
            name: Tensor(np.asarray(arr, dtype=config.dtype), requires_grad=True)
            for name, arr in arrays.items()
        }

    # -- persistence --------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- helpers -------------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _dropout(self, x: Tensor, train: bool, rng) -> Tensor:
        p = self.config.dropout
        if not train or p <= 0.0:
            return x
        if rng is None:
            raise ValueError("training-mode encode requires an rng for dropout")
        keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
        return x * keep

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x) * self._p(f"{prefix}.scale") + self._p(f"{prefix}.bias")

    def _attention(self, x: Tensor, positions: np.ndarray, mask: np.ndarray,
                   layer: int) -> Tensor:
        cfg = self.config
        p = f"layer.{layer}.attention"
        q = T.matmul(x, self._p(f"{p}.wq")) + self._p(f"{p}.bq")
        k = T.matmul(x, self._p(f"{p}.wk")) + self._p(f"{p}.bk")
        v = T.matmul(x, self._p(f"{p}.wv")) + self._p(f"{p}.bv")
        scale = 1.0 / np.sqrt(cfg.head_size)
        heads = []
        for h in range(cfg.num_heads):
            lo, hi = h * cfg.head_size, (h + 1) * cfg.head_size
            qh = rope_apply(q[:, lo:hi], positions, cfg.rope_base)
            kh = rope_apply(k[:, lo:hi], positions, cfg.rope_base)
            logits = T.matmul(qh, T.transpose(kh)) * scale + mask
            probs = T.softmax(logits, axis=-1)
            heads.append(T.matmul(probs, v[:, lo:hi]))
        ctx = T.concat(heads, axis=1)
        return T.matmul(ctx, self._p(f"{p}.wo")) + self._p(f"{p}.bo")

    def _stack(self, tokens: np.ndarray, positions: np.ndarray, mask: np.ndarray,
               train: bool, rng) -> Tensor:
        cfg = self.config
        if tokens.size and int(tokens.max()) >= cfg.vocab_size:
            raise ValueError(
                f"token id {int(tokens.max())} out of vocabulary (size {cfg.vocab_size})"
            )
        if positions.size and int(positions.max()) >= cfg.max_seq_len:
            raise ValueError(
                f"position {int(positions.max())} >= max_seq_len {cfg.max_seq_len}"
            )
        x = T.gather_rows(self._p("embed.token.weight"), tokens)
        x = self._norm(x, "embed.norm")
        for layer in range(cfg.num_layers):
            attn = self._attention(x, positions, mask, layer)
            x = self._norm(x + self._dropout(attn, train, rng), f"layer.{layer}.attention.norm")
            gate = T.gelu(T.matmul(x, self._p(f"layer.{layer}.ffn.wgate"))
                          + self._p(f"layer.{layer}.ffn.bgate"))
            up = T.matmul(x, self._p(f"layer.{layer}.ffn.wup")) + self._p(f"layer.{layer}.ffn.bup")
            down = T.matmul(gate * up, self._p(f"layer.{layer}.ffn.wdown")) \
                + self._p(f"layer.{layer}.ffn.bdown")
            x = self._norm(x + self._dropout(down, train, rng), f"layer.{layer}.ffn.norm")
        return x

    # -- forward passes -------------------------------------------------------

    def encode(self, batch: UnpaddedBatch, train: bool = False, rng=None) -> EncoderOutput:
        """Forward over the flat stream; attention never crosses cu_seqlens."""
        seq_ids = batch.sequence_ids()
        allowed = seq_ids[:, None] == seq_ids[None, :]
        mask = np.where(allowed, 0.0, MASK_VALUE).astype(self.config.dtype)
        hiddens = self._stack(batch.tokens, batch.positions, mask, train, rng)
        cls = T.gather_rows(hiddens, batch.cu_seqlens[:-1])
        return EncoderOutput(token_hiddens=hiddens, cls_hiddens=cls, batch=batch)

    def encode_padded(self, padded_ids, lengths, train: bool = False, rng=None) -> list[Tensor]:
        """Reference forward on a padded grid with a key-side padding mask.

        Each row runs the full L_max attention with pad columns masked out,
        the way a masked dense kernel would. Returns one (L_max, H) tensor
        per sequence; rows at and beyond the real length are garbage.
        """
        grid = np.asarray(padded_ids, dtype=np.int64)
        batch, l_max = grid.shape
        positions = np.arange(l_max)
        outs = []
        for b in range(batch):
            pad_cols = np.arange(l_max) >= int(lengths[b])
            mask = np.where(pad_cols[None, :], MASK_VALUE, 0.0).astype(self.config.dtype)
            outs.append(self._stack(grid[b], positions, mask, train, rng))
        return outs

    def mlm_logits(self, output: EncoderOutput, masked_indices) -> Tensor:
        """Vocabulary logits at the masked positions only."""
        idx = np.asarray(masked_indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= output.token_hiddens.shape[0]):
            raise ValueError("masked index out of range of the token stream")
        rows = T.gather_rows(output.token_hiddens, idx)
        t = T.gelu(T.matmul(rows, self._p("mlm.transform.weight")) + self._p("mlm.transform.bias"))
        t = self._norm(t, "mlm.norm")
        return T.matmul(t, self._p("mlm.decoder.weight")) + self._p("mlm.decoder.bias")
