"""The unpadding contract: flat token streams with cumulative offsets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class UnpadError(ValueError):
    """Invalid batch geometry (empty sequence, overlong row, bad offsets)."""


@dataclass(frozen=True)
class UnpaddedBatch:
    """Concatenated real tokens of a batch, no pad slots.

    ``tokens[cu_seqlens[b]:cu_seqlens[b+1]]`` are sequence ``b``'s ids and
    ``positions`` restart at 0 for each sequence.
    """

    tokens: np.ndarray
    cu_seqlens: np.ndarray
    positions: np.ndarray
    batch_size: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64))
        object.__setattr__(self, "cu_seqlens", np.asarray(self.cu_seqlens, dtype=np.int64))
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.int64))
        cu = self.cu_seqlens
        if len(cu) != self.batch_size + 1 or cu[0] != 0:
            raise UnpadError("cu_seqlens must have batch_size+1 entries starting at 0")
        if np.any(np.diff(cu) <= 0):
            raise UnpadError("cu_seqlens must be strictly increasing (no empty sequences)")
        if cu[-1] != len(self.tokens):
            raise UnpadError("cu_seqlens[-1] must equal the total token count")
        if len(self.positions) != len(self.tokens):
            raise UnpadError("positions must align one-to-one with tokens")

    @property
    def total_tokens(self) -> int:
        return int(self.cu_seqlens[-1])

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.cu_seqlens)

    def sequence_ids(self) -> np.ndarray:
        """Per-token index of the owning sequence."""
        return np.repeat(np.arange(self.batch_size), self.lengths)


def unpad(padded_ids, lengths) -> UnpaddedBatch:
    """Strip pad slots from a (B, L_max) id grid.

    Tokens are concatenated in batch order; offsets are the prefix sums of
    ``lengths``; positions restart at 0 per sequence.
    """
    grid = np.asarray(padded_ids, dtype=np.int64)
    if grid.ndim != 2:
        raise UnpadError(f"padded_ids must be 2-D, got shape {grid.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    batch, l_max = grid.shape
    if len(lengths) != batch:
        raise UnpadError("one length per grid row required")
    if np.any(lengths <= 0):
        raise UnpadError("zero-length sequences are not allowed")
    if np.any(lengths > l_max):
        raise UnpadError(f"length exceeds grid width {l_max}")
    tokens = np.concatenate([grid[b, : lengths[b]] for b in range(batch)])
    cu_seqlens = np.concatenate([[0], np.cumsum(lengths)])
    positions = np.concatenate([np.arange(n) for n in lengths])
    return UnpaddedBatch(tokens, cu_seqlens, positions, batch)


def batch_from_sequences(sequences: list[list[int]]) -> UnpaddedBatch:
    """Build a batch directly from ragged id lists (no padding detour)."""
    if not sequences:
        raise UnpadError("empty batch")
    lengths = [len(s) for s in sequences]
    if any(n == 0 for n in lengths):
        raise UnpadError("zero-length sequences are not allowed")
    tokens = np.concatenate([np.asarray(s, dtype=np.int64) for s in sequences])
    cu_seqlens = np.concatenate([[0], np.cumsum(lengths)])
    positions = np.concatenate([np.arange(n) for n in lengths])
    return UnpaddedBatch(tokens, cu_seqlens, positions, len(sequences))


def repad(batch: UnpaddedBatch, values, l_max: int | None = None) -> np.ndarray:
    """Scatter per-token rows back onto a (B, L_max, H) grid, zeros at pads."""
    values = np.asarray(values)
    if values.shape[0] != batch.total_tokens:
        raise UnpadError(
            f"values has {values.shape[0]} rows but the batch holds "
            f"{batch.total_tokens} tokens"
        )
    lengths = batch.lengths
    if l_max is None:
        l_max = int(lengths.max())
    elif l_max < lengths.max():
        raise UnpadError("l_max smaller than the longest sequence")
    out = np.zeros((batch.batch_size, l_max) + values.shape[1:], dtype=values.dtype)
    for b in range(batch.batch_size):
        lo, hi = batch.cu_seqlens[b], batch.cu_seqlens[b + 1]
        out[b, : hi - lo] = values[lo:hi]
    return out
