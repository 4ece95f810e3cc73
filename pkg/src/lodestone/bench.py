"""Padded vs unpadded encoding efficiency: exact multiply counts from the
batch geometry, plus wall-clock timing of both forward paths on an identical
batch stream (no length grouping)."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import Encoder, EncoderConfig
from .unpad import unpad


def attention_score_cells(lengths) -> int:
    """Token-level attention cells per head for a variable-length kernel."""
    return int(sum(int(n) ** 2 for n in lengths))


def padded_score_cells(batch_size: int, l_max: int) -> int:
    return int(batch_size) * int(l_max) ** 2


def encoder_multiplies(lengths, config: EncoderConfig, padded: bool,
                       l_max: int | None = None) -> dict[str, int]:
    """Exact matmul multiply counts for one forward pass.

    Counts the projection, attention-score, attention-output, and GLU
    feed-forward matmuls; elementwise work is excluded on both paths alike.
    """
    lengths = [int(n) for n in lengths]
    l_max = l_max or max(lengths)
    if padded:
        tokens = len(lengths) * l_max
        cells = padded_score_cells(len(lengths), l_max)
    else:
        tokens = sum(lengths)
        cells = attention_score_cells(lengths)
    h, f, layers = config.hidden_size, config.ffn_inner, config.num_layers
    attention = layers * 2 * cells * h
    linear = layers * (4 * tokens * h * h + 3 * tokens * h * f)
    return {
        "tokens": tokens,
        "attention_cells": cells,
        "attention_multiplies": attention,
        "linear_multiplies": linear,
        "total_multiplies": attention + linear,
    }


def skew_lengths(num_seqs: int = 32, long_len: int = 2048, short_len: int = 32) -> list[int]:
    """One long sequence among many short ones: the padding-waste workload."""
    return [long_len] + [short_len] * (num_seqs - 1)


@dataclass
class BenchRow:
    path: str
    wall_time_s: float
    tokens: int
    attention_cells: int
    attention_multiplies: int
    linear_multiplies: int
    total_multiplies: int


def run_bench(config: EncoderConfig, lengths: list[int], seed: int = 0,
              repeats: int = 1) -> list[BenchRow]:
    """Time the unpadded flat forward against the padded-masked reference on
    the same batch; returns one row per path (best wall time of repeats)."""
    rng = np.random.default_rng(seed)
    l_max = max(lengths)
    grid = rng.integers(0, config.vocab_size, size=(len(lengths), l_max))
    batch = unpad(grid, lengths)
    encoder = Encoder(config, seed=seed)

    def best_time(fn) -> float:
        times = []
        for _ in range(max(1, repeats)):
            start = time.perf_counter()
            fn()
            times.append(time.perf_counter() - start)
        return min(times)

    rows = []
    for path, fn, padded in (
        ("unpadded", lambda: encoder.encode(batch), False),
        ("padded", lambda: encoder.encode_padded(grid, lengths), True),
    ):
        counts = encoder_multiplies(lengths, config, padded=padded, l_max=l_max)
        rows.append(BenchRow(path=path, wall_time_s=best_time(fn), **counts))
    return rows


def write_bench_csv(path: str | Path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "wall_time_s", "tokens", "attention_cells",
                         "attention_multiplies", "linear_multiplies", "total_multiplies"])
        for row in rows:
            writer.writerow([row.path, f"{row.wall_time_s:.6f}", row.tokens,
                             row.attention_cells, row.attention_multiplies,
                             row.linear_multiplies, row.total_multiplies])
