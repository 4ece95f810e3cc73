"""Figure rendering for the delimited artifacts: every CSV a command emits
gets a PNG next to it (loss curves, per-query metric bars, bench comparison)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SAVE_KW = {"dpi": 120, "bbox_inches": "tight", "metadata": {"Software": None}}


def _read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def render_loss_figure(csv_path: str | Path, out_png: str | Path) -> Path:
    """Loss (and accuracy, when logged) against the training step."""
    rows = _read_csv(csv_path)
    steps = [int(r["step"]) for r in rows]
    losses = [float(r["loss"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=1.2, color="tab:blue", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    if rows and "accuracy" in rows[0]:
        twin = ax.twinx()
        twin.plot(steps, [float(r["accuracy"]) for r in rows], lw=1.0,
                  color="tab:orange", label="in-batch accuracy")
        twin.set_ylabel("in-batch accuracy")
        twin.set_ylim(0.0, 1.05)
    ax.set_title(Path(csv_path).stem)
    fig.savefig(out_png, **_SAVE_KW)
    plt.close(fig)
    return Path(out_png)


def render_metrics_figure(csv_path: str | Path, out_png: str | Path) -> Path:
    """Per-query bars for each metric with the ALL aggregate drawn as a line."""
    rows = _read_csv(csv_path)
    metrics = sorted({r["metric"] for r in rows})
    fig, axes = plt.subplots(len(metrics), 1, figsize=(8, 3 * len(metrics)),
                             squeeze=False)
    for ax, metric in zip(axes[:, 0], metrics):
        per_query = [(r["query_id"], float(r["value"])) for r in rows
                     if r["metric"] == metric and r["query_id"] != "ALL"]
        aggregate = [float(r["value"]) for r in rows
                     if r["metric"] == metric and r["query_id"] == "ALL"]
        ax.bar(range(len(per_query)), [v for _, v in per_query], color="tab:blue")
        if aggregate:
            ax.axhline(aggregate[0], color="tab:red", lw=1.2,
                       label=f"mean {aggregate[0]:.3f}")
            ax.legend(loc="upper right")
        ax.set_ylabel(metric)
        ax.set_ylim(0.0, 1.05)
        ax.set_xticks([])
    axes[-1, 0].set_xlabel(f"{len(per_query)} queries")
    fig.savefig(out_png, **_SAVE_KW)
    plt.close(fig)
    return Path(out_png)


def render_bench_figure(csv_path: str | Path, out_png: str | Path) -> Path:
    """Wall time and exact multiply counts, padded vs unpadded."""
    rows = _read_csv(csv_path)
    paths = [r["path"] for r in rows]
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 4))
    left.bar(paths, [float(r["wall_time_s"]) for r in rows],
             color=["tab:green", "tab:gray"])
    left.set_ylabel("wall time (s)")
    left.set_title("encode wall time")
    right.bar(paths, [int(r["total_multiplies"]) for r in rows],
              color=["tab:green", "tab:gray"])
    right.set_ylabel("matmul multiplies")
    right.set_yscale("log")
    right.set_title("exact multiply count")
    fig.savefig(out_png, **_SAVE_KW)
    plt.close(fig)
    return Path(out_png)
