"""Corpus ingestion, source-balanced sampling, MLM masking, chunking, and
length-grouped dynamic batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .tokenizer import MASK_ID, N_SPECIAL, SPECIAL_IDS


class PipelineError(ValueError):
    """Malformed input file or inconsistent batching request."""


# ---------------------------------------------------------------------------
# Records and file formats
# ---------------------------------------------------------------------------


@dataclass
class Document:
    doc_id: str
    text: str
    lang: str


@dataclass
class TrainingExample:
    query: str
    positive: str
    negatives: list[str] = field(default_factory=list)
    lang: str = "und"
    source: str = "default"

    def __post_init__(self):
        if not self.positive:
            raise PipelineError("positive text must be non-empty")


@dataclass
class CorpusSource:
    """One sampling unit (a language or a pair source) with its size counts."""

    source_id: str
    lang: str
    items: list
    n_docs: int = 0
    n_tokens: int = 0

    def __post_init__(self):
        if not self.n_docs:
            self.n_docs = len(self.items)

    def count(self, unit: str = "docs") -> int:
        if unit == "docs":
            return self.n_docs
        if unit == "tokens":
            return self.n_tokens
        raise PipelineError(f"unknown count unit '{unit}'")


def _read_jsonl(path: str | Path, required: tuple[str, ...]) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PipelineError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            missing = [key for key in required if key not in obj]
            if missing:
                raise PipelineError(f"{path}:{lineno}: missing field(s) {missing}")
            yield obj


def load_corpus(path: str | Path) -> list[Document]:
    """JSONL documents: {"id": ..., "text": ..., "lang": ...}."""
    return [
        Document(doc_id=str(o["id"]), text=str(o["text"]), lang=str(o.get("lang", "und")))
        for o in _read_jsonl(path, ("id", "text"))
    ]


def load_pairs(path: str | Path) -> list[TrainingExample]:
    """JSONL pairs: {"query", "positive", "negatives", "lang", "source"}."""
    return [
        TrainingExample(
            query=str(o["query"]),
            positive=str(o["positive"]),
            negatives=[str(n) for n in o.get("negatives", [])],
            lang=str(o.get("lang", "und")),
            source=str(o.get("source", "default")),
        )
        for o in _read_jsonl(path, ("query", "positive"))
    ]


def group_documents(docs: Sequence[Document], token_count: Callable[[str], int] | None = None,
                    ) -> list[CorpusSource]:
    """Group a corpus by language tag, in first-appearance order."""
    token_count = token_count or (lambda text: len(text.split()))
    by_lang: dict[str, CorpusSource] = {}
    for doc in docs:
        src = by_lang.get(doc.lang)
        if src is None:
            src = by_lang[doc.lang] = CorpusSource(doc.lang, doc.lang, [], 0, 0)
        src.items.append(doc)
        src.n_docs += 1
        src.n_tokens += token_count(doc.text)
    return list(by_lang.values())


def group_pairs(pairs: Sequence[TrainingExample]) -> list[CorpusSource]:
    """Group training pairs by their source tag, in first-appearance order."""
    by_source: dict[str, CorpusSource] = {}
    for ex in pairs:
        src = by_source.get(ex.source)
        if src is None:
            src = by_source[ex.source] = CorpusSource(ex.source, ex.lang, [], 0, 0)
        src.items.append(ex)
        src.n_docs += 1
        src.n_tokens += len(ex.query.split()) + len(ex.positive.split())
    return list(by_source.values())


# ---------------------------------------------------------------------------
# Source-balanced sampling
# ---------------------------------------------------------------------------


def language_sampling_probs(counts: Sequence[float], alpha: float) -> np.ndarray:
    """q_i = p_i^alpha / sum_j p_j^alpha over p_i = n_i / sum n_j.

    alpha < 1 boosts small sources; alpha = 1 is proportional sampling.
    """
    if len(counts) == 0:
        raise PipelineError("no sources to sample from")
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise PipelineError("all source counts must be positive")
    if alpha < 0:
        raise PipelineError("alpha must be non-negative")
    p = counts / counts.sum()
    weighted = p**alpha
    return weighted / weighted.sum()


def sample_batch(sources: Sequence[CorpusSource], probs: np.ndarray, batch_size: int,
                 rng: np.random.Generator) -> tuple[int, list]:
    """Draw one batch entirely from a single multinomially-chosen source.

    Items are drawn uniformly without replacement, falling back to
    replacement when the source is smaller than the batch.
    """
    if len(sources) != len(probs):
        raise PipelineError("probs must align with sources")
    if not any(src.items for src in sources):
        raise PipelineError("all sources are empty")
    source_idx = int(rng.choice(len(sources), p=probs))
    items = sources[source_idx].items
    if not items:
        # Zero-count sources never get here via language_sampling_probs,
        # but guard against a hand-built probability vector.
        raise PipelineError(f"source '{sources[source_idx].source_id}' is empty")
    replace = len(items) < batch_size
    picks = rng.choice(len(items), size=batch_size, replace=replace)
    return source_idx, [items[int(i)] for i in picks]


# ---------------------------------------------------------------------------
# MLM masking
# ---------------------------------------------------------------------------


def mlm_mask(token_ids: Sequence[int], mask_prob: float, rng: np.random.Generator,
             vocab_size: int, special_ids: frozenset[int] = SPECIAL_IDS,
             mask_id: int = MASK_ID) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BERT-style corruption: select eligible positions with ``mask_prob``;
    of the selected, 80% become the mask token, 10% a random id, 10% stay.

    Returns (corrupted ids, labels at masked positions, masked index list).
    """
    if not 0.0 <= mask_prob <= 1.0:
        raise PipelineError("mask_prob must lie in [0, 1]")
    ids = np.asarray(token_ids, dtype=np.int64)
    corrupted = ids.copy()
    eligible = np.array([i not in special_ids for i in ids], dtype=bool)
    selected = eligible & (rng.random(len(ids)) < mask_prob)
    indices = np.flatnonzero(selected)
    labels = ids[indices]
    action = rng.random(len(indices))
    for j, pos in enumerate(indices):
        if action[j] < 0.8:
            corrupted[pos] = mask_id
        elif action[j] < 0.9:
            corrupted[pos] = rng.integers(N_SPECIAL, vocab_size)
    return corrupted, labels, indices


# ---------------------------------------------------------------------------
# Chunking and down-sampling
# ---------------------------------------------------------------------------


def chunk(token_ids: Sequence[int], max_len: int) -> list[list[int]]:
    """Consecutive non-overlapping chunks of at most ``max_len`` tokens;
    shorter inputs come back as a single unchanged chunk."""
    if max_len < 2:
        raise PipelineError("max_len must be at least 2 (room for [CLS])")
    ids = list(token_ids)
    if not ids:
        return []
    return [ids[i : i + max_len] for i in range(0, len(ids), max_len)]


def downsample_short(items: Sequence, floor_len: int, keep_prob: float,
                     rng: np.random.Generator,
                     length_fn: Callable[[object], int]) -> list:
    """Keep long items always; keep below-floor items with ``keep_prob``."""
    kept = []
    for item in items:
        if length_fn(item) >= floor_len or rng.random() < keep_prob:
            kept.append(item)
    return kept


# ---------------------------------------------------------------------------
# Length-grouped dynamic batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchSchedule:
    """Ordered (length bound, batch size, sub-batch size) buckets."""

    buckets: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        bounds = [b for b, _, _ in self.buckets]
        if not self.buckets:
            raise PipelineError("schedule needs at least one bucket")
        if any(b <= 0 for b in bounds) or bounds != sorted(set(bounds)):
            raise PipelineError("bucket bounds must be positive and strictly increasing")
        normalized = []
        for bound, batch, sub in self.buckets:
            if batch <= 0 or sub <= 0:
                raise PipelineError("batch and sub-batch sizes must be positive")
            normalized.append((bound, batch, min(sub, batch)))
        object.__setattr__(self, "buckets", tuple(normalized))

    @property
    def max_bound(self) -> int:
        return self.buckets[-1][0]

    def bucket_for(self, length: int) -> tuple[int, int, int]:
        """First bucket whose bound exceeds the length."""
        for bucket in self.buckets:
            if length < bucket[0]:
                return bucket
        raise PipelineError(
            f"length {length} is not below the largest bound {self.max_bound}"
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "BatchSchedule":
        """Parse 'bound batch_size sub_batch_size' lines ('#' comments ok)."""
        buckets = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise PipelineError(
                        f"{path}:{lineno}: expected 'bound batch sub_batch', got {line!r}"
                    )
                try:
                    buckets.append(tuple(int(p) for p in parts))
                except ValueError:
                    raise PipelineError(f"{path}:{lineno}: non-integer field") from None
        return cls(tuple(buckets))

    def to_file(self, path: str | Path) -> None:
        lines = ["# bound batch_size sub_batch_size"]
        lines += [f"{b} {bs} {sb}" for b, bs, sb in self.buckets]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# Default bounds/sizes for fine-tuning at full scale; toy runs swap these out.
EMBED_SCHEDULE = BatchSchedule(((500, 768, 256), (1000, 384, 128), (2000, 256, 64),
                                (3000, 160, 48), (8000, 80, 16)))
RERANK_SCHEDULE = BatchSchedule(((500, 512, 256), (1000, 384, 128), (2000, 256, 64),
                                 (3000, 160, 48), (8000, 80, 16)))


def example_length(ex: TrainingExample) -> int:
    """Default bucketing length: the longest text the example will encode."""
    texts = [ex.query, ex.positive, *ex.negatives]
    return max(len(t.split()) for t in texts)


def dynamic_batches(examples: Sequence[TrainingExample], schedule: BatchSchedule,
                    length_fn: Callable = example_length,
                    ) -> Iterator[tuple[list, int]]:
    """Group examples into per-bucket homogeneous batches.

    Each example goes to the first bucket whose bound exceeds its length;
    full batches stream out in arrival order and partial buffers flush at the
    end, so the emitted batches partition the input exactly. Yields
    (batch, sub_batch_size) with the sub-batch size used for chunked
    sub-encoding.
    """
    buffers: dict[int, list] = {bound: [] for bound, _, _ in schedule.buckets}
    for position, ex in enumerate(examples):
        length = length_fn(ex)
        try:
            bound, batch_size, sub = schedule.bucket_for(length)
        except PipelineError:
            raise PipelineError(
                f"example #{position} (query {ex.query[:40]!r}) has length "
                f"{length}, beyond the largest bound {schedule.max_bound}"
            ) from None
        buffers[bound].append(ex)
        if len(buffers[bound]) == batch_size:
            yield buffers[bound], sub
            buffers[bound] = []
    for bound, batch_size, sub in schedule.buckets:
        if buffers[bound]:
            yield buffers[bound], sub


def check_finetune_shape(ex: TrainingExample, n_negatives: int = 8) -> None:
    """Embedding fine-tuning expects one positive plus n hard negatives."""
    if len(ex.negatives) < n_negatives:
        raise PipelineError(
            f"fine-tuning example needs {n_negatives} hard negatives, "
            f"got {len(ex.negatives)} (query {ex.query[:40]!r})"
        )
