"""Deterministic word-level tokenizer with byte fallback.

Any object exposing ``encode(text) -> list[int]``, ``vocab_size`` and
``special_ids`` can stand in; this default implementation needs no external
vocabulary. Layout: five special ids, 256 byte-fallback ids, then corpus
words by descending frequency, with the total padded up to a multiple of 64.
"""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path
from typing import Iterable

from .encoder import round_up_multiple

CLS_ID = 0  # prepended by the pipeline, never produced by encode()
PAD_ID = 1
SEP_ID = 2
MASK_ID = 3
UNK_ID = 4
N_SPECIAL = 5
BYTE_OFFSET = N_SPECIAL  # ids 5..260 are raw bytes
WORD_OFFSET = BYTE_OFFSET + 256

SPECIAL_IDS = frozenset({CLS_ID, PAD_ID, SEP_ID, MASK_ID, UNK_ID})


class WordTokenizer:
    """Whitespace words to ids; out-of-vocabulary words fall back to bytes."""

    def __init__(self, words: list[str]):
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        self.words = list(words)
        self._word_to_id = {w: WORD_OFFSET + i for i, w in enumerate(self.words)}
        self.vocab_size = round_up_multiple(WORD_OFFSET + len(self.words), 64)
        self.special_ids = SPECIAL_IDS

    @classmethod
    def train(cls, texts: Iterable[str], max_words: int = 8000) -> "WordTokenizer":
        """Vocabulary = the max_words most frequent words, ties by spelling."""
        counts = Counter()
        for text in texts:
            counts.update(text.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ranked[:max_words]])

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in text.split():
            wid = self._word_to_id.get(word)
            if wid is not None:
                ids.append(wid)
            else:
                ids.extend(BYTE_OFFSET + b for b in word.encode("utf-8"))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Lossy inverse for inspection (bytes render individually)."""
        names = {CLS_ID: "[CLS]", PAD_ID: "[PAD]", SEP_ID: "[SEP]",
                 MASK_ID: "[MASK]", UNK_ID: "[UNK]"}
        parts = []
        for i in ids:
            if i in names:
                parts.append(names[i])
            elif BYTE_OFFSET <= i < WORD_OFFSET:
                parts.append(f"<0x{i - BYTE_OFFSET:02x}>")
            elif WORD_OFFSET <= i < WORD_OFFSET + len(self.words):
                parts.append(self.words[i - WORD_OFFSET])
            else:
                parts.append("[UNK]")
        return " ".join(parts)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"words": self.words}), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "WordTokenizer":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["words"])
