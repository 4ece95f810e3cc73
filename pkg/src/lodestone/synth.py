"""Synthetic topic-structured retrieval corpus for toy runs and benchmarks.

Documents belong to one of ``n_topics`` topics. Each topic owns a private
word pool and shares a bridge word with its successor topic, so sibling-topic
documents are lexically confusable: they make real hard negatives. Queries
are short samples of a topic's pool; a document is relevant to a query
exactly when they share a topic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evalkit import Qrels
from .pipeline import Document, TrainingExample

LANGS = ("en", "zz", "qq")  # fake tags; they exercise source-balanced sampling

TOPIC_WORDS = 10
FILLER_WORDS = 30


def _topic_word(topic: int, j: int) -> str:
    return f"t{topic:02d}w{j}"


def _bridge_word(topic: int) -> str:
    return f"b{topic:02d}"


def _filler_word(j: int) -> str:
    return f"f{j:02d}"


@dataclass
class SynthWorld:
    n_topics: int
    documents: list[Document]
    doc_topics: dict[str, int]
    train_queries: list[tuple[str, str, int]] = field(default_factory=list)  # (qid, text, topic)
    test_queries: list[tuple[str, str, int]] = field(default_factory=list)

    def docs_of_topic(self, topic: int) -> list[Document]:
        return [d for d in self.documents if self.doc_topics[d.doc_id] == topic]


def _topic_pool(topic: int, n_topics: int) -> list[str]:
    words = [_topic_word(topic, j) for j in range(TOPIC_WORDS)]
    words.append(_bridge_word(topic))
    words.append(_bridge_word((topic - 1) % n_topics))
    return words


def _doc_text(rng, topic: int, n_topics: int, length: int) -> str:
    pool = _topic_pool(topic, n_topics)
    words = []
    for _ in range(length):
        r = rng.random()
        if r < 0.70:
            words.append(pool[int(rng.integers(0, TOPIC_WORDS))])
        elif r < 0.80:
            words.append(pool[TOPIC_WORDS + int(rng.integers(0, 2))])
        else:
            words.append(_filler_word(int(rng.integers(0, FILLER_WORDS))))
    return " ".join(words)


def _query_text(rng, topic: int, n_topics: int) -> str:
    pool = _topic_pool(topic, n_topics)
    n_words = int(rng.integers(3, 6))
    picks = [pool[int(rng.integers(0, TOPIC_WORDS))] for _ in range(n_words)]
    if rng.random() < 0.5:
        picks.append(pool[TOPIC_WORDS + int(rng.integers(0, 2))])
    return " ".join(picks)


def make_world(n_topics: int = 50, docs_per_topic: int = 20,
               train_queries_per_topic: int = 4, test_queries_per_topic: int = 1,
               doc_len: tuple[int, int] = (18, 30), seed: int = 0) -> SynthWorld:
    rng = np.random.default_rng(seed)
    documents = []
    doc_topics = {}
    for topic in range(n_topics):
        for j in range(docs_per_topic):
            doc_id = f"doc{topic:02d}_{j:03d}"
            length = int(rng.integers(doc_len[0], doc_len[1] + 1))
            documents.append(Document(doc_id, _doc_text(rng, topic, n_topics, length),
                                      LANGS[topic % len(LANGS)]))
            doc_topics[doc_id] = topic
    world = SynthWorld(n_topics, documents, doc_topics)
    for topic in range(n_topics):
        for j in range(train_queries_per_topic):
            world.train_queries.append(
                (f"train{topic:02d}_{j}", _query_text(rng, topic, n_topics), topic)
            )
        for j in range(test_queries_per_topic):
            world.test_queries.append(
                (f"test{topic:02d}_{j}", _query_text(rng, topic, n_topics), topic)
            )
    return world


def make_mlm_corpus(n_topics: int = 10, docs_per_topic: int = 20,
                    doc_len: tuple[int, int] = (18, 30), seed: int = 0) -> list[Document]:
    """Low-entropy MLM corpus: each document cycles its topic's word list
    from a random offset, so masked tokens are predictable from context."""
    rng = np.random.default_rng(seed)
    docs = []
    for topic in range(n_topics):
        pool = [_topic_word(topic, j) for j in range(TOPIC_WORDS)] + [_bridge_word(topic)]
        for j in range(docs_per_topic):
            start = int(rng.integers(0, len(pool)))
            length = int(rng.integers(doc_len[0], doc_len[1] + 1))
            words = [pool[(start + i) % len(pool)] for i in range(length)]
            docs.append(Document(f"doc{topic:02d}_{j:03d}", " ".join(words),
                                 LANGS[topic % len(LANGS)]))
    return docs


def make_qrels(world: SynthWorld, queries: list[tuple[str, str, int]]) -> Qrels:
    """Every same-topic document is relevant (grade 1)."""
    qrels = Qrels()
    for qid, _, topic in queries:
        for doc in world.docs_of_topic(topic):
            qrels.add(qid, doc.doc_id, 1)
    return qrels


def make_pretrain_pairs(world: SynthWorld, n_pairs: int, seed: int = 0,
                        ) -> list[TrainingExample]:
    """Weakly supervised pairs: a pseudo-query sampled from a document's own
    words against that document (no negatives; in-batch only)."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        doc = world.documents[int(rng.integers(0, len(world.documents)))]
        words = doc.text.split()
        n_pick = min(len(words), int(rng.integers(3, 7)))
        picks = [words[int(rng.integers(0, len(words)))] for _ in range(n_pick)]
        pairs.append(TrainingExample(
            query=" ".join(picks), positive=doc.text, negatives=[],
            lang=doc.lang, source=f"src_{doc.lang}",
        ))
    return pairs


def make_finetune_pairs(world: SynthWorld, n_hard_negatives: int = 8, seed: int = 0,
                        ) -> list[TrainingExample]:
    """Train queries with a same-topic positive and sibling-topic hard
    negatives (the sibling shares a bridge word with the query's topic)."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _, text, topic in world.train_queries:
        positives = world.docs_of_topic(topic)
        positive = positives[int(rng.integers(0, len(positives)))]
        siblings = world.docs_of_topic((topic + 1) % world.n_topics) \
            + world.docs_of_topic((topic - 1) % world.n_topics)
        picks = rng.choice(len(siblings), size=n_hard_negatives, replace=False)
        negatives = [siblings[int(i)].text for i in picks]
        lang = LANGS[topic % len(LANGS)]
        pairs.append(TrainingExample(
            query=text, positive=positive.text, negatives=negatives,
            lang=lang, source=f"src_{lang}",
        ))
    return pairs


# ---------------------------------------------------------------------------
# File emission
# ---------------------------------------------------------------------------


def write_corpus(path: str | Path, documents: list[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in documents:
            fh.write(json.dumps({"id": doc.doc_id, "text": doc.text, "lang": doc.lang}) + "\n")


def write_queries(path: str | Path, queries: list[tuple[str, str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, text, topic in queries:
            fh.write(json.dumps({"id": qid, "text": text, "lang": LANGS[topic % len(LANGS)]}) + "\n")


def write_pairs(path: str | Path, pairs: list[TrainingExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in pairs:
            fh.write(json.dumps({
                "query": ex.query, "positive": ex.positive,
                "negatives": ex.negatives, "lang": ex.lang, "source": ex.source,
            }) + "\n")


def emit_world(directory: str | Path, world: SynthWorld, n_pretrain_pairs: int = 2000,
               n_hard_negatives: int = 8, seed: int = 0) -> dict[str, Path]:
    """Write the full file set a training/eval cycle needs; returns paths."""
    from .evalkit import write_qrels

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": directory / "corpus.jsonl",
        "train_queries": directory / "train_queries.jsonl",
        "test_queries": directory / "test_queries.jsonl",
        "qrels": directory / "qrels.txt",
        "pretrain_pairs": directory / "pretrain_pairs.jsonl",
        "finetune_pairs": directory / "finetune_pairs.jsonl",
    }
    write_corpus(paths["corpus"], world.documents)
    write_queries(paths["train_queries"], world.train_queries)
    write_queries(paths["test_queries"], world.test_queries)
    write_qrels(paths["qrels"], make_qrels(world, world.test_queries))
    write_pairs(paths["pretrain_pairs"], make_pretrain_pairs(world, n_pretrain_pairs, seed))
    write_pairs(paths["finetune_pairs"], make_finetune_pairs(world, n_hard_negatives, seed))
    return paths
