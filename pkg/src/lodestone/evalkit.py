"""IR metrics (nDCG@k, recall@k) and TREC qrels/run file handling.

Gains are raw graded relevance (trec_eval's default nDCG); queries with no
relevant documents are excluded from metric means, while judged queries
missing from a run score 0 rather than being skipped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class EvalError(ValueError):
    """Malformed qrels/run file or empty evaluation."""


@dataclass
class Qrels:
    """(query_id, doc_id) -> graded relevance, duplicates rejected."""

    judgments: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, query_id: str, doc_id: str, relevance: int) -> None:
        by_doc = self.judgments.setdefault(query_id, {})
        if doc_id in by_doc:
            raise EvalError(f"duplicate judgment for ({query_id}, {doc_id})")
        by_doc[doc_id] = int(relevance)

    def relevant(self, query_id: str) -> dict[str, int]:
        return {d: r for d, r in self.judgments.get(query_id, {}).items() if r > 0}

    def query_ids(self) -> list[str]:
        return list(self.judgments.keys())


@dataclass
class RunFile:
    """Per query: (doc_id, score) in rank order, contiguous from 1."""

    rankings: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def query_ids(self) -> list[str]:
        return list(self.rankings.keys())

    def top(self, query_id: str, k: int) -> list[str]:
        return [doc for doc, _ in self.rankings.get(query_id, [])[:k]]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def load_qrels(path: str | Path) -> Qrels:
    """TREC qrels lines: 'qid 0 docid rel'."""
    qrels = Qrels()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise EvalError(f"{path}:{lineno}: expected 'qid 0 docid rel'")
            qid, _, doc_id, rel = parts
            try:
                rel_value = int(rel)
            except ValueError:
                raise EvalError(f"{path}:{lineno}: non-integer relevance {rel!r}") from None
            if rel_value < 0:
                raise EvalError(f"{path}:{lineno}: negative relevance")
            try:
                qrels.add(qid, doc_id, rel_value)
            except EvalError as exc:
                raise EvalError(f"{path}:{lineno}: {exc}") from None
    return qrels


def load_run(path: str | Path) -> RunFile:
    """TREC run lines: 'qid Q0 docid rank score tag'."""
    run = RunFile()
    last_rank: dict[str, int] = {}
    last_score: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise EvalError(f"{path}:{lineno}: expected 'qid Q0 docid rank score tag'")
            qid, _, doc_id, rank, score, _tag = parts
            try:
                rank_value = int(rank)
                score_value = float(score)
            except ValueError:
                raise EvalError(f"{path}:{lineno}: bad rank/score field") from None
            expected = last_rank.get(qid, 0) + 1
            if rank_value != expected:
                raise EvalError(
                    f"{path}:{lineno}: rank {rank_value} for query {qid}, expected {expected}"
                )
            if qid in last_score and score_value > last_score[qid] + 1e-12:
                raise EvalError(f"{path}:{lineno}: scores increase within query {qid}")
            if any(doc_id == d for d, _ in run.rankings.get(qid, [])):
                raise EvalError(f"{path}:{lineno}: duplicate doc {doc_id} in query {qid}")
            run.rankings.setdefault(qid, []).append((doc_id, score_value))
            last_rank[qid] = rank_value
            last_score[qid] = score_value
    return run


def write_qrels(path: str | Path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, by_doc in qrels.judgments.items():
            for doc_id, rel in by_doc.items():
                fh.write(f"{qid} 0 {doc_id} {rel}\n")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _dcg(gains: Iterable[float]) -> float:
    return float(sum(g / np.log2(i + 2) for i, g in enumerate(gains)))


def _query_ndcg(run: RunFile, qrels: Qrels, qid: str, k: int) -> float:
    relevant = qrels.relevant(qid)
    gains = [relevant.get(doc, 0) for doc in run.top(qid, k)]
    ideal = sorted(relevant.values(), reverse=True)[:k]
    idcg = _dcg(ideal)
    return _dcg(gains) / idcg if idcg > 0 else 0.0


def _query_recall(run: RunFile, qrels: Qrels, qid: str, k: int) -> float:
    relevant = qrels.relevant(qid)
    hit = sum(1 for doc in run.top(qid, k) if doc in relevant)
    return hit / len(relevant)


def _evaluated_queries(qrels: Qrels) -> list[str]:
    queries = [qid for qid in qrels.query_ids() if qrels.relevant(qid)]
    if not queries:
        raise EvalError("qrels contain no query with a relevant document")
    return queries


def ndcg_at_k(run: RunFile, qrels: Qrels, k: int) -> float:
    """Mean nDCG@k over queries that have at least one relevant document."""
    if k < 1:
        raise EvalError("k must be at least 1")
    queries = _evaluated_queries(qrels)
    return float(np.mean([_query_ndcg(run, qrels, qid, k) for qid in queries]))


def recall_at_k(run: RunFile, qrels: Qrels, k: int) -> float:
    """Mean fraction of each query's relevant documents found in the top k."""
    if k < 1:
        raise EvalError("k must be at least 1")
    queries = _evaluated_queries(qrels)
    return float(np.mean([_query_recall(run, qrels, qid, k) for qid in queries]))


def metric_rows(run: RunFile, qrels: Qrels, ndcg_k: int = 10, recall_k: int = 20,
                ) -> list[tuple[str, str, float]]:
    """(metric, query_id, value) rows per query plus an ALL aggregate row."""
    rows: list[tuple[str, str, float]] = []
    queries = _evaluated_queries(qrels)
    for metric, fn, k in ((f"ndcg@{ndcg_k}", _query_ndcg, ndcg_k),
                          (f"recall@{recall_k}", _query_recall, recall_k)):
        values = []
        for qid in queries:
            value = fn(run, qrels, qid, k)
            rows.append((metric, qid, value))
            values.append(value)
        rows.append((metric, "ALL", float(np.mean(values))))
    return rows


def write_metrics_csv(path: str | Path, rows: list[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "query_id", "value"])
        for metric, qid, value in rows:
            writer.writerow([metric, qid, f"{value:.6f}"])
