"""Retrieval exactness against exhaustive-scoring oracles, fusion arithmetic,
rerank permutation behavior, and index persistence."""

import numpy as np
import pytest

from lodestone.index import (
    DenseIndex,
    IndexError_,
    InvertedIndex,
    SearchHit,
    SearchResult,
    build,
    dense_search,
    hybrid_search,
    load_index,
    rerank,
    save_index,
    sparse_search,
    write_run,
)
from lodestone.representation import DenseEmbedding, HybridRecord, SparseVector


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _random_records(rng, n_docs, dim=32, vocab=40):
    records = []
    for i in range(n_docs):
        dense = DenseEmbedding(_unit(rng.normal(size=dim)), normalized=True)
        n_terms = int(rng.integers(0, 6))
        tokens = rng.choice(vocab, size=n_terms, replace=False)
        sparse = SparseVector({int(t): float(rng.uniform(0.05, 2.0)) for t in tokens})
        records.append(HybridRecord(f"d{i:04d}", dense, sparse, token_count=8))
    return records


def _random_query(rng, dim=32, vocab=40):
    dense = DenseEmbedding(_unit(rng.normal(size=dim)), normalized=True)
    tokens = rng.choice(vocab, size=int(rng.integers(1, 5)), replace=False)
    sparse = SparseVector({int(t): float(rng.uniform(0.05, 2.0)) for t in tokens})
    return dense, sparse


def _oracle_rank(scored: dict[str, float], k: int) -> list[tuple[str, float]]:
    order = sorted(scored.items(), key=lambda kv: (-kv[1], kv[0]))
    return order[:k]


class TestBuild:
    def test_empty_records(self):
        dense, inverted = build([], d_search=32)
        assert len(dense) == 0 and len(inverted) == 0

    def test_posting_lists_by_construction(self):
        rng = np.random.default_rng(0)
        records = [
            HybridRecord("a", DenseEmbedding(_unit(rng.normal(size=32)), True),
                         SparseVector({7: 1.0, 9: 0.5})),
            HybridRecord("b", DenseEmbedding(_unit(rng.normal(size=32)), True),
                         SparseVector({7: 2.0})),
            HybridRecord("c", DenseEmbedding(_unit(rng.normal(size=32)), True),
                         SparseVector({9: 0.25})),
        ]
        _, inverted = build(records, d_search=32)
        assert len(inverted.postings[7]) == 2
        assert len(inverted.postings[9]) == 2
        assert [inverted.doc_ids[o] for o, _ in inverted.postings[7]] == ["a", "b"]

    def test_full_width_rows_equal_stored_embeddings(self):
        rng = np.random.default_rng(1)
        records = _random_records(rng, 5)
        dense, _ = build(records, d_search=32)
        for row, rec in zip(dense.matrix, records):
            assert np.allclose(row, rec.dense.values, atol=1e-12)

    def test_slices_to_search_width(self):
        rng = np.random.default_rng(2)
        records = _random_records(rng, 4, dim=64)
        dense, _ = build(records, d_search=32)
        assert dense.matrix.shape == (4, 32)
        assert np.allclose(np.linalg.norm(dense.matrix, axis=1), 1.0)

    def test_duplicate_id_rejected(self):
        rng = np.random.default_rng(3)
        rec = _random_records(rng, 1)[0]
        with pytest.raises(IndexError_, match="duplicate"):
            build([rec, rec], d_search=32)


class TestDenseSearch:
    def test_self_match_scores_one(self):
        rng = np.random.default_rng(4)
        records = _random_records(rng, 20)
        dense, _ = build(records, d_search=32)
        hits = dense_search(dense, records[7].dense, k=3)
        assert hits[0][0] == "d0007"
        assert hits[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_k_larger_than_corpus_clamps(self):
        rng = np.random.default_rng(5)
        dense, _ = build(_random_records(rng, 6), d_search=32)
        q, _ = _random_query(rng)
        assert len(dense_search(dense, q, k=50)) == 6

    def test_matches_exhaustive_sort_oracle(self):
        rng = np.random.default_rng(6)
        records = _random_records(rng, 100)
        dense, _ = build(records, d_search=32)
        q, _ = _random_query(rng)
        got = dense_search(dense, q, k=10)
        oracle = _oracle_rank(
            {r.doc_id: float(r.dense.values @ q.values) for r in records}, 10
        )
        assert [d for d, _ in got] == [d for d, _ in oracle]
        assert np.allclose([s for _, s in got], [s for _, s in oracle], atol=1e-12)

    def test_bad_k_rejected(self):
        rng = np.random.default_rng(7)
        dense, _ = build(_random_records(rng, 3), d_search=32)
        q, _ = _random_query(rng)
        with pytest.raises(IndexError_):
            dense_search(dense, q, k=0)


class TestSparseSearch:
    def test_unindexed_query_tokens_give_empty_result(self):
        rng = np.random.default_rng(8)
        _, inverted = build(_random_records(rng, 10, vocab=20), d_search=32)
        assert sparse_search(inverted, SparseVector({999: 1.0}), k=5) == []

    def test_single_token_query_follows_posting_list(self):
        records = [
            HybridRecord(f"d{i}", DenseEmbedding(_unit(np.ones(32)), True),
                         SparseVector({5: w}))
            for i, w in enumerate([0.3, 1.2, 0.7])
        ]
        _, inverted = build(records, d_search=32)
        hits = sparse_search(inverted, SparseVector({5: 2.0}), k=3)
        assert [d for d, _ in hits] == ["d1", "d2", "d0"]
        assert [s for _, s in hits] == pytest.approx([2.4, 1.4, 0.6])

    def test_matches_exhaustive_oracle(self):
        from lodestone.representation import sparse_score

        rng = np.random.default_rng(9)
        records = _random_records(rng, 120)
        _, inverted = build(records, d_search=32)
        _, q = _random_query(rng)
        got = sparse_search(inverted, q, k=15)
        exhaustive = {
            r.doc_id: sparse_score(q, r.sparse)
            for r in records
            if sparse_score(q, r.sparse) > 0
        }
        oracle = _oracle_rank(exhaustive, 15)
        assert [d for d, _ in got] == [d for d, _ in oracle]
        assert np.allclose([s for _, s in got], [s for _, s in oracle], atol=1e-12)


class TestHybridSearch:
    def test_fusion_arithmetic(self):
        # dense 0.8 + 0.01 * sparse 10.0 = 0.9
        dense = DenseIndex(["a", "b"], np.eye(2))
        inverted = InvertedIndex(["a", "b"], {3: [(0, 10.0)]})
        q_dense = DenseEmbedding(_unit(np.array([0.8, 0.6])), normalized=True)
        q_sparse = SparseVector({3: 1.0})
        result = hybrid_search(dense, inverted, q_dense, q_sparse, k=2,
                               lambda_sparse=0.01, query_id="q1")
        by_id = {h.doc_id: h for h in result.hits}
        assert by_id["a"].dense_score == pytest.approx(0.8)
        assert by_id["a"].sparse_score == pytest.approx(10.0)
        assert by_id["a"].score == pytest.approx(0.9)
        # doc b was found only by the dense side: sparse contributes exactly 0
        assert by_id["b"].sparse_score == 0.0
        assert by_id["b"].score == pytest.approx(by_id["b"].dense_score)

    def test_lambda_zero_equals_dense_ranking(self):
        rng = np.random.default_rng(10)
        records = _random_records(rng, 60)
        dense, inverted = build(records, d_search=32)
        q_dense, q_sparse = _random_query(rng)
        fused = hybrid_search(dense, inverted, q_dense, q_sparse, k=20, lambda_sparse=0.0)
        plain = dense_search(dense, q_dense, k=20)
        assert fused.doc_ids() == [d for d, _ in plain]
        assert [h.score for h in fused.hits] == pytest.approx([s for _, s in plain])

    def test_matches_exhaustive_fusion_oracle(self):
        from lodestone.representation import sparse_score

        rng = np.random.default_rng(11)
        records = _random_records(rng, 150)
        dense, inverted = build(records, d_search=32)
        q_dense, q_sparse = _random_query(rng)
        lam = 0.004
        got = hybrid_search(dense, inverted, q_dense, q_sparse, k=25, lambda_sparse=lam)
        oracle = _oracle_rank(
            {
                r.doc_id: float(r.dense.values @ q_dense.values)
                + lam * sparse_score(q_sparse, r.sparse)
                for r in records
            },
            25,
        )
        assert got.doc_ids() == [d for d, _ in oracle]

    def test_returned_scores_dominate_unreturned(self):
        from lodestone.representation import sparse_score

        rng = np.random.default_rng(12)
        records = _random_records(rng, 80)
        dense, inverted = build(records, d_search=32)
        q_dense, q_sparse = _random_query(rng)
        result = hybrid_search(dense, inverted, q_dense, q_sparse, k=10, lambda_sparse=0.005)
        returned = set(result.doc_ids())
        floor = min(h.score for h in result.hits)
        for r in records:
            if r.doc_id not in returned:
                fused = float(r.dense.values @ q_dense.values) \
                    + 0.005 * sparse_score(q_sparse, r.sparse)
                assert fused <= floor + 1e-12


class TestRerank:
    def _result(self, n=6):
        hits = [SearchHit(f"d{i}", float(n - i), 0.0, 0.0) for i in range(n)]
        return SearchResult("q1", hits)

    def test_zero_scorer_keeps_order(self):
        result = self._result()
        out = rerank(result, lambda doc_id: 0.0, top_n=6)
        assert out.doc_ids() == result.doc_ids()

    def test_inverting_scorer_reverses_head(self):
        result = self._result(6)
        out = rerank(result, lambda doc_id: float(doc_id[1:]), top_n=4)
        assert out.doc_ids() == ["d3", "d2", "d1", "d0", "d4", "d5"]

    def test_permutation_no_adds_no_drops(self):
        rng = np.random.default_rng(13)
        result = self._result(9)
        out = rerank(result, lambda _d: float(rng.normal()), top_n=5)
        assert sorted(out.doc_ids()) == sorted(result.doc_ids())

    def test_default_depth_is_100(self):
        from lodestone.index import DEFAULT_RERANK_DEPTH

        assert DEFAULT_RERANK_DEPTH == 100

    def test_empty_candidates(self):
        out = rerank(SearchResult("q", []), lambda _d: 1.0)
        assert out.hits == []

    def test_remainder_scores_stay_monotone(self):
        result = self._result(8)
        out = rerank(result, lambda doc_id: 5.0, top_n=3)
        scores = [h.score for h in out.hits]
        assert all(a >= b for a, b in zip(scores, scores[1:]))


class TestRunOutputAndPersistence:
    def test_run_round_trips_through_load_run(self, tmp_path):
        from lodestone.evalkit import load_run

        results = [
            SearchResult("q1", [SearchHit("a", 0.9, 0.9, 0.0),
                                SearchHit("b", 0.5, 0.4, 10.0)]),
            SearchResult("q2", [SearchHit("c", 1.25, 1.25, 0.0)]),
        ]
        path = tmp_path / "run.trec"
        write_run(path, results, tag="testtag")
        lines = path.read_text().splitlines()
        assert lines[0] == "q1 Q0 a 1 0.900000 testtag"
        run = load_run(path)
        assert run.rankings["q1"] == [("a", 0.9), ("b", 0.5)]
        assert run.rankings["q2"] == [("c", 1.25)]

    def test_index_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        records = _random_records(rng, 30)
        dense, inverted = build(records, d_search=32)
        save_index(tmp_path / "idx", dense, inverted, meta={"note": "t"})
        dense2, inverted2, meta = load_index(tmp_path / "idx")
        assert dense2.doc_ids == dense.doc_ids
        assert np.array_equal(dense2.matrix, dense.matrix)
        assert meta["n_docs"] == 30 and meta["note"] == "t"
        assert set(inverted2.postings) == set(inverted.postings)
        for token, plist in inverted.postings.items():
            assert inverted2.postings[token] == plist
        # search parity after reload
        q_dense, q_sparse = _random_query(rng)
        before = hybrid_search(dense, inverted, q_dense, q_sparse, k=10)
        after = hybrid_search(dense2, inverted2, q_dense, q_sparse, k=10)
        assert before.doc_ids() == after.doc_ids()
