"""Sampling distribution, masking statistics, chunking, and batching buckets."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lodestone.pipeline import (
    EMBED_SCHEDULE,
    BatchSchedule,
    CorpusSource,
    PipelineError,
    TrainingExample,
    check_finetune_shape,
    chunk,
    downsample_short,
    dynamic_batches,
    group_documents,
    language_sampling_probs,
    load_corpus,
    load_pairs,
    mlm_mask,
    sample_batch,
)
from lodestone.pipeline import Document
from lodestone.tokenizer import MASK_ID, N_SPECIAL, SPECIAL_IDS, WordTokenizer


class TestLanguageSampling:
    def test_counts_one_four_alpha_half(self):
        q = language_sampling_probs([1, 4], alpha=0.5)
        assert abs(q[0] - 1.0 / 3.0) <= 1e-12
        assert abs(q[1] - 2.0 / 3.0) <= 1e-12

    def test_alpha_one_is_proportional(self):
        counts = [3, 9, 12]
        q = language_sampling_probs(counts, alpha=1.0)
        assert np.allclose(q, np.asarray(counts) / 24.0, atol=1e-12)

    def test_single_source(self):
        assert language_sampling_probs([17], alpha=0.5).tolist() == [1.0]

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            counts = rng.integers(1, 10_000, size=rng.integers(1, 12))
            q = language_sampling_probs(counts, alpha=rng.uniform(0, 2))
            assert abs(q.sum() - 1.0) <= 1e-12

    def test_scale_invariance(self):
        counts = np.array([2, 5, 11], dtype=float)
        a = language_sampling_probs(counts, 0.5)
        b = language_sampling_probs(counts * 1371.0, 0.5)
        assert np.max(np.abs(a - b)) <= 1e-12

    def test_small_alpha_boosts_smallest_source(self):
        counts = [1, 100]
        boosted = language_sampling_probs(counts, 0.5)[0]
        proportional = language_sampling_probs(counts, 1.0)[0]
        assert boosted > proportional

    def test_errors(self):
        with pytest.raises(PipelineError):
            language_sampling_probs([], 0.5)
        with pytest.raises(PipelineError):
            language_sampling_probs([3, 0], 0.5)


def _sources(counts):
    return [
        CorpusSource(f"s{i}", f"l{i}", [f"s{i}_item{j}" for j in range(c)])
        for i, c in enumerate(counts)
    ]


class TestSampleBatch:
    def test_empirical_frequencies_within_three_sigma(self):
        sources = _sources([1, 4])
        probs = language_sampling_probs([1, 4], 0.5)
        rng = np.random.default_rng(0)
        draws = 10_000
        hits = np.zeros(2)
        for _ in range(draws):
            idx, _ = sample_batch(sources, probs, batch_size=4, rng=rng)
            hits[idx] += 1
        for i, p in enumerate(probs):
            sigma = np.sqrt(draws * p * (1 - p))
            assert abs(hits[i] - draws * p) <= 3 * sigma

    def test_single_source_always_chosen(self):
        sources = _sources([3])
        rng = np.random.default_rng(1)
        for _ in range(20):
            idx, batch = sample_batch(sources, np.array([1.0]), 2, rng)
            assert idx == 0
            assert all(item.startswith("s0") for item in batch)

    def test_batch_comes_from_one_source(self):
        sources = _sources([5, 7, 9])
        probs = language_sampling_probs([5, 7, 9], 0.5)
        rng = np.random.default_rng(2)
        for _ in range(30):
            idx, batch = sample_batch(sources, probs, 4, rng)
            assert {item.split("_")[0] for item in batch} == {f"s{idx}"}

    def test_without_replacement_when_source_big_enough(self):
        sources = _sources([10])
        rng = np.random.default_rng(3)
        _, batch = sample_batch(sources, np.array([1.0]), 10, rng)
        assert len(set(batch)) == 10

    def test_deterministic_under_seed(self):
        sources = _sources([4, 9])
        probs = language_sampling_probs([4, 9], 0.5)
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(123)
            runs.append([sample_batch(sources, probs, 3, rng) for _ in range(10)])
        assert runs[0] == runs[1]

    def test_all_empty_rejected(self):
        with pytest.raises(PipelineError):
            sample_batch([CorpusSource("s", "l", [])], np.array([1.0]), 2,
                         np.random.default_rng(0))


class TestMlmMask:
    def test_zero_probability_selects_nothing(self):
        rng = np.random.default_rng(0)
        ids = np.arange(N_SPECIAL, N_SPECIAL + 50)
        corrupted, labels, idx = mlm_mask(ids, 0.0, rng, vocab_size=512)
        assert len(idx) == 0 and len(labels) == 0
        assert np.array_equal(corrupted, ids)

    def test_selection_rate_at_thirty_percent(self):
        rng = np.random.default_rng(1)
        ids = np.full(100_000, N_SPECIAL + 7)
        _, _, idx = mlm_mask(ids, 0.3, rng, vocab_size=512)
        assert abs(len(idx) / len(ids) - 0.30) <= 0.01

    def test_full_probability_and_corruption_split(self):
        rng = np.random.default_rng(2)
        n = 30_000
        ids = np.full(n, N_SPECIAL + 9)
        corrupted, labels, idx = mlm_mask(ids, 1.0, rng, vocab_size=512)
        assert len(idx) == n
        assert np.array_equal(labels, ids)
        n_masked = int((corrupted == MASK_ID).sum())
        n_kept = int((corrupted == ids).sum())
        n_random = n - n_masked - n_kept
        for observed, p in ((n_masked, 0.8), (n_kept, 0.1)):
            sigma = np.sqrt(n * p * (1 - p))
            # random replacement can collide with the original id, so "kept"
            # absorbs ~1/vocab of the random bucket; 3 sigma plus that slack
            assert abs(observed - n * p) <= 3 * sigma + n / 512
        assert n_random > 0

    def test_special_positions_never_selected(self):
        rng = np.random.default_rng(3)
        ids = np.array([0, N_SPECIAL + 1, 1, N_SPECIAL + 2, 3])
        _, _, idx = mlm_mask(ids, 1.0, rng, vocab_size=512)
        assert set(idx.tolist()) == {1, 3}

    def test_labels_are_original_ids(self):
        rng = np.random.default_rng(4)
        ids = np.arange(N_SPECIAL, N_SPECIAL + 64)
        _, labels, idx = mlm_mask(ids, 0.5, rng, vocab_size=512)
        assert np.array_equal(labels, ids[idx])


class TestChunk:
    def test_long_text_split(self):
        chunks = chunk(list(range(5000)), 2048)
        assert [len(c) for c in chunks] == [2048, 2048, 904]

    def test_short_text_unchanged(self):
        ids = list(range(100))
        assert chunk(ids, 2048) == [ids]

    def test_exact_boundary_single_chunk(self):
        ids = list(range(2048))
        assert chunk(ids, 2048) == [ids]

    @given(st.lists(st.integers(0, 1000), max_size=300), st.integers(2, 64))
    @settings(max_examples=60, deadline=None)
    def test_concatenation_round_trip(self, ids, max_len):
        chunks = chunk(ids, max_len)
        assert [t for c in chunks for t in c] == ids
        assert all(len(c) <= max_len for c in chunks)


class TestDynamicBatches:
    def _example(self, n_words):
        return TrainingExample(query="q", positive=" ".join(["w"] * n_words))

    def test_table_bucket_sizes(self):
        batches = list(dynamic_batches([self._example(600)], EMBED_SCHEDULE))
        assert len(batches) == 1
        # a length-600 example lands in the 384-batch bucket
        ex_batch, sub = batches[0]
        bound, batch_size, sub_size = EMBED_SCHEDULE.bucket_for(600)
        assert (bound, batch_size, sub_size) == (1000, 384, 128)
        assert sub == 128
        assert EMBED_SCHEDULE.bucket_for(100) == (500, 768, 256)

    def test_empty_stream(self):
        assert list(dynamic_batches([], EMBED_SCHEDULE)) == []

    def test_partitions_input(self):
        schedule = BatchSchedule(((10, 3, 3), (100, 2, 2)))
        rng = np.random.default_rng(5)
        examples = [self._example(int(n)) for n in rng.integers(1, 99, size=23)]
        batches = list(dynamic_batches(examples, schedule))
        flat = [ex for batch, _ in batches for ex in batch]
        assert sorted(id(e) for e in flat) == sorted(id(e) for e in examples)
        for batch, _ in batches:
            lengths = [len(e.positive.split()) for e in batch]
            assert all(n < 10 for n in lengths) or all(10 <= n < 100 for n in lengths)

    def test_overlong_example_names_offender(self):
        schedule = BatchSchedule(((10, 2, 2),))
        with pytest.raises(PipelineError, match="#1"):
            list(dynamic_batches([self._example(3), self._example(50)], schedule))

    def test_sub_batch_capped_at_batch(self):
        schedule = BatchSchedule(((10, 2, 8),))
        assert schedule.buckets[0][2] == 2

    def test_schedule_file_round_trip(self, tmp_path):
        path = tmp_path / "schedule.cfg"
        EMBED_SCHEDULE.to_file(path)
        assert BatchSchedule.from_file(path) == EMBED_SCHEDULE

    def test_schedule_file_errors_carry_line_numbers(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("500 768 256\n1000 384\n")
        with pytest.raises(PipelineError, match=":2"):
            BatchSchedule.from_file(path)

    def test_finetune_shape_check(self):
        good = TrainingExample(query="q", positive="p", negatives=["n"] * 8)
        check_finetune_shape(good)
        with pytest.raises(PipelineError, match="8 hard negatives"):
            check_finetune_shape(TrainingExample(query="q", positive="p",
                                                 negatives=["n"] * 3))


class TestCorpusIO:
    def test_corpus_and_pairs_round_trip(self, tmp_path):
        corpus = tmp_path / "corpus.jsonl"
        corpus.write_text(
            '{"id": "d1", "text": "alpha beta", "lang": "en"}\n'
            '{"id": "d2", "text": "gamma", "lang": "xx"}\n'
        )
        docs = load_corpus(corpus)
        assert [d.doc_id for d in docs] == ["d1", "d2"]
        sources = group_documents(docs)
        assert [(s.source_id, s.n_docs, s.n_tokens) for s in sources] == [
            ("en", 1, 2),
            ("xx", 1, 1),
        ]

        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text(
            '{"query": "q", "positive": "p", "negatives": ["n1"], '
            '"lang": "en", "source": "s1"}\n'
        )
        examples = load_pairs(pairs)
        assert examples[0].negatives == ["n1"]

    def test_malformed_line_reports_number(self, tmp_path):
        corpus = tmp_path / "corpus.jsonl"
        corpus.write_text('{"id": "d1", "text": "x"}\nnot json\n')
        with pytest.raises(PipelineError, match=":2"):
            load_corpus(corpus)

    def test_missing_field_reports_number(self, tmp_path):
        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text('{"query": "q"}\n')
        with pytest.raises(PipelineError, match=":1.*positive"):
            load_pairs(pairs)


class TestDownsampleShort:
    def test_long_docs_always_kept(self):
        rng = np.random.default_rng(0)
        docs = [Document(f"d{i}", " ".join(["w"] * 50), "en") for i in range(20)]
        kept = downsample_short(docs, 10, 0.0, rng, lambda d: len(d.text.split()))
        assert len(kept) == 20

    def test_short_docs_kept_at_rate(self):
        rng = np.random.default_rng(1)
        docs = [Document(f"d{i}", "w", "en") for i in range(4000)]
        kept = downsample_short(docs, 10, 0.25, rng, lambda d: len(d.text.split()))
        sigma = np.sqrt(4000 * 0.25 * 0.75)
        assert abs(len(kept) - 1000) <= 3 * sigma


class TestTokenizer:
    def test_deterministic_and_vocab_multiple_of_64(self):
        texts = ["red fox", "red dog", "fox fox"]
        tok_a = WordTokenizer.train(texts)
        tok_b = WordTokenizer.train(list(reversed(texts)))
        assert tok_a.words == tok_b.words  # frequency then spelling, order-free
        assert tok_a.vocab_size % 64 == 0
        assert tok_a.encode("red fox") == tok_b.encode("red fox")

    def test_byte_fallback_for_unknown_words(self):
        tok = WordTokenizer.train(["known words only"])
        ids = tok.encode("zzz")
        assert len(ids) == 3
        assert all(i not in SPECIAL_IDS for i in ids)
        assert all(i < tok.vocab_size for i in ids)

    def test_save_load_round_trip(self, tmp_path):
        tok = WordTokenizer.train(["alpha beta gamma alpha"])
        tok.save(tmp_path / "tok.json")
        loaded = WordTokenizer.load(tmp_path / "tok.json")
        assert loaded.words == tok.words
        assert loaded.encode("alpha zq") == tok.encode("alpha zq")
