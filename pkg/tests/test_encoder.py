"""Unpadding geometry, rotary rotation facts, and the padded-forward oracle."""

import numpy as np
import pytest

from lodestone import tensor as T
from lodestone.encoder import (
    ConfigError,
    Encoder,
    EncoderConfig,
    context_scaling,
    rope_apply,
    rope_attention_logits,
)
from lodestone.tensor import ComputeGraph, Tensor, forward_backward
from lodestone.unpad import UnpadError, UnpaddedBatch, batch_from_sequences, repad, unpad


def small_config(**overrides):
    base = dict(
        num_layers=2,
        hidden_size=32,
        num_heads=2,
        ffn_inner=64,
        vocab_size=128,
        rope_base=10000.0,
        max_seq_len=128,
        dropout=0.0,
        precision="float64",
    )
    base.update(overrides)
    return EncoderConfig(**base)


class TestUnpad:
    def test_prefix_sum_construction(self):
        grid = np.array([[5, 6, 0], [7, 8, 9]])
        batch = unpad(grid, [2, 3])
        assert batch.total_tokens == 5
        assert batch.cu_seqlens.tolist() == [0, 2, 5]
        assert batch.tokens.tolist() == [5, 6, 7, 8, 9]
        assert batch.positions.tolist() == [0, 1, 0, 1, 2]

    def test_full_rows_are_row_major_grid(self):
        rng = np.random.default_rng(0)
        grid = rng.integers(0, 50, size=(3, 4))
        batch = unpad(grid, [4, 4, 4])
        assert np.array_equal(batch.tokens, grid.reshape(-1))
        assert batch.cu_seqlens.tolist() == [0, 4, 8, 12]

    def test_single_token_stream(self):
        batch = unpad(np.array([[9]]), [1])
        assert batch.cu_seqlens.tolist() == [0, 1]

    def test_zero_length_rejected(self):
        with pytest.raises(UnpadError):
            unpad(np.zeros((2, 3), dtype=int), [0, 2])

    def test_overlong_rejected(self):
        with pytest.raises(UnpadError):
            unpad(np.zeros((1, 3), dtype=int), [4])

    def test_bad_cu_seqlens_rejected(self):
        with pytest.raises(UnpadError):
            UnpaddedBatch(np.arange(3), [0, 1], np.zeros(3), batch_size=2)


class TestRepad:
    def test_round_trip_recovers_real_slots(self):
        rng = np.random.default_rng(1)
        grid = rng.integers(0, 90, size=(4, 7))
        lengths = [3, 7, 1, 5]
        batch = unpad(grid, lengths)
        values = rng.normal(size=(batch.total_tokens, 6))
        grid_back = repad(batch, values, l_max=7)
        for b, n in enumerate(lengths):
            lo, hi = batch.cu_seqlens[b], batch.cu_seqlens[b + 1]
            assert np.array_equal(grid_back[b, :n], values[lo:hi])
            assert np.all(grid_back[b, n:] == 0.0)

    def test_single_full_sequence_is_identity(self):
        batch = batch_from_sequences([[1, 2, 3]])
        values = np.arange(12.0).reshape(3, 4)
        assert np.array_equal(repad(batch, values)[0], values)

    def test_pad_slot_zeroed(self):
        batch = unpad(np.array([[1, 2, 0], [3, 4, 5]]), [2, 3])
        values = np.ones((5, 2))
        out = repad(batch, values)
        assert out.shape == (2, 3, 2)
        assert np.all(out[0, 2] == 0.0)

    def test_row_count_mismatch_rejected(self):
        batch = batch_from_sequences([[1, 2]])
        with pytest.raises(UnpadError):
            repad(batch, np.ones((3, 4)))


class TestRope:
    def test_position_zero_is_identity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 8))
        out = rope_apply(x, np.zeros(5, dtype=int), base=10000.0)
        assert np.array_equal(out, x)

    def test_unit_pair_rotates_to_cos_sin(self):
        # Pair 0 couples dims (0, head_size/2); at position 1 the angle is 1 rad.
        x = np.zeros((1, 4))
        x[0, 0] = 1.0
        out = rope_apply(x, np.array([1]), base=10000.0)
        assert out[0, 0] == pytest.approx(np.cos(1.0), abs=1e-12)
        assert out[0, 2] == pytest.approx(np.sin(1.0), abs=1e-12)
        assert out[0, 0] == pytest.approx(0.5403, abs=1e-4)
        assert out[0, 2] == pytest.approx(0.8415, abs=1e-4)

    def test_norm_preserved(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(7, 16))
        out = rope_apply(x, np.arange(7) * 13, base=160000.0)
        assert np.allclose(np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1))

    def test_logits_shift_invariant(self):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(6, 8))
        k = rng.normal(size=(6, 8))
        pos = np.array([0, 1, 2, 5, 6, 9])
        for base in (10000.0, 160000.0, 20000.0):
            ref = rope_attention_logits(q, k, pos, base)
            for shift in (1, 17, 1000):
                shifted = rope_attention_logits(q, k, pos + shift, base)
                assert np.max(np.abs(shifted - ref)) <= 1e-6

    def test_stage_bases_accepted(self):
        small_config(rope_base=10000.0)
        small_config(rope_base=160000.0)

    def test_differentiable(self):
        graph = ComputeGraph()
        with graph:
            x = Tensor(np.random.default_rng(5).normal(size=(3, 4)), requires_grad=True)
            loss = rope_apply(x, np.array([0, 1, 2]), 10000.0).sum()
        forward_backward(graph, loss)
        assert x.grad is not None and x.grad.shape == (3, 4)


class TestContextScaling:
    def test_rev_ntk_eighth(self):
        cfg = small_config(rope_base=160000.0)
        assert context_scaling(cfg, 1.0 / 8.0).rope_base == 20000.0

    def test_identity_factor(self):
        cfg = small_config(rope_base=10000.0)
        assert context_scaling(cfg, 1.0) == cfg

    def test_stage_one_to_two(self):
        cfg = small_config(rope_base=10000.0)
        assert context_scaling(cfg, 16.0).rope_base == 160000.0

    def test_non_positive_factor_rejected(self):
        with pytest.raises(ConfigError):
            context_scaling(small_config(), 0.0)


class TestConfig:
    def test_vocab_rounded_up_to_64(self):
        assert small_config(vocab_size=100).vocab_size == 128
        assert small_config(vocab_size=128).vocab_size == 128

    def test_odd_head_size_rejected(self):
        with pytest.raises(ConfigError):
            small_config(hidden_size=30, num_heads=2, ffn_inner=60)

    def test_attention_dropout_pinned_to_zero(self):
        with pytest.raises(ConfigError):
            small_config(attention_dropout=0.1)


class TestEncode:
    def test_single_token_batch(self):
        enc = Encoder(small_config(), seed=0)
        out = enc.encode(batch_from_sequences([[7]]))
        assert out.token_hiddens.shape == (1, 32)
        assert np.array_equal(out.cls_hiddens.data[0], out.token_hiddens.data[0])

    def test_cls_rows_are_sequence_starts(self):
        enc = Encoder(small_config(), seed=0)
        batch = batch_from_sequences([[1, 2, 3], [4, 5], [6]])
        out = enc.encode(batch)
        for b, start in enumerate(batch.cu_seqlens[:-1]):
            assert np.array_equal(out.cls_hiddens.data[b], out.token_hiddens.data[start])

    def test_out_of_vocab_rejected(self):
        enc = Encoder(small_config(vocab_size=64), seed=0)
        with pytest.raises(ValueError, match="vocabulary"):
            enc.encode(batch_from_sequences([[64]]))

    def test_position_beyond_max_rejected(self):
        enc = Encoder(small_config(max_seq_len=4), seed=0)
        with pytest.raises(ValueError, match="max_seq_len"):
            enc.encode(batch_from_sequences([[1, 2, 3, 4, 5]]))

    def test_matches_masked_padded_forward(self):
        rng = np.random.default_rng(6)
        enc = Encoder(small_config(), seed=1)
        lengths = [5, 2, 7]
        l_max = max(lengths)
        grid = rng.integers(0, 128, size=(3, l_max))
        batch = unpad(grid, lengths)
        flat = enc.encode(batch).token_hiddens.data
        padded = enc.encode_padded(grid, lengths)
        for b, n in enumerate(lengths):
            lo, hi = batch.cu_seqlens[b], batch.cu_seqlens[b + 1]
            ref = padded[b].data[:n]
            rel = np.abs(flat[lo:hi] - ref) / (np.abs(ref) + 1e-12)
            assert rel.max() <= 1e-5

    def test_cross_sequence_isolation(self):
        rng = np.random.default_rng(7)
        enc = Encoder(small_config(), seed=2)
        seqs = [list(rng.integers(0, 128, size=n)) for n in (4, 6, 3)]
        base_out = enc.encode(batch_from_sequences(seqs)).token_hiddens.data
        mutated = [list(s) for s in seqs]
        mutated[1] = list(rng.integers(0, 128, size=6))
        new_out = enc.encode(batch_from_sequences(mutated)).token_hiddens.data
        batch = batch_from_sequences(seqs)
        for b in (0, 2):
            lo, hi = batch.cu_seqlens[b], batch.cu_seqlens[b + 1]
            assert np.max(np.abs(new_out[lo:hi] - base_out[lo:hi])) <= 1e-12

    def test_uniform_position_shift_leaves_outputs_unchanged(self):
        enc = Encoder(small_config(max_seq_len=4096), seed=3)
        tokens = np.array([3, 1, 4, 1, 5])
        base = UnpaddedBatch(tokens, [0, 5], np.arange(5), 1)
        shifted = UnpaddedBatch(tokens, [0, 5], np.arange(5) + 100, 1)
        a = enc.encode(base).token_hiddens.data
        b = enc.encode(shifted).token_hiddens.data
        assert np.max(np.abs(a - b)) <= 1e-6

    def test_dropout_requires_rng_and_changes_output(self):
        enc = Encoder(small_config(dropout=0.5), seed=4)
        batch = batch_from_sequences([[1, 2, 3]])
        with pytest.raises(ValueError, match="rng"):
            enc.encode(batch, train=True)
        out_train = enc.encode(batch, train=True, rng=np.random.default_rng(0))
        out_eval = enc.encode(batch)
        assert not np.allclose(out_train.token_hiddens.data, out_eval.token_hiddens.data)


class TestMlmLogits:
    def _numpy_full_projection(self, enc, hiddens):
        # Independent full-projection oracle in plain numpy.
        from scipy.special import erf

        w = enc.state_arrays()
        t = hiddens @ w["mlm.transform.weight"] + w["mlm.transform.bias"]
        t = t * 0.5 * (1.0 + erf(t / np.sqrt(2.0)))
        mu = t.mean(axis=-1, keepdims=True)
        var = ((t - mu) ** 2).mean(axis=-1, keepdims=True)
        t = (t - mu) / np.sqrt(var + 1e-12)
        t = t * w["mlm.norm.scale"] + w["mlm.norm.bias"]
        return t @ w["mlm.decoder.weight"] + w["mlm.decoder.bias"]

    def test_empty_mask_list(self):
        enc = Encoder(small_config(), seed=5)
        out = enc.encode(batch_from_sequences([[1, 2]]))
        logits = enc.mlm_logits(out, [])
        assert logits.shape == (0, enc.config.vocab_size)

    def test_mask_everything(self):
        enc = Encoder(small_config(), seed=5)
        out = enc.encode(batch_from_sequences([[1, 2, 3], [4, 5]]))
        logits = enc.mlm_logits(out, np.arange(5))
        assert logits.shape == (5, enc.config.vocab_size)

    def test_matches_full_projection_oracle(self):
        enc = Encoder(small_config(), seed=6)
        out = enc.encode(batch_from_sequences([[1, 2, 3, 4], [5, 6]]))
        idx = [1, 4, 2]
        logits = enc.mlm_logits(out, idx).data
        oracle = self._numpy_full_projection(enc, out.token_hiddens.data)[idx]
        assert np.max(np.abs(logits - oracle)) <= 1e-6

    def test_out_of_range_index_rejected(self):
        enc = Encoder(small_config(), seed=5)
        out = enc.encode(batch_from_sequences([[1, 2]]))
        with pytest.raises(ValueError):
            enc.mlm_logits(out, [5])


class TestGradientEquivalence:
    def test_padded_and_unpadded_weight_grads_agree(self):
        rng = np.random.default_rng(8)
        cfg = small_config(num_layers=2, hidden_size=16, num_heads=2, ffn_inner=32,
                           vocab_size=64)
        lengths = [3, 5, 2]
        grid = rng.integers(0, 64, size=(len(lengths), max(lengths)))
        probe = rng.normal(size=(cfg.hidden_size,))

        def loss_unpadded(enc):
            batch = unpad(grid, lengths)
            out = enc.encode(batch)
            return T.gelu(T.matmul(out.token_hiddens, Tensor(probe[:, None]))).mean()

        def loss_padded(enc):
            outs = enc.encode_padded(grid, lengths)
            rows = [o[:n] for o, n in zip(outs, lengths)]
            stacked = T.concat(rows, axis=0)
            return T.gelu(T.matmul(stacked, Tensor(probe[:, None]))).mean()

        enc = Encoder(cfg, seed=9)
        grads = {}
        for tag, fn in (("unpadded", loss_unpadded), ("padded", loss_padded)):
            enc.zero_grad()
            graph = ComputeGraph()
            with graph:
                loss = fn(enc)
            forward_backward(graph, loss)
            grads[tag] = {k: p.grad.copy() for k, p in enc.params.items()
                          if p.grad is not None}
        # The MLM head is not part of an encode-only loss; everything else is.
        assert set(grads["unpadded"]) == set(grads["padded"])
        assert all(not k.startswith("mlm.") for k in grads["unpadded"])
        for name in grads["unpadded"]:
            a, b = grads["unpadded"][name], grads["padded"][name]
            scale = max(np.max(np.abs(b)), 1e-12)
            assert np.max(np.abs(a - b)) / scale <= 1e-5, name
