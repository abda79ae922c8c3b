import json

import numpy as np
import pytest

from giftlab.exceptions import CheckpointError, DomainError, UnsupportedOperationError
from giftlab.gift import gift_loss, GiftConfig, pack_batch
from giftlab.model import (
    MicroTransformer,
    OptimizerState,
    TabularPolicy,
    TokenSequence,
    Vocabulary,
    apply_update,
    load_checkpoint,
    sample_batch,
    save_checkpoint,
)
from giftlab.numerics import grad_check, log_softmax, softmax


@pytest.fixture
def tiny_tf():
    return MicroTransformer(7, width=16, n_heads=2, n_layers=1, context_length=12, seed=3, init_scale=0.3)


class TestVocabulary:
    def test_valid(self):
        v = Vocabulary(5)
        assert (v.pad, v.bos, v.eos) == (0, 1, 2)
        assert Vocabulary.from_dict(v.to_dict()) == v

    @pytest.mark.parametrize("kw", [dict(size=2), dict(size=4, bos=2), dict(size=4, eos=4)])
    def test_invalid(self, kw):
        with pytest.raises(DomainError):
            Vocabulary(**kw)

    def test_token_sequence(self):
        v = Vocabulary(5)
        s = TokenSequence((3, 4), (4, 2))
        s.validate(v)
        assert s.is_complete(v)
        assert not TokenSequence((3,), (4,)).is_complete(v)
        with pytest.raises(DomainError):
            TokenSequence((5,), ()).validate(v)


class TestForward:
    def test_zero_table_is_uniform(self):
        m = TabularPolicy(4, order=2)
        lp = log_softmax(m.forward_logits([0, 3, 1, 2]))
        np.testing.assert_allclose(lp, np.log(0.25), atol=1e-15)

    def test_transformer_deterministic(self, tiny_tf):
        x = np.array([1, 4, 3, 5, 6])
        a, b = tiny_tf.forward_logits(x), tiny_tf.forward_logits(x)
        assert np.array_equal(a, b)
        assert np.all(np.isfinite(a))

    def test_bigram_counts(self):
        corpus = [[0, 1, 2], [0, 1, 1], [0, 2, 2]]
        m = TabularPolicy(3, order=1).fit_counts(corpus)
        # after 0: 1 twice, 2 once; after 1: 2 once, 1 once; after 2: 2 once
        np.testing.assert_allclose(np.exp(m.next_token_logprobs([0])), [0, 2 / 3, 1 / 3], atol=1e-20)
        np.testing.assert_allclose(np.exp(m.next_token_logprobs([0, 1])), [0, 0.5, 0.5], atol=1e-20)
        np.testing.assert_allclose(np.exp(m.next_token_logprobs([0, 2])), [0, 0, 1], atol=1e-20)

    def test_over_length_rejected(self, tiny_tf):
        with pytest.raises(DomainError):
            tiny_tf.forward_logits(np.ones(13, dtype=int))

    def test_out_of_vocab_rejected(self, tiny_tf):
        with pytest.raises(DomainError):
            tiny_tf.forward_logits([1, 7])

    @pytest.mark.parametrize("model", [MicroTransformer(7, 16, 2, 2, 12, seed=1, init_scale=0.3),
                                       TabularPolicy.random(7, 2, np.random.default_rng(0))])
    def test_causal(self, model):
        rng = np.random.default_rng(4)
        x = rng.integers(0, 7, size=10)
        base = model.forward_logits(x)
        for t in range(9):
            y = x.copy()
            y[t + 1:] = rng.integers(0, 7, size=9 - t)
            np.testing.assert_array_equal(model.forward_logits(y)[: t + 1], base[: t + 1])

    def test_batch_matches_single(self, tiny_tf):
        x = np.random.default_rng(5).integers(0, 7, size=(3, 6))
        batch = tiny_tf.forward_logits(x)
        for b in range(3):
            np.testing.assert_allclose(batch[b], tiny_tf.forward_logits(x[b]), atol=1e-13)


class TestBackward:
    def test_zero_upstream(self, tiny_tf):
        logits, cache = tiny_tf.forward(np.array([[1, 2, 3]]))
        assert not np.any(tiny_tf.backward(cache, np.zeros_like(logits)))

    def test_shape_mismatch(self, tiny_tf):
        logits, cache = tiny_tf.forward(np.array([[1, 2, 3]]))
        with pytest.raises(DomainError):
            tiny_tf.backward(cache, np.zeros((1, 2, 7)))

    def test_tabular_softmax_ce_identity(self):
        m = TabularPolicy.random(4, 1, np.random.default_rng(1))
        tokens = np.array([[2]])
        logits, cache = m.forward(tokens)
        target = np.array([0.1, 0.2, 0.3, 0.4])
        p = softmax(logits[0, 0])
        g = m.backward(cache, (p - target)[None, None])
        row = m.row_for_context([2])
        np.testing.assert_allclose(g.reshape(m.n_rows, 4)[row], p - target, atol=1e-15)

    @pytest.mark.parametrize("layers", [1, 2])
    def test_gift_loss_grad_check(self, layers):
        vocab = Vocabulary(7)
        model = MicroTransformer(7, width=16, n_heads=2, n_layers=layers, context_length=12, seed=2, init_scale=0.3)
        base = MicroTransformer(7, width=16, n_heads=2, n_layers=layers, context_length=12, seed=9, init_scale=0.3)
        batch = [TokenSequence((3, 4), (5, 6, 2)), TokenSequence((4,), (3, 2))]
        cfg = GiftConfig(beta=2.0)

        def loss(p):
            m = model.copy()
            m.params[:] = p
            return gift_loss(m, base, batch, cfg, vocab)

        idx = np.random.default_rng(0).choice(model.n_params, 300, replace=False)
        rep = grad_check(loss, model.params, indices=idx)
        assert rep.max_rel_error <= 1e-4


class TestHiddenStates:
    def test_tabular_unsupported(self):
        with pytest.raises(UnsupportedOperationError):
            TabularPolicy(4).hidden_states([0, 1])

    def test_shape_and_determinism(self, tiny_tf):
        x = np.array([1, 2, 3, 4])
        h = tiny_tf.hidden_states(x)
        assert h.shape == (4, 16)
        assert np.array_equal(h, tiny_tf.copy().hidden_states(x))

    def test_zero_step_update_is_noop(self, tiny_tf):
        x = np.array([1, 2, 3, 4])
        before = tiny_tf.hidden_states(x)
        state = OptimizerState(tiny_tf.n_params, lr=0.0)
        apply_update(tiny_tf, np.random.default_rng(0).normal(size=tiny_tf.n_params), state)
        np.testing.assert_array_equal(tiny_tf.hidden_states(x), before)


class TestSampling:
    def test_degenerate_logits_greedy(self):
        m = TabularPolicy(4, order=1)
        table = m.table
        table[:] = -60.0
        for row, nxt in [(m.row_for_context([]), 3), (m.row_for_context([0]), 3),
                         (m.row_for_context([3]), 1), (m.row_for_context([1]), 2)]:
            table[row, nxt] = 0.0
        for T in (0.3, 1.0):
            out = m.sample_sequence([0], T, 10, np.random.default_rng(7), eos=2)
            assert out.response == (3, 1, 2)

    def test_same_seed_same_output(self, tiny_tf):
        a = sample_batch(tiny_tf, [[1, 2]] * 5, 1.0, 6, np.random.default_rng(11), eos=2)
        b = sample_batch(tiny_tf, [[1, 2]] * 5, 1.0, 6, np.random.default_rng(11), eos=2)
        assert a == b

    def test_uniform_frequencies(self):
        m = TabularPolicy(4)
        out = sample_batch(m, [[0]] * 100_000, 1.0, 1, np.random.default_rng(0))
        freq = np.bincount([r[0] for r in out], minlength=4) / 100_000
        assert np.max(np.abs(freq - 0.25)) <= 0.01

    @pytest.mark.parametrize("temperature", [0.5, 2.0])
    def test_temperature_scaling(self, temperature):
        m = TabularPolicy(5, 1, np.array([0.0, 1.0, -1.0, 2.0, 0.5] * 6))
        exact = softmax(np.array([0.0, 1.0, -1.0, 2.0, 0.5]) / temperature)
        out = sample_batch(m, [[0]] * 100_000, temperature, 1, np.random.default_rng(1))
        freq = np.bincount([r[0] for r in out], minlength=5) / 100_000
        assert 0.5 * np.abs(freq - exact).sum() <= 0.01

    def test_stops_at_eos_and_max_len(self):
        m = TabularPolicy(3)
        out = sample_batch(m, [[0]] * 200, 1.0, 4, np.random.default_rng(2), eos=2)
        for r in out:
            assert len(r) <= 4
            assert 2 not in r[:-1]

    def test_bad_temperature(self):
        with pytest.raises(DomainError):
            TabularPolicy(3).sample_sequence([0], 0.0, 3, np.random.default_rng(0))


class TestOptimizer:
    def test_zero_grad_fixed_point(self):
        m = TabularPolicy.random(3, 1, np.random.default_rng(0))
        before = m.params.copy()
        apply_update(m, np.zeros(m.n_params), OptimizerState(m.n_params, lr=0.1))
        np.testing.assert_array_equal(m.params, before)

    def test_first_step_sign(self):
        m = TabularPolicy(3, 1)
        g = np.random.default_rng(1).normal(size=m.n_params)
        state = OptimizerState(m.n_params, lr=0.01)
        apply_update(m, g, state)
        np.testing.assert_array_equal(np.sign(m.params), -np.sign(g))
        np.testing.assert_allclose(np.abs(m.params), 0.01, rtol=1e-6)
        assert state.step == 1

    def test_non_finite_rejected(self):
        m = TabularPolicy(3, 1)
        g = np.zeros(m.n_params)
        g[5] = np.nan
        before = m.params.copy()
        with pytest.raises(DomainError, match="index 5"):
            apply_update(m, g, OptimizerState(m.n_params))
        np.testing.assert_array_equal(m.params, before)

    def test_quadratic_bowl(self):
        # Adam moves each coordinate about lr per step; starting at |x| >= 6 keeps
        # all 500 steps on the descent instead of jittering around the minimum
        m = TabularPolicy(4, 1, np.concatenate([np.linspace(-9, -6, 10), np.linspace(6, 9, 10)]))
        state = OptimizerState(m.n_params, lr=1e-2)
        losses = []
        for _ in range(500):
            losses.append(0.5 * float(np.sum(m.params**2)))
            apply_update(m, m.params.copy(), state)
        assert np.all(np.diff(losses[10:]) < 0)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, tiny_tf):
        vocab = Vocabulary(7)
        save_checkpoint(tiny_tf, tmp_path / "ck", vocab, seed=3)
        loaded, v2, man = load_checkpoint(tmp_path / "ck")
        probe = np.random.default_rng(0).integers(0, 7, size=(4, 8))
        assert np.array_equal(loaded.forward_logits(probe), tiny_tf.forward_logits(probe))
        assert v2 == vocab
        assert man["creation_seed"] == 3
        assert man["parameter_count"] == tiny_tf.n_params

    def test_truncated(self, tmp_path, tiny_tf):
        save_checkpoint(tiny_tf, tmp_path / "ck")
        p = tmp_path / "ck" / "params.f32le"
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match=f"expected {tiny_tf.n_params}"):
            load_checkpoint(tmp_path / "ck")

    def test_version_bump(self, tmp_path, tiny_tf):
        save_checkpoint(tiny_tf, tmp_path / "ck")
        mp = tmp_path / "ck" / "manifest.json"
        man = json.loads(mp.read_text())
        man["format_version"] = 2
        mp.write_text(json.dumps(man))
        with pytest.raises(CheckpointError, match="unsupported"):
            load_checkpoint(tmp_path / "ck")

    def test_hash_mismatch(self, tmp_path):
        m = TabularPolicy.random(3, 1, np.random.default_rng(0))
        save_checkpoint(m, tmp_path / "ck")
        p = tmp_path / "ck" / "params.f32le"
        raw = bytearray(p.read_bytes())
        raw[0] ^= 1
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(tmp_path / "ck")

    def test_non_finite(self, tmp_path):
        m = TabularPolicy(3, 1)
        m.params[2] = np.inf
        save_checkpoint(m, tmp_path / "ck")
        with pytest.raises(CheckpointError, match="non-finite"):
            load_checkpoint(tmp_path / "ck")

    def test_little_endian_layout(self, tmp_path):
        m = TabularPolicy(3, 1, np.arange(12, dtype=float))
        save_checkpoint(m, tmp_path / "ck")
        raw = (tmp_path / "ck" / "params.f32le").read_bytes()
        np.testing.assert_array_equal(np.frombuffer(raw, dtype="<f4"), np.arange(12))

    def test_pack_batch_prepends_bos(self):
        packed = pack_batch([TokenSequence((3,), (4, 2))], Vocabulary(5))
        np.testing.assert_array_equal(packed.inputs, [[1, 3, 4]])
        np.testing.assert_array_equal(packed.targets, [[3, 4, 2]])
        np.testing.assert_array_equal(packed.mask, [[0, 1, 1]])
