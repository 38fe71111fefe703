import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from tabpref.encoder import fit_bins
from tabpref.exceptions import DataError
from tabpref.policy import (
    TrainConfig,
    chain_nll,
    checkpoint_dict,
    cond_logprob,
    grad_check,
    init_params,
    load_checkpoint,
    n_params_formula,
    params_from_dict,
    random_orders,
    sample_row,
    sample_rows,
    save_checkpoint,
    sft_epoch,
    sft_loss_and_grad,
)


def zero_heads(params):
    for w, b in zip(params.W_out, params.b_out):
        w[...] = 0.0
        b[...] = 0.0
    return params


class TestInit:
    def test_deterministic(self):
        assert init_params((4, 3), 8, 8, seed=5).equals(init_params((4, 3), 8, 8, seed=5))

    def test_param_count(self):
        p = init_params((32, 2, 4), d=8, h=16)
        # E: 38*8, Q: 3*8, W_h: 16*16, b_h: 16, heads: 38*16 + 38
        assert p.n_params == 38 * 8 + 3 * 8 + 16 * 16 + 16 + 38 * 16 + 38
        assert p.n_params == n_params_formula((32, 2, 4), 8, 16)

    def test_zero_mean_weights(self):
        w = init_params((50, 50), d=32, h=64, seed=1).W_h.ravel()
        assert abs(w.mean()) < 3 * 0.02 / np.sqrt(w.size)

    def test_biases_zero(self):
        p = init_params((3, 3))
        assert not p.b_h.any() and not any(b.any() for b in p.b_out)

    def test_bad_width(self):
        with pytest.raises(ValueError):
            init_params((2,), d=0)


class TestCondLogprob:
    def test_zero_heads_uniform(self):
        p = zero_heads(init_params((5, 3, 7), 4, 4))
        assert cond_logprob(p, [(0, 2)], 2, 3) == pytest.approx(np.log(1 / 7), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_normalized(self, seed):
        rng = np.random.default_rng(seed)
        p = init_params((4, 6, 3, 2), 6, 5, seed=seed, scale=0.5)
        ctx_cols = [c for c in range(4) if c != 1 and rng.random() < 0.6]
        ctx = [(c, int(rng.integers(p.vocab_sizes[c]))) for c in ctx_cols]
        assert abs(logsumexp(cond_logprob(p, ctx, 1))) < 1e-9

    def test_context_order_invariant(self):
        p = init_params((4, 6, 3), 6, 5, seed=3, scale=0.5)
        a = cond_logprob(p, [(0, 1), (2, 2)], 1)
        b = cond_logprob(p, [(2, 2), (0, 1)], 1)
        np.testing.assert_array_equal(a, b)

    def test_target_in_context(self):
        with pytest.raises(DataError):
            cond_logprob(init_params((2, 2)), [(0, 1)], 0, 0)

    def test_joint_sums_to_one(self):
        p = init_params((2, 2), 4, 4, seed=0, scale=1.0)
        rows = np.array(list(itertools.product(range(2), range(2))))
        for order in ([0, 1], [1, 0]):
            orders = np.tile(order, (4, 1))
            assert abs(np.exp(-chain_nll(p, rows, orders)).sum() - 1) < 1e-6


class TestSampling:
    def test_uniform_model_multinomial(self):
        p = zero_heads(init_params((2, 2), 4, 4))
        rows = sample_rows(p, 10_000, np.random.default_rng(0))
        counts = np.bincount(rows[:, 0] * 2 + rows[:, 1], minlength=4)
        assert np.all(np.abs(counts - 2500) < 3 * np.sqrt(10_000 * 0.25 * 0.75))

    def test_vocab_one_column(self):
        p = init_params((1, 3), 4, 4, scale=1.0)
        assert np.all(sample_rows(p, 200, np.random.default_rng(1))[:, 0] == 0)

    def test_seeded(self):
        p = init_params((5, 3), 4, 4, scale=1.0)
        np.testing.assert_array_equal(sample_row(p, 11), sample_row(p, 11))

    def test_tokens_in_range(self):
        p = init_params((5, 3, 9), 4, 4, scale=1.0)
        rows = sample_rows(p, 500, np.random.default_rng(2))
        assert np.all(rows >= 0) and np.all(rows < np.array([5, 3, 9]))


class TestSft:
    def test_untrained_baseline(self):
        p = zero_heads(init_params((5, 3, 7), 4, 4))
        rows = np.array([[0, 1, 2], [4, 2, 6]])
        nll = chain_nll(p, rows, random_orders(2, 3, np.random.default_rng(0)))
        np.testing.assert_allclose(nll, np.log(5 * 3 * 7), atol=1e-6)

    def test_overfit_single_row_sgd(self):
        p = init_params((4, 3, 5), 8, 8, seed=0)
        data = np.tile([[2, 0, 4]], (8, 1))
        cfg = TrainConfig(learning_rate=0.05, batch_size=8, optimizer="sgd")
        losses = [sft_epoch(p, data, cfg, epoch_seed=e) for e in range(200)]
        assert all(b <= a for a, b in zip(losses[5:], losses[6:]))
        assert losses[-1] < 0.1 * losses[0]

    def test_zero_learning_rate_is_noop(self):
        p = init_params((4, 3), 4, 4, seed=0)
        before = p.copy()
        data = np.array([[1, 2], [3, 0]])
        losses = [sft_epoch(p, data, TrainConfig(learning_rate=0.0), epoch_seed=0) for _ in range(3)]
        assert p.equals(before) and losses[0] == losses[1] == losses[2]

    def test_empty_data(self):
        with pytest.raises(DataError):
            sft_epoch(init_params((2,)), np.zeros((0, 1), int), TrainConfig(), 0)

    def test_deterministic_rule_learned(self):
        # y = x mod 2 on a 2-column table
        p = init_params((6, 2), 8, 8, seed=0)
        x = np.arange(6)
        data = np.column_stack([x, x % 2])
        cfg = TrainConfig(learning_rate=0.05, batch_size=6)
        for e in range(500):
            sft_epoch(p, data, cfg, epoch_seed=e)
        worst = max(abs(np.exp(cond_logprob(p, [(0, int(v))], 1, int(v % 2))) - 1) for v in x)
        assert worst < 0.05


class TestGradCheck:
    # weights well away from zero keep relu pre-activations farther than eps from the kink
    @pytest.mark.parametrize("scale", [0.3, 1.0])
    def test_sft_gradient(self, scale):
        p = init_params((5, 3, 4), 8, 8, seed=2, scale=scale)
        rng = np.random.default_rng(0)
        rows = np.column_stack([rng.integers(0, v, 16) for v in (5, 3, 4)])
        orders = random_orders(16, 3, rng)
        err = grad_check(p, lambda q: sft_loss_and_grad(q, rows, orders))
        assert err < 1e-4

    def test_zero_params_use_zero_subgradient(self):
        p = init_params((3, 3), 8, 8, seed=0, scale=0.0)
        rows = np.array([[0, 1], [0, 2], [0, 0]])
        orders = random_orders(3, 2, np.random.default_rng(2))
        _, g = sft_loss_and_grad(p, rows, orders)
        # every pre-activation is exactly 0, so nothing flows below the heads
        assert not g.W_h.any() and not g.E.any() and not g.Q.any()
        assert any(b.any() for b in g.b_out)

    def test_perturbed_zero_init(self):
        p = init_params((3, 3), 8, 8, seed=0, scale=0.0)
        p.set_flat(p.flat() + np.random.default_rng(1).normal(0, 0.3, p.n_params))
        rows = np.array([[0, 1], [2, 2], [1, 0]])
        orders = random_orders(3, 2, np.random.default_rng(2))
        assert grad_check(p, lambda q: sft_loss_and_grad(q, rows, orders), fraction=1.0) < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, mixed_table):
        spec = fit_bins(mixed_table, 8)
        p = init_params(spec.vocab_sizes, 8, 8, seed=4, scale=0.7)
        save_checkpoint(tmp_path / "c.json", p, spec)
        q, spec2 = load_checkpoint(tmp_path / "c.json")
        assert q.equals(p) and spec2 == spec
        assert checkpoint_dict(q, spec2) == checkpoint_dict(p, spec)

    def test_dict_round_trip(self, mixed_table):
        spec = fit_bins(mixed_table, 4)
        p = init_params(spec.vocab_sizes, 3, 5, seed=1)
        q, _ = params_from_dict(checkpoint_dict(p, spec))
        assert q.equals(p)
