import math

import numpy as np
import pytest

from tabpref.augment import AugmentConfig, augment_within_buckets
from tabpref.dpo import (
    DpoConfig,
    TupleBatch,
    default_total_steps,
    dpo_loss,
    dpo_loss_and_grad,
    dpo_terms,
    dpo_train,
    margin_stats,
    neg_log_sigmoid,
    pair_logps,
    staged_finetune,
)
from tabpref.encoder import encode, fit_bins
from tabpref.exceptions import DataError
from tabpref.policy import TrainConfig, grad_check, init_params, sft_epoch
from tabpref.preference import TYPE1, PreferenceTuple, build_preferences, correlated_pairs

VOCAB = (4, 3, 5, 2)


def random_tuples(n, seed=0, vocab=VOCAB):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        col = int(rng.integers(len(vocab)))
        prompt = tuple((c, int(rng.integers(v))) for c, v in enumerate(vocab) if c != col)
        chosen, rejected = rng.choice(vocab[col], size=2, replace=False)
        out.append(PreferenceTuple(prompt, col, int(chosen), int(rejected), TYPE1))
    return out


@pytest.fixture(scope="module")
def planted_setup(request):
    from tabpref.datasets import planted_rule

    table = augment_within_buckets(planted_rule(300, 0.0, seed=1), AugmentConfig(seed=1))
    spec = fit_bins(table)
    rows = encode(table.data, spec)
    tuples = build_preferences(rows, table, spec, 1.0, seed=1)
    return rows, spec, tuples


class TestLoss:
    @pytest.mark.parametrize("x", [-800.0, -5.0, 0.0, 3.0, 800.0])
    def test_neg_log_sigmoid_stable(self, x):
        want = math.log1p(math.exp(-x)) if x > -700 else -x
        assert float(neg_log_sigmoid(x)) == pytest.approx(want, rel=1e-12)

    def test_identity_policy_is_ln2(self):
        p = init_params(VOCAB, 8, 8, seed=0, scale=0.5)
        for t in random_tuples(50):
            loss, margin, delta = dpo_loss(p, p.copy(), t)
            assert delta == 0.0 and abs(loss - math.log(2)) < 1e-12

    def test_beta_irrelevant_at_identity(self):
        p = init_params(VOCAB, 8, 8, seed=1, scale=0.5)
        t = random_tuples(1)[0]
        assert dpo_loss(p, p, t, DpoConfig(beta=0.2))[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_sigmoid_of_one(self):
        cfg = DpoConfig(beta=0.1, lam=0.0)
        loss, _, delta = dpo_terms(np.array([0.0]), np.array([-10.0]), np.array([0.0]), np.array([0.0]), cfg)
        assert delta[0] == 10 and loss[0] == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)
        assert loss[0] == pytest.approx(0.3133, abs=1e-4)

    def test_hinge_arithmetic(self):
        cfg = DpoConfig(lam=0.1)
        # Δ = 0 with the policy's chosen log-prob 0.5 below the reference
        loss, _, delta = dpo_terms(np.array([-1.5]), np.array([-2.5]), np.array([-1.0]), np.array([-2.0]), cfg)
        assert delta[0] == 0 and loss[0] - math.log(2) == pytest.approx(0.05, abs=1e-12)

    def test_loss_positive(self):
        p = init_params(VOCAB, 8, 8, seed=2, scale=1.0)
        r = init_params(VOCAB, 8, 8, seed=3, scale=1.0)
        assert all(dpo_loss(p, r, t)[0] > 0 for t in random_tuples(100))

    def test_architecture_mismatch(self):
        with pytest.raises(DataError):
            dpo_loss(init_params(VOCAB, 8, 8), init_params(VOCAB, 4, 8), random_tuples(1)[0])

    def test_delta_shift_invariance(self):
        p = init_params(VOCAB, 8, 8, seed=4, scale=0.5)
        r = init_params(VOCAB, 8, 8, seed=5, scale=0.5)
        t = random_tuples(1, seed=9)[0]
        _, _, d0 = dpo_loss(p, r, t)
        p.b_out[t.column] += 3.0
        r.b_out[t.column] -= 1.5
        assert dpo_loss(p, r, t)[2] == pytest.approx(d0, abs=1e-12)


class TestGradient:
    @pytest.mark.parametrize("lam", [0.0, 0.1, 1.0])
    def test_matches_finite_differences(self, lam):
        p = init_params(VOCAB, 8, 8, seed=6, scale=0.5)
        r = init_params(VOCAB, 8, 8, seed=7, scale=0.5)
        batch = TupleBatch.from_tuples(random_tuples(32, seed=2), len(VOCAB))
        _, rc, rr = pair_logps(r, batch)
        cfg = DpoConfig(lam=lam)
        assert grad_check(p, lambda q: dpo_loss_and_grad(q, batch, rc, rr, cfg), fraction=0.2) < 1e-4


class TestTrain:
    def test_zero_learning_rate(self):
        p = init_params(VOCAB, 8, 8, seed=0, scale=0.5)
        ref = p.copy()
        hist = dpo_train(p, ref, random_tuples(100), DpoConfig(learning_rate=0.0))
        assert p.equals(ref)
        assert all(h["mean_loss"] == pytest.approx(math.log(2), abs=1e-12) for h in hist)

    def test_reference_untouched(self):
        p = init_params(VOCAB, 8, 8, seed=0, scale=0.5)
        ref = p.copy()
        snapshot = ref.copy()
        dpo_train(p, ref, random_tuples(100))
        assert ref.equals(snapshot) and not p.equals(ref)

    def test_empty_tuples(self):
        p = init_params(VOCAB, 8, 8)
        with pytest.raises(DataError):
            dpo_train(p, p.copy(), [])

    def test_margin_improves_each_epoch(self, planted_setup):
        rows, spec, tuples = planted_setup
        p = init_params(spec.vocab_sizes, seed=0)
        for e in range(2):
            sft_epoch(p, rows, TrainConfig(), epoch_seed=e)
        ref = p.copy()
        before = margin_stats(p, ref, tuples)
        hist = dpo_train(p, ref, tuples, DpoConfig(), seed=0)
        fracs = [h["frac_positive"] for h in hist]
        assert fracs[0] < fracs[1] < fracs[2]
        after = margin_stats(p, ref, tuples)
        assert after["mean_margin"] > before["mean_margin"]
        assert after["frac_positive"] >= 0.9


class TestMarginStats:
    def test_identity(self):
        p = init_params(VOCAB, 8, 8, seed=0, scale=0.5)
        assert abs(margin_stats(p, p, random_tuples(50))["mean_delta"]) < 1e-12

    def test_order_free(self):
        p = init_params(VOCAB, 8, 8, seed=0, scale=0.5)
        r = init_params(VOCAB, 8, 8, seed=1, scale=0.5)
        ts = random_tuples(64)
        a, b = margin_stats(p, r, ts), margin_stats(p, r, ts[::-1])
        assert a == pytest.approx(b, abs=1e-12)

    def test_pure(self):
        p = init_params(VOCAB, 8, 8, seed=0)
        before = p.copy()
        margin_stats(p, p, random_tuples(10))
        assert p.equals(before)


class TestStaged:
    def _data(self):
        rng = np.random.default_rng(0)
        rows = np.column_stack([rng.integers(0, v, 200) for v in VOCAB])
        return rows, random_tuples(200)

    @pytest.mark.parametrize("rho,sft,dpo", [(0.0, 30, 0), (0.25, 23, 7), (0.5, 15, 15), (0.75, 8, 22), (1.0, 0, 30)])
    def test_step_split(self, rho, sft, dpo):
        rows, tuples = self._data()
        res = staged_finetune(init_params(VOCAB, 8, 8), rows, tuples, total_steps=30, cfg=DpoConfig(rho=rho))
        assert (res.sft_steps, res.dpo_steps) == (sft, dpo)
        assert (res.ref is None) == (dpo == 0)

    def test_rho_one_reference_is_initial(self):
        rows, tuples = self._data()
        p = init_params(VOCAB, 8, 8, seed=3)
        init = p.copy()
        res = staged_finetune(p, rows, tuples, total_steps=5, cfg=DpoConfig(rho=1.0))
        assert res.ref.equals(init)

    def test_default_total_steps(self):
        assert default_total_steps(3000, DpoConfig()) == 3 * 47

    def test_log_entries(self):
        rows, tuples = self._data()
        res = staged_finetune(init_params(VOCAB, 8, 8), rows, tuples, cfg=DpoConfig(rho=0.5))
        stages = [e["stage"] for e in res.log]
        assert stages == sorted(stages, key=lambda s: s != "sft") and {"sft", "dpo"} == set(stages)
        assert all({"mean_loss", "mean_margin", "frac_positive", "epoch"} <= set(e) for e in res.log if e["stage"] == "dpo")
