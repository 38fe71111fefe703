"""Estimator front end: augment, tokenise, fine-tune with preferences, sample."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from tabpref.augment import AugmentConfig, augment_within_buckets
from tabpref.constraints import Rule
from tabpref.dpo import DpoConfig, staged_finetune
from tabpref.encoder import DEFAULT_BINS, decode, encode, fit_bins
from tabpref.policy import TrainConfig, init_params, sample_rows
from tabpref.preference import build_preferences, correlated_pairs
from tabpref.tabular import Table


class PreferenceTabularGenerator(BaseEstimator):
    """Any-order autoregressive table generator fine-tuned on perturbation preferences.

    Parameters
    ----------
    n_bins : int
        Quantile bins per numeric column.
    d, h : int
        Embedding and hidden widths.
    rho : float
        Share of the step budget spent on preference steps (the rest is
        chain-likelihood training).
    epochs, batch_size, learning_rate : see :class:`TrainConfig`.
    dpo_learning_rate : float or None
        Step size of the preference stage; ``None`` reuses ``learning_rate``.
    beta, lam : float
        Preference loss temperature and chosen-likelihood hinge weight.
    p_type1 : float
        Probability that a tuple perturbs the target.
    pair_threshold : float
        Minimum association for a column pair to feed correlated-pair tuples.
    augment : bool
        Enlarge the training table within categorical buckets before fitting.
    random_state : int
        Seed for every stochastic step of ``fit``.
    """

    def __init__(
        self,
        n_bins: int = DEFAULT_BINS,
        d: int = 32,
        h: int = 64,
        rho: float = 0.5,
        epochs: int = 3,
        batch_size: int = 64,
        learning_rate: float = 1e-2,
        dpo_learning_rate: float | None = None,
        beta: float = 0.1,
        lam: float = 0.1,
        p_type1: float = 0.7,
        pair_threshold: float = 0.3,
        augment: bool = True,
        random_state: int = 0,
    ):
        self.n_bins = n_bins
        self.d = d
        self.h = h
        self.rho = rho
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dpo_learning_rate = dpo_learning_rate
        self.beta = beta
        self.lam = lam
        self.p_type1 = p_type1
        self.pair_threshold = pair_threshold
        self.augment = augment
        self.random_state = random_state

    def _configs(self):
        seed = self.random_state
        lr_dpo = self.learning_rate if self.dpo_learning_rate is None else self.dpo_learning_rate
        sft = TrainConfig(self.learning_rate, self.epochs, self.batch_size, seed)
        dpo = DpoConfig(self.beta, self.lam, lr_dpo, self.epochs, self.batch_size, self.rho)
        return sft, dpo

    def fit(self, X: Table, y=None, rules: list[Rule] | None = None):
        """Fit on ``X``; ``rules`` add constraint-breaking rejected completions."""
        seed = self.random_state
        sft_cfg, dpo_cfg = self._configs()
        train = augment_within_buckets(X, AugmentConfig(seed=seed)) if self.augment else X.dropna()
        spec = fit_bins(train, self.n_bins)
        rows = encode(train.data, spec)
        pairs = correlated_pairs(train, self.pair_threshold)
        tuples = build_preferences(rows, train, spec, self.p_type1, pairs, rules, seed=seed)
        params = init_params(spec.vocab_sizes, self.d, self.h, seed=seed)
        result = staged_finetune(params, rows, tuples, cfg=dpo_cfg, seed=seed, sft_cfg=sft_cfg)
        self.bin_spec_ = spec
        self.params_ = result.params
        self.reference_ = result.ref
        self.training_log_ = result.log
        self.n_train_rows_ = len(rows)
        self.tuples_ = tuples
        return self

    def sample_tokens(self, n_samples: int, random_state=None) -> np.ndarray:
        check_is_fitted(self, "params_")
        return sample_rows(self.params_, n_samples, np.random.default_rng(random_state))

    def sample(self, n_samples: int, random_state=None) -> Table:
        """Draw ``n_samples`` rows; one seed drives both token and within-bin sampling."""
        check_is_fitted(self, "params_")
        rng = np.random.default_rng(self.random_state if random_state is None else random_state)
        tokens = sample_rows(self.params_, n_samples, rng)
        return Table(self.bin_spec_.schema, decode(tokens, self.bin_spec_, rng))
