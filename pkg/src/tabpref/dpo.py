"""Preference alignment of the generator against a frozen reference copy.

Per tuple ``(prompt X, chosen C, rejected R)`` the loss is::

    delta = (log pi(C|X) - log pi(R|X)) - (log ref(C|X) - log ref(R|X))
    loss  = -log sigmoid(beta * delta) + lam * max(0, log ref(C|X) - log pi(C|X))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from tabpref.exceptions import DataError
from tabpref.policy import (
    PolicyParams,
    TrainConfig,
    backward,
    batch_stream,
    forward,
    make_optimizer,
    sft_step,
)
from tabpref.preference import PreferenceTuple


@dataclass
class DpoConfig:
    beta: float = 0.1
    lam: float = 0.1
    learning_rate: float = 1e-2
    epochs: int = 3
    batch_size: int = 64
    rho: float = 0.5
    optimizer: str = "adam"

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TupleBatch:
    """Array form of preference tuples: prompt tokens (``-1`` = absent), column, chosen, rejected."""

    ctx: np.ndarray
    column: np.ndarray
    chosen: np.ndarray
    rejected: np.ndarray

    def __len__(self) -> int:
        return len(self.column)

    def take(self, idx) -> "TupleBatch":
        return TupleBatch(self.ctx[idx], self.column[idx], self.chosen[idx], self.rejected[idx])

    @classmethod
    def from_tuples(cls, tuples: list[PreferenceTuple], n_columns: int) -> "TupleBatch":
        n = len(tuples)
        ctx = np.full((n, n_columns), -1, dtype=np.int64)
        for i, t in enumerate(tuples):
            for c, tok in t.prompt:
                ctx[i, c] = tok
        return cls(
            ctx,
            np.array([t.column for t in tuples], dtype=np.int64),
            np.array([t.chosen for t in tuples], dtype=np.int64),
            np.array([t.rejected for t in tuples], dtype=np.int64),
        )


def neg_log_sigmoid(x):
    """``-log(sigmoid(x))`` without overflow, branching on the sign of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, np.log1p(np.exp(-np.abs(x))), -x + np.log1p(np.exp(-np.abs(x))))


def pair_logps(params: PolicyParams, batch: TupleBatch):
    cache = forward(params, batch.ctx, batch.column)
    idx = np.arange(len(batch))
    return cache, cache.logp[idx, batch.chosen], cache.logp[idx, batch.rejected]


def dpo_terms(policy_c, policy_r, ref_c, ref_r, cfg: DpoConfig):
    """Per-tuple ``(loss, margin, delta)`` from the four log-probabilities."""
    delta = (policy_c - policy_r) - (ref_c - ref_r)
    loss = neg_log_sigmoid(cfg.beta * delta) + cfg.lam * np.maximum(0.0, ref_c - policy_c)
    return loss, policy_c - policy_r, delta


def _check(params: PolicyParams, ref: PolicyParams) -> None:
    if not params.same_architecture(ref):
        raise DataError("policy and reference differ in architecture")


def dpo_loss(params: PolicyParams, ref: PolicyParams, t: PreferenceTuple, cfg: DpoConfig = DpoConfig()):
    """``(loss, margin, delta)`` for a single tuple."""
    _check(params, ref)
    batch = TupleBatch.from_tuples([t], params.n_columns)
    _, pc, pr = pair_logps(params, batch)
    _, rc, rr = pair_logps(ref, batch)
    loss, margin, delta = dpo_terms(pc, pr, rc, rr, cfg)
    return float(loss[0]), float(margin[0]), float(delta[0])


def dpo_loss_and_grad(params: PolicyParams, batch: TupleBatch, ref_c, ref_r, cfg: DpoConfig):
    """Mean loss over ``batch`` and its gradient; reference log-probs are constants."""
    cache, pc, pr = pair_logps(params, batch)
    loss, _, delta = dpo_terms(pc, pr, ref_c, ref_r, cfg)
    n = len(batch)
    # d/dx of -log sigmoid(x) is -sigmoid(-x); hinge subgradient is 0 at the kink
    g_sig = -cfg.beta * expit(-cfg.beta * delta)
    g_c = g_sig - cfg.lam * (ref_c - pc > 0)
    g_r = -g_sig
    w = np.zeros_like(cache.logp)
    idx = np.arange(n)
    w[idx, batch.chosen] += g_c / n
    w[idx, batch.rejected] += g_r / n
    return float(loss.mean()), backward(params, cache, w)


def margin_stats(params: PolicyParams, ref: PolicyParams, tuples) -> dict:
    """Mean margin, mean delta and share of tuples with a positive margin (no mutation)."""
    _check(params, ref)
    batch = tuples if isinstance(tuples, TupleBatch) else TupleBatch.from_tuples(list(tuples), params.n_columns)
    if len(batch) == 0:
        return {"mean_margin": 0.0, "mean_delta": 0.0, "frac_positive": 0.0}
    _, pc, pr = pair_logps(params, batch)
    _, rc, rr = pair_logps(ref, batch)
    margin = pc - pr
    delta = margin - (rc - rr)
    return {
        "mean_margin": float(margin.mean()),
        "mean_delta": float(delta.mean()),
        "frac_positive": float(np.mean(margin > 0)),
    }


class _DpoRunner:
    """Minibatch stream over a fixed tuple set with cached reference log-probs."""

    def __init__(self, params, ref, tuples, cfg: DpoConfig, rng):
        _check(params, ref)
        self.batch = tuples if isinstance(tuples, TupleBatch) else TupleBatch.from_tuples(list(tuples), params.n_columns)
        if len(self.batch) == 0:
            raise DataError("DPO needs at least one preference tuple")
        _, self.ref_c, self.ref_r = pair_logps(ref, self.batch)
        self.params, self.cfg = params, cfg
        self.stream = batch_stream(len(self.batch), cfg.batch_size, rng)
        self.optimizer = make_optimizer(params, cfg.optimizer, cfg.learning_rate)

    def step(self) -> dict:
        idx = next(self.stream)
        sub = self.batch.take(idx)
        ref_c, ref_r = self.ref_c[idx], self.ref_r[idx]
        loss, grads = dpo_loss_and_grad(self.params, sub, ref_c, ref_r, self.cfg)
        # margins measured on the pre-update parameters, like the loss
        _, pc, pr = pair_logps(self.params, sub)
        self.optimizer.step(self.params, grads)
        return {"n": len(idx), "loss": loss * len(idx), "margin": float((pc - pr).sum()), "pos": int((pc > pr).sum())}


def _summarise(chunks: list[dict], **extra) -> dict:
    n = sum(c["n"] for c in chunks)
    return {
        **extra,
        "mean_loss": sum(c["loss"] for c in chunks) / n,
        "mean_margin": sum(c["margin"] for c in chunks) / n,
        "frac_positive": sum(c["pos"] for c in chunks) / n,
    }


def dpo_train(params: PolicyParams, ref: PolicyParams, tuples, cfg: DpoConfig = DpoConfig(), seed: int = 0) -> list[dict]:
    """Minibatch descent on the mean preference loss; ``params`` is updated in place.

    Returns one stats dict per epoch, aggregated over that epoch's batches
    before each update.
    """
    runner = _DpoRunner(params, ref, tuples, cfg, np.random.default_rng(seed))
    steps_per_epoch = math.ceil(len(runner.batch) / cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        chunks = [runner.step() for _ in range(steps_per_epoch)]
        history.append(_summarise(chunks, stage="dpo", epoch=epoch))
    return history


def default_total_steps(n_rows: int, cfg: DpoConfig) -> int:
    return cfg.epochs * math.ceil(n_rows / cfg.batch_size)


@dataclass
class StagedResult:
    params: PolicyParams
    ref: PolicyParams | None
    sft_steps: int
    dpo_steps: int
    log: list[dict] = field(default_factory=list)


def split_steps(total_steps: int, rho: float) -> tuple[int, int]:
    """``(ceil((1 - rho) T), T - ceil((1 - rho) T))`` chain-likelihood and preference steps."""
    n_sft = math.ceil((1.0 - rho) * total_steps)
    return n_sft, total_steps - n_sft


def sft_phase(params: PolicyParams, rows: np.ndarray, n_steps: int, sft_cfg: TrainConfig, rng) -> list[dict]:
    """``n_steps`` chain-likelihood minibatch updates; one log entry per pass over ``rows``."""
    rows = np.asarray(rows, dtype=np.int64)
    if n_steps and len(rows) == 0:
        raise DataError("SFT stage needs rows")
    log = []
    if not n_steps:
        return log
    opt = make_optimizer(params, sft_cfg.optimizer, sft_cfg.learning_rate)
    stream = batch_stream(len(rows), sft_cfg.batch_size, rng)
    per_epoch = math.ceil(len(rows) / sft_cfg.batch_size)
    losses, sizes = [], []
    for step in range(n_steps):
        idx = next(stream)
        losses.append(sft_step(params, rows[idx], opt, rng) * len(idx))
        sizes.append(len(idx))
        if (step + 1) % per_epoch == 0 or step + 1 == n_steps:
            log.append({"stage": "sft", "epoch": len(log), "mean_loss": sum(losses) / sum(sizes)})
            losses, sizes = [], []
    return log


def dpo_phase(params: PolicyParams, ref: PolicyParams, tuples, n_steps: int, cfg: DpoConfig, rng) -> list[dict]:
    """``n_steps`` preference updates against the frozen ``ref``; one log entry per pass over the tuples."""
    log = []
    if not n_steps:
        return log
    runner = _DpoRunner(params, ref, tuples, cfg, rng)
    per_epoch = math.ceil(len(runner.batch) / cfg.batch_size)
    chunks = []
    for step in range(n_steps):
        chunks.append(runner.step())
        if (step + 1) % per_epoch == 0 or step + 1 == n_steps:
            log.append(_summarise(chunks, stage="dpo", epoch=len(log)))
            chunks = []
    return log


def staged_finetune(
    params: PolicyParams,
    rows: np.ndarray,
    tuples,
    total_steps: int | None = None,
    cfg: DpoConfig = DpoConfig(),
    seed: int = 0,
    sft_cfg: TrainConfig | None = None,
) -> StagedResult:
    """Split a fixed step budget: ``ceil((1 - rho) T)`` chain-likelihood steps,
    then a reference snapshot, then ``floor(rho T)`` preference steps.

    ``params`` is updated in place. Log entries are emitted once per pass over
    the respective data.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if total_steps is None:
        total_steps = default_total_steps(len(rows), cfg)
    sft_cfg = sft_cfg or TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size)
    n_sft, n_dpo = split_steps(total_steps, cfg.rho)
    rng = np.random.default_rng(seed)
    log = sft_phase(params, rows, n_sft, sft_cfg, rng)
    ref = params.copy() if n_dpo else None
    log += dpo_phase(params, ref, tuples, n_dpo, cfg, rng)
    return StagedResult(params, ref, n_sft, n_dpo, log)
