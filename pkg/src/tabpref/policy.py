"""Any-order autoregressive generator over column tokens.

A conditional ``p(token of column c | set of observed (column, token) pairs)``
is computed as::

    ctx    = mean of value embeddings E[(col, tok)] over the observed pairs
    hidden = relu(W_h @ [ctx; Q[c]] + b_h)
    logp   = log_softmax(W_c @ hidden + b_c)

Rows are generated, and the chain likelihood is trained, under a random
column order drawn per row. Gradients are derived by hand and checked with
central finite differences in :func:`grad_check`.
"""

from __future__ import annotations

import base64
import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy.special import logsumexp

from tabpref.encoder import BinSpec
from tabpref.exceptions import DataError
from tabpref.tabular import Schema

INIT_STD = 0.02


OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 3
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class PolicyParams:
    """Weights of the generator. Head ``c`` maps the hidden layer to column ``c``'s vocabulary."""

    vocab_sizes: tuple[int, ...]
    E: np.ndarray
    Q: np.ndarray
    W_h: np.ndarray
    b_h: np.ndarray
    W_out: list[np.ndarray]
    b_out: list[np.ndarray]

    @property
    def d(self) -> int:
        return self.E.shape[1]

    @property
    def h(self) -> int:
        return self.W_h.shape[0]

    @property
    def n_columns(self) -> int:
        return len(self.vocab_sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.vocab_sizes)[:-1]]).astype(np.int64)

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter arrays in a fixed order (shared by flattening and checkpoints)."""
        out = [("E", self.E), ("Q", self.Q), ("W_h", self.W_h), ("b_h", self.b_h)]
        for c in range(self.n_columns):
            out += [(f"W_out.{c}", self.W_out[c]), (f"b_out.{c}", self.b_out[c])]
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for _, a in self.arrays())

    def copy(self) -> "PolicyParams":
        return copy.deepcopy(self)

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(
            self.vocab_sizes,
            np.zeros_like(self.E),
            np.zeros_like(self.Q),
            np.zeros_like(self.W_h),
            np.zeros_like(self.b_h),
            [np.zeros_like(w) for w in self.W_out],
            [np.zeros_like(b) for b in self.b_out],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.arrays()])

    def set_flat(self, v: np.ndarray) -> None:
        pos = 0
        for _, a in self.arrays():
            a.ravel()[:] = v[pos : pos + a.size]
            pos += a.size

    def add_(self, other: "PolicyParams", scale: float) -> None:
        """In-place ``self += scale * other``."""
        for (_, a), (_, b) in zip(self.arrays(), other.arrays()):
            a += scale * b

    def same_architecture(self, other: "PolicyParams") -> bool:
        return (
            self.vocab_sizes == other.vocab_sizes
            and [a.shape for _, a in self.arrays()] == [b.shape for _, b in other.arrays()]
        )

    def equals(self, other: "PolicyParams") -> bool:
        return self.same_architecture(other) and all(
            np.array_equal(a, b) for (_, a), (_, b) in zip(self.arrays(), other.arrays())
        )


def n_params_formula(vocab_sizes, d: int, h: int) -> int:
    v = sum(vocab_sizes)
    c = len(vocab_sizes)
    return v * d + c * d + h * 2 * d + h + v * h + v


def init_params(vocab_sizes, d: int = 32, h: int = 64, seed: int = 0, scale: float = INIT_STD) -> PolicyParams:
    """Gaussian weights with standard deviation ``scale``; zero biases."""
    if d < 1 or h < 1:
        raise ValueError("d and h must be >= 1")
    vocab_sizes = tuple(int(v) for v in vocab_sizes)
    rng = np.random.default_rng(seed)
    return PolicyParams(
        vocab_sizes,
        rng.normal(0.0, scale, (sum(vocab_sizes), d)),
        rng.normal(0.0, scale, (len(vocab_sizes), d)),
        rng.normal(0.0, scale, (h, 2 * d)),
        np.zeros(h),
        [rng.normal(0.0, scale, (v, h)) for v in vocab_sizes],
        [np.zeros(v) for v in vocab_sizes],
    )


# -- forward / backward ------------------------------------------------------


@dataclass
class _Cache:
    ctx: np.ndarray
    tcol: np.ndarray
    mask: np.ndarray
    idx: np.ndarray
    count: np.ndarray
    z: np.ndarray
    a: np.ndarray
    hidden: np.ndarray
    logp: np.ndarray


def forward(params: PolicyParams, ctx: np.ndarray, tcol: np.ndarray) -> _Cache:
    """Log-probabilities for a batch of queries.

    ``ctx`` is ``(n, n_columns)`` with the observed token per column or ``-1``;
    ``tcol`` holds each query's target column. Returns a cache whose ``logp``
    is ``(n, max_vocab)``, ``-inf``-padded past each column's vocabulary.
    """
    ctx = np.asarray(ctx, dtype=np.int64)
    tcol = np.asarray(tcol, dtype=np.int64)
    mask = ctx >= 0
    if np.any(mask[np.arange(len(tcol)), tcol]):
        raise DataError("target column is part of the context")
    count = mask.sum(axis=1)
    idx = params.offsets[None, :] + np.where(mask, ctx, 0)
    pooled = (params.E[idx] * mask[..., None]).sum(axis=1) / np.maximum(count, 1)[:, None]
    z = np.concatenate([pooled, params.Q[tcol]], axis=1)
    a = z @ params.W_h.T + params.b_h
    hidden = np.maximum(a, 0.0)
    logp = np.full((len(tcol), max(params.vocab_sizes)), -np.inf)
    for c in np.unique(tcol):
        sel = tcol == c
        logits = hidden[sel] @ params.W_out[c].T + params.b_out[c]
        logp[sel, : params.vocab_sizes[c]] = logits - logsumexp(logits, axis=1, keepdims=True)
    return _Cache(ctx, tcol, mask, idx, count, z, a, hidden, logp)


def backward(params: PolicyParams, cache: _Cache, w: np.ndarray) -> PolicyParams:
    """Gradient of ``sum(w * logp)`` over the valid entries of ``cache.logp``."""
    grads = params.zeros_like()
    d = params.d
    dh = np.zeros_like(cache.hidden)
    for c in np.unique(cache.tcol):
        sel = cache.tcol == c
        v = params.vocab_sizes[c]
        ws = w[sel, :v]
        p = np.exp(cache.logp[sel, :v])
        dlogits = ws - p * ws.sum(axis=1, keepdims=True)
        grads.W_out[c] += dlogits.T @ cache.hidden[sel]
        grads.b_out[c] += dlogits.sum(axis=0)
        dh[sel] = dlogits @ params.W_out[c]
    # relu subgradient is 0 at exactly 0
    da = dh * (cache.a > 0)
    grads.W_h += da.T @ cache.z
    grads.b_h += da.sum(axis=0)
    dz = da @ params.W_h
    np.add.at(grads.Q, cache.tcol, dz[:, d:])
    dpooled = dz[:, :d] / np.maximum(cache.count, 1)[:, None]
    rows, cols = np.nonzero(cache.mask)
    np.add.at(grads.E, cache.idx[rows, cols], dpooled[rows])
    return grads


def cond_logprob(params: PolicyParams, context, target_col: int, token: int | None = None):
    """``log p(token | context)`` for one query; all log-probs of the column when ``token`` is None.

    ``context`` is an iterable of ``(column, token)`` pairs; order does not matter.
    """
    ctx = np.full((1, params.n_columns), -1, dtype=np.int64)
    for c, t in context:
        if c == target_col:
            raise DataError(f"target column {target_col} appears in the context")
        ctx[0, c] = t
    logp = forward(params, ctx, np.array([target_col])).logp[0, : params.vocab_sizes[target_col]]
    return logp if token is None else float(logp[token])


# -- chain likelihood ---------------------------------------------------------


def random_orders(n: int, n_columns: int, rng: np.random.Generator) -> np.ndarray:
    return np.argsort(rng.random((n, n_columns)), axis=1, kind="stable")


def chain_queries(rows: np.ndarray, orders: np.ndarray):
    """Expand rows into one query per (row, position) of each row's column order.

    Returns ``(ctx, tcol, token)`` with ``n_rows * n_columns`` queries; query
    ``(r, j)`` targets column ``orders[r, j]`` given the columns before it.
    """
    n, C = rows.shape
    rank = np.empty_like(orders)
    rank[np.arange(n)[:, None], orders] = np.arange(C)[None, :]
    pos = np.arange(C)
    visible = rank[:, None, :] < pos[None, :, None]  # (n, j, c)
    ctx = np.where(visible, rows[:, None, :], -1).reshape(n * C, C)
    tcol = orders.reshape(n * C)
    token = rows[np.arange(n)[:, None], orders].reshape(n * C)
    return ctx, tcol, token


def sft_loss_and_grad(params: PolicyParams, rows: np.ndarray, orders: np.ndarray):
    """Mean per-row chain negative log-likelihood and its gradient."""
    rows = np.asarray(rows, dtype=np.int64)
    ctx, tcol, token = chain_queries(rows, orders)
    cache = forward(params, ctx, tcol)
    q = np.arange(len(tcol))
    nll = -cache.logp[q, token].reshape(rows.shape).sum(axis=1)
    w = np.zeros_like(cache.logp)
    w[q, token] = -1.0 / len(rows)
    return float(nll.mean()), backward(params, cache, w)


def chain_nll(params: PolicyParams, rows: np.ndarray, orders: np.ndarray) -> np.ndarray:
    """Per-row chain negative log-likelihood under the given column orders."""
    rows = np.asarray(rows, dtype=np.int64)
    ctx, tcol, token = chain_queries(rows, orders)
    logp = forward(params, ctx, tcol).logp
    return -logp[np.arange(len(tcol)), token].reshape(rows.shape).sum(axis=1)


def batch_stream(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless minibatch indices: reshuffled full passes over ``range(n)``."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


class SGD:
    """Plain gradient descent."""

    def __init__(self, params: PolicyParams, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: PolicyParams, grads: PolicyParams) -> None:
        if self.learning_rate:
            params.add_(grads, -self.learning_rate)


class Adam:
    """Adam with bias correction and no weight decay."""

    def __init__(self, params: PolicyParams, learning_rate: float, b1=0.9, b2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: PolicyParams, grads: PolicyParams) -> None:
        if not self.learning_rate:
            return
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for (_, p), (_, g), (_, m), (_, v) in zip(
            params.arrays(), grads.arrays(), self.m.arrays(), self.v.arrays()
        ):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params: PolicyParams, name: str, learning_rate: float):
    if name == "adam":
        return Adam(params, learning_rate)
    if name == "sgd":
        return SGD(params, learning_rate)
    raise ValueError(f"unknown optimizer {name!r}")


def sft_step(params: PolicyParams, batch: np.ndarray, optimizer, rng: np.random.Generator) -> float:
    """One update on a minibatch under fresh random column orders; returns the pre-update mean NLL."""
    orders = random_orders(len(batch), params.n_columns, rng)
    loss, grads = sft_loss_and_grad(params, batch, orders)
    optimizer.step(params, grads)
    return loss


def sft_epoch(
    params: PolicyParams, data: np.ndarray, cfg: TrainConfig, epoch_seed: int, optimizer=None
) -> float:
    """One pass of minibatch training on the chain loss; returns the epoch mean NLL.

    A fresh column order is drawn for every row. ``params`` is updated in
    place. Pass the same ``optimizer`` across epochs to keep its state.
    """
    data = np.asarray(data, dtype=np.int64)
    if len(data) == 0:
        raise DataError("sft_epoch needs at least one row")
    if optimizer is None:
        optimizer = make_optimizer(params, cfg.optimizer, cfg.learning_rate)
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(len(data))
    total = 0.0
    for start in range(0, len(data), cfg.batch_size):
        batch = data[order[start : start + cfg.batch_size]]
        total += sft_step(params, batch, optimizer, rng) * len(batch)
    return total / len(data)


# -- sampling ----------------------------------------------------------------


def sample_rows(params: PolicyParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling of ``n`` rows, each under its own random column order."""
    C = params.n_columns
    tokens = np.full((n, C), -1, dtype=np.int64)
    if n == 0:
        return tokens
    orders = random_orders(n, C, rng)
    rows = np.arange(n)
    for j in range(C):
        tcol = orders[:, j]
        probs = np.exp(forward(params, tokens, tcol).logp)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(n) * cdf[:, -1]
        tok = (cdf <= u[:, None]).sum(axis=1)
        tokens[rows, tcol] = np.minimum(tok, np.asarray(params.vocab_sizes)[tcol] - 1)
    return tokens


def sample_row(params: PolicyParams, seed=None) -> np.ndarray:
    return sample_rows(params, 1, np.random.default_rng(seed))[0]


# -- gradient checking ---------------------------------------------------------


def grad_check(
    params: PolicyParams,
    loss_fn: Callable[[PolicyParams], tuple[float, PolicyParams]],
    eps: float = 1e-4,
    seed: int = 0,
    fraction: float = 0.01,
    min_coords: int = 50,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, grads)``; it must be deterministic.
    A random ``fraction`` of coordinates (at least ``min_coords``) is checked.
    """
    work = params.copy()
    _, grads = loss_fn(work)
    g = grads.flat()
    theta = work.flat()
    rng = np.random.default_rng(seed)
    m = min(theta.size, max(min_coords, int(np.ceil(fraction * theta.size))))
    coords = rng.choice(theta.size, size=m, replace=False)
    worst = 0.0
    for i in coords:
        orig = theta[i]
        theta[i] = orig + eps
        work.set_flat(theta)
        lp, _ = loss_fn(work)
        theta[i] = orig - eps
        work.set_flat(theta)
        lm, _ = loss_fn(work)
        theta[i] = orig
        work.set_flat(theta)
        fd = (lp - lm) / (2 * eps)
        worst = max(worst, abs(g[i] - fd) / max(1e-8, abs(fd)))
    return worst


# -- checkpoints ---------------------------------------------------------------


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).astype(np.float64)


def checkpoint_dict(params: PolicyParams, spec: BinSpec, extra: dict | None = None) -> dict:
    return {
        "format": "tabpref.policy/1",
        "schema": spec.schema.to_dict(),
        "binspec": spec.to_dict(),
        "hyperparams": {"d": params.d, "h": params.h, "vocab_sizes": list(params.vocab_sizes)},
        "weights": {name: {"shape": list(a.shape), "data": _b64(a)} for name, a in params.arrays()},
        "extra": extra or {},
    }


def params_from_dict(d: dict) -> tuple[PolicyParams, BinSpec]:
    schema = Schema.from_dict(d["schema"])
    spec = BinSpec.from_dict(schema, d["binspec"])
    hp = d["hyperparams"]
    params = init_params(hp["vocab_sizes"], hp["d"], hp["h"], seed=0)
    for name, a in params.arrays():
        w = d["weights"][name]
        a[...] = _unb64(w["data"], tuple(w["shape"]))
    return params, spec


def save_checkpoint(path, params: PolicyParams, spec: BinSpec, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(params, spec, extra), indent=1), encoding="utf-8")


def load_checkpoint(path) -> tuple[PolicyParams, BinSpec]:
    return params_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
