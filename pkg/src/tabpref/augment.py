"""Within-bucket interpolation for pre-training and the SMOTE baseline generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from tabpref.exceptions import DataError
from tabpref.tabular import Table


@dataclass(frozen=True)
class AugmentConfig:
    k_neighbors: int = 5
    seed: int = 0
    multiplier_override: int | None = None

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")


def multiplier(n: int) -> int:
    """Number of synthetic rows per real row for a table of ``n`` rows."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n <= 128:
        return 30
    if n <= 256:
        return 10
    if n <= 1000:
        return 5
    return 1


def _numeric_idx(table: Table, exclude_target: bool = False) -> np.ndarray:
    cols = table.schema.columns
    tgt = table.schema.target_index
    return np.array(
        [j for j, c in enumerate(cols) if not c.is_categorical and not (exclude_target and j == tgt)],
        dtype=np.int64,
    )


def _zscore(x: np.ndarray) -> np.ndarray:
    if x.shape[1] == 0:
        return x
    sd = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def neighbor_table(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of each point's ``k`` nearest neighbours (self excluded when possible).

    With fewer than two points, the only neighbour is the point itself.
    ``k`` is capped at ``len(points) - 1``. Ties break by index.
    """
    n = len(points)
    if n < 2:
        return np.zeros((n, 1), dtype=np.int64)
    k = min(k, n - 1)
    if points.shape[1] == 0:
        d = np.zeros((n, n))
    else:
        d = cdist(points, points)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k]


def _round_integer_columns(table: Table, data: np.ndarray) -> np.ndarray:
    for j, c in enumerate(table.schema.columns):
        if not c.is_categorical and c.is_integer:
            data[:, j] = np.round(data[:, j])
    return data


def augment_within_buckets(table: Table, cfg: AugmentConfig = AugmentConfig()) -> Table:
    """Append ``M(N) * N`` interpolated rows generated inside categorical buckets.

    Rows with missing cells are dropped first and ``N`` is the remaining count.
    A bucket is the set of rows sharing every categorical value. Each new row
    picks a bucket with probability proportional to its size, a seed row in
    it and one of the seed's ``k`` nearest numeric neighbours (z-scored
    Euclidean), then interpolates ``x_s + lam * (x_n - x_s)`` with
    ``lam ~ U(0, 1)`` on the numeric columns.
    """
    clean = table.dropna()
    n = clean.n_rows
    if n == 0:
        raise DataError("no complete rows left after dropping missing values")
    m = cfg.multiplier_override if cfg.multiplier_override is not None else multiplier(n)
    n_new = m * n
    rng = np.random.default_rng(cfg.seed)

    num = _numeric_idx(clean)
    cat = np.array([j for j in range(clean.schema.n_columns) if j not in set(num)], dtype=np.int64)
    data = clean.data
    z = _zscore(data[:, num])

    if cat.size:
        _, bucket_of = np.unique(data[:, cat], axis=0, return_inverse=True)
        bucket_of = bucket_of.reshape(-1)
    else:
        bucket_of = np.zeros(n, dtype=np.int64)
    members = [np.flatnonzero(bucket_of == b) for b in range(bucket_of.max() + 1)]
    neighbors = [neighbor_table(z[idx], cfg.k_neighbors) for idx in members]
    sizes = np.array([len(idx) for idx in members], dtype=np.float64)

    bucket = rng.choice(len(members), size=n_new, p=sizes / sizes.sum())
    local_seed = np.floor(rng.random(n_new) * sizes[bucket]).astype(np.int64)
    pick = rng.random(n_new)
    lam = rng.random(n_new)

    seeds = np.empty(n_new, dtype=np.int64)
    partners = np.empty(n_new, dtype=np.int64)
    for b, idx in enumerate(members):
        sel = bucket == b
        if not sel.any():
            continue
        nb = neighbors[b]
        s = local_seed[sel]
        kk = nb.shape[1]
        p = nb[s, np.minimum((pick[sel] * kk).astype(np.int64), kk - 1)]
        seeds[sel] = idx[s]
        partners[sel] = idx[p]

    new = data[seeds].copy()
    xs, xn = data[seeds][:, num], data[partners][:, num]
    new[:, num] = xs + lam[:, None] * (xn - xs)
    new = _round_integer_columns(clean, new)
    return Table(clean.schema, np.vstack([data, new]))


def smote_generate(table: Table, n_samples: int, cfg: AugmentConfig = AugmentConfig(), alpha: float = 0.5) -> Table:
    """Class-conditional SMOTE over every class with a fixed interpolation weight.

    Each sample draws a class by empirical frequency, a seed row of that
    class, and one of its ``k`` nearest same-class numeric neighbours, then
    emits ``x_s + alpha * (x_n - x_s)``. Non-target categorical cells are
    copied from the seed row; integer columns are rounded.
    """
    clean = table.dropna()
    if n_samples == 0:
        return Table(table.schema, np.empty((0, table.schema.n_columns)))
    if clean.n_rows == 0:
        raise DataError("no complete rows to interpolate from")
    tgt = clean.schema.target_index
    y = clean.data[:, tgt]
    classes, counts = np.unique(y, return_counts=True)
    num = _numeric_idx(clean, exclude_target=True)
    z = _zscore(clean.data[:, num])
    members = [np.flatnonzero(y == c) for c in classes]
    neighbors = [neighbor_table(z[idx], cfg.k_neighbors) for idx in members]

    rng = np.random.default_rng(cfg.seed)
    cls = rng.choice(len(classes), size=n_samples, p=counts / counts.sum())
    local_seed = np.floor(rng.random(n_samples) * counts[cls]).astype(np.int64)
    pick = rng.random(n_samples)

    seeds = np.empty(n_samples, dtype=np.int64)
    partners = np.empty(n_samples, dtype=np.int64)
    for c, idx in enumerate(members):
        sel = cls == c
        if not sel.any():
            continue
        nb = neighbors[c]
        s = local_seed[sel]
        kk = nb.shape[1]
        seeds[sel] = idx[s]
        partners[sel] = idx[nb[s, np.minimum((pick[sel] * kk).astype(np.int64), kk - 1)]]

    data = clean.data
    new = data[seeds].copy()
    xs, xn = data[seeds][:, num], data[partners][:, num]
    new[:, num] = xs + alpha * (xn - xs)
    new[:, tgt] = classes[cls]
    return Table(clean.schema, _round_integer_columns(clean, new))


class BucketAugmenter(BaseEstimator):
    """Estimator form of :func:`augment_within_buckets` (``fit_resample`` returns the enlarged table)."""

    def __init__(self, k_neighbors: int = 5, multiplier_override=None, random_state: int = 0):
        self.k_neighbors = k_neighbors
        self.multiplier_override = multiplier_override
        self.random_state = random_state

    def fit_resample(self, X: Table, y=None) -> Table:
        cfg = AugmentConfig(self.k_neighbors, self.random_state, self.multiplier_override)
        return augment_within_buckets(X, cfg)


class SmoteGenerator(BaseEstimator):
    """SMOTE baseline as a generator: ``fit`` stores the table, ``sample`` draws rows."""

    def __init__(self, k_neighbors: int = 5, alpha: float = 0.5, random_state: int = 0):
        self.k_neighbors = k_neighbors
        self.alpha = alpha
        self.random_state = random_state

    def fit(self, X: Table, y=None):
        self.table_ = X
        return self

    def sample(self, n_samples: int, random_state=None) -> Table:
        check_is_fitted(self, "table_")
        seed = self.random_state if random_state is None else random_state
        cfg = AugmentConfig(self.k_neighbors, seed)
        return smote_generate(self.table_, n_samples, cfg, self.alpha)
