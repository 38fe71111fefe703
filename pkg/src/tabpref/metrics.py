"""Statistical fidelity and ranking metrics.

Association measures follow the column-type pairing used everywhere in the
package: Pearson for numeric/numeric, Cramér's V (bias-uncorrected) for
categorical/categorical and the correlation ratio for mixed pairs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from tabpref.exceptions import DataError, SchemaError
from tabpref.tabular import Table


# -- primitive statistics ----------------------------------------------------


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_a - F_b|``."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise DataError("KS statistic needs two nonempty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def frequencies(codes, n_levels: int) -> np.ndarray:
    codes = np.asarray(codes).astype(np.int64)
    return np.bincount(codes, minlength=n_levels) / max(len(codes), 1)


def tvd(a, b, n_levels: int) -> float:
    """Total variation distance between two empirical category distributions."""
    return float(0.5 * np.abs(frequencies(a, n_levels) - frequencies(b, n_levels)).sum())


def pearson(x, y) -> float:
    """Pearson correlation; ``nan`` when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    den = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    if den == 0:
        return float("nan")
    return float(np.clip((dx * dy).sum() / den, -1.0, 1.0))


def contingency(a, b) -> np.ndarray:
    """Count table over the observed levels of two code vectors."""
    _, ia = np.unique(np.asarray(a), return_inverse=True)
    _, ib = np.unique(np.asarray(b), return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia.ravel(), ib.ravel()), 1)
    return table


def cramers_v(a, b) -> float:
    """Bias-uncorrected Cramér's V, ``sqrt(chi2 / (n * min(r - 1, c - 1)))``.

    ``nan`` when either variable takes a single observed level.
    """
    obs = contingency(a, b)
    r, c = obs.shape
    if min(r, c) < 2:
        return float("nan")
    n = obs.sum()
    expected = obs.sum(axis=1, keepdims=True) * obs.sum(axis=0, keepdims=True) / n
    chi2 = ((obs - expected) ** 2 / expected).sum()
    return float(np.sqrt(min(1.0, chi2 / (n * min(r - 1, c - 1)))))


def correlation_ratio(categories, values) -> float:
    """Correlation ratio ``sqrt(between-group variance / total variance)``; ``nan`` if constant."""
    values = np.asarray(values, dtype=np.float64)
    _, groups = np.unique(np.asarray(categories), return_inverse=True)
    groups = groups.ravel()
    mean = values.mean()
    total = ((values - mean) ** 2).sum()
    if total == 0:
        return float("nan")
    counts = np.bincount(groups)
    sums = np.bincount(groups, weights=values)
    between = (counts * (sums / counts - mean) ** 2).sum()
    return float(np.sqrt(np.clip(between / total, 0.0, 1.0)))


def association(table: Table, a: str, b: str, signed: bool = False) -> float:
    """Type-dispatched association between two columns of one table.

    Numeric pairs give Pearson (absolute unless ``signed``); categorical pairs
    Cramér's V; mixed pairs the correlation ratio. Rows with a missing cell
    in either column are skipped.
    """
    ca, cb = table.schema.column(a), table.schema.column(b)
    x, y = table.values(a), table.values(b)
    ok = ~(np.isnan(x) | np.isnan(y))
    x, y = x[ok], y[ok]
    if len(x) == 0:
        return float("nan")
    if ca.is_categorical and cb.is_categorical:
        return cramers_v(x, y)
    if ca.is_categorical:
        return correlation_ratio(x, y)
    if cb.is_categorical:
        return correlation_ratio(y, x)
    r = pearson(x, y)
    return r if signed else abs(r)


# -- fidelity ----------------------------------------------------------------


def _check_schemas(real: Table, synth: Table) -> None:
    if real.schema != synth.schema:
        raise SchemaError("real and synthetic tables must share a schema")
    if real.n_rows == 0 or synth.n_rows == 0:
        raise DataError("fidelity metrics need nonempty tables")


def _present(v: np.ndarray) -> np.ndarray:
    return v[~np.isnan(v)]


def shape_score(real: Table, synth: Table) -> tuple[dict[str, float], float]:
    """Per-column marginal similarity (1 - KS numeric, 1 - TVD categorical) and their mean."""
    _check_schemas(real, synth)
    scores = {}
    for col in real.schema.columns:
        r, s = _present(real.values(col.name)), _present(synth.values(col.name))
        if col.is_categorical:
            scores[col.name] = 1.0 - tvd(r, s, col.n_categories)
        else:
            scores[col.name] = 1.0 - ks_statistic(r, s)
    return scores, float(np.mean(list(scores.values())))


def _joint_tvd(real: Table, synth: Table, a: str, b: str) -> float:
    na = real.schema.column(a).n_categories
    nb = real.schema.column(b).n_categories

    def joint(t: Table) -> np.ndarray:
        x, y = t.values(a), t.values(b)
        ok = ~(np.isnan(x) | np.isnan(y))
        return frequencies(x[ok] * nb + y[ok], na * nb)

    return float(0.5 * np.abs(joint(real) - joint(synth)).sum())


@dataclass
class CorrSimilarity:
    columns: list[str]
    matrix: np.ndarray
    mean: float
    degenerate_pairs: int = 0


def corr_similarity(real: Table, synth: Table) -> CorrSimilarity:
    """Pairwise dependence similarity between real and synthetic tables.

    numeric/numeric: ``1 - |rho_r - rho_s| / 2``; categorical/categorical:
    ``1 - TVD`` of the joint category distribution; mixed: ``1 - |eta_r - eta_s|``.
    An undefined coefficient (constant column) counts as 0, so a pair that is
    constant on both sides scores 1.
    """
    _check_schemas(real, synth)
    cols = real.schema.columns
    if len(cols) < 2:
        raise DataError("correlation similarity needs at least two columns")
    k = len(cols)
    m = np.eye(k)
    degenerate = 0
    for i in range(k):
        for j in range(i + 1, k):
            a, b = cols[i], cols[j]
            if a.is_categorical and b.is_categorical:
                sim = 1.0 - _joint_tvd(real, synth, a.name, b.name)
            else:
                r = association(real, a.name, b.name, signed=True)
                s = association(synth, a.name, b.name, signed=True)
                if np.isnan(r) or np.isnan(s):
                    degenerate += 1
                r, s = np.nan_to_num(r), np.nan_to_num(s)
                if a.is_categorical or b.is_categorical:
                    sim = 1.0 - abs(r - s)
                else:
                    sim = 1.0 - abs(r - s) / 2.0
            m[i, j] = m[j, i] = sim
    iu = np.triu_indices(k, 1)
    return CorrSimilarity([c.name for c in cols], m, float(m[iu].mean()), degenerate)


def feature_target_score(real: Table, synth: Table) -> tuple[dict[str, float], float]:
    """``1 - 2 |S - R|`` per non-target column, where R and S are the real and
    synthetic associations with the target. Values below 0 are reported as is."""
    _check_schemas(real, synth)
    target = real.schema.target
    scores = {}
    for col in real.schema.columns:
        if col.name == target:
            continue
        r = np.nan_to_num(association(real, target, col.name, signed=True))
        s = np.nan_to_num(association(synth, target, col.name, signed=True))
        scores[col.name] = float(1.0 - 2.0 * abs(s - r))
    return scores, float(np.mean(list(scores.values()))) if scores else float("nan")


def embed(table: Table, reference: Table) -> np.ndarray:
    """Shared numeric space: numerics z-scored with ``reference`` statistics,
    categoricals one-hot scaled by ``1/sqrt(2)`` (two differing categories are at distance 1)."""
    parts = []
    for j, col in enumerate(table.schema.columns):
        x = table.data[:, j]
        if col.is_categorical:
            onehot = np.zeros((len(x), col.n_categories))
            ok = ~np.isnan(x)
            onehot[np.flatnonzero(ok), x[ok].astype(np.int64)] = 1.0 / np.sqrt(2.0)
            parts.append(onehot)
        else:
            ref = _present(reference.data[:, j])
            mu = ref.mean() if ref.size else 0.0
            sd = ref.std() if ref.size else 1.0
            parts.append(((np.nan_to_num(x, nan=mu) - mu) / (sd if sd > 0 else 1.0))[:, None])
    return np.hstack(parts) if parts else np.zeros((table.n_rows, 0))


def kth_neighbor_distance(points: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its ``k``-th nearest other point."""
    d = cdist(points, points)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def precision_recall(real: Table, synth: Table, k: int = 5) -> tuple[float, float]:
    """k-NN ball estimates of alpha-precision and beta-recall.

    Precision: share of synthetic points whose nearest real point ``r`` is
    within ``r``'s distance to its ``k``-th nearest real neighbour. Recall:
    the same with the roles of real and synthetic swapped.
    """
    _check_schemas(real, synth)
    if k < 1:
        raise ValueError("k must be >= 1")
    if real.n_rows < k + 1:
        raise DataError(f"need at least k + 1 = {k + 1} real rows, got {real.n_rows}")
    if synth.n_rows < k + 1:
        raise DataError(f"need at least k + 1 = {k + 1} synthetic rows, got {synth.n_rows}")
    er, es = embed(real, real), embed(synth, real)
    rad_r = kth_neighbor_distance(er, k)
    rad_s = kth_neighbor_distance(es, k)
    d = cdist(es, er)
    near_r = np.argmin(d, axis=1)
    precision = np.mean(d[np.arange(len(es)), near_r] <= rad_r[near_r])
    near_s = np.argmin(d, axis=0)
    recall = np.mean(d[near_s, np.arange(len(er))] <= rad_s[near_s])
    return float(precision), float(recall)


@dataclass
class FidelityReport:
    shape: float
    shape_per_column: dict[str, float]
    corr: float
    feature_target: dict[str, float]
    feature_target_mean: float
    alpha_precision: float
    beta_recall: float
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def fidelity_report(real: Table, synth: Table, k: int = 5) -> FidelityReport:
    per_col, shape = shape_score(real, synth)
    corr = corr_similarity(real, synth)
    ft, ft_mean = feature_target_score(real, synth)
    notes = []
    if corr.degenerate_pairs:
        notes.append(f"{corr.degenerate_pairs} column pairs had an undefined coefficient")
    try:
        alpha, beta = precision_recall(real, synth, k)
    except DataError as exc:
        alpha = beta = float("nan")
        notes.append(str(exc))
    return FidelityReport(shape, per_col, corr.mean, ft, ft_mean, alpha, beta, notes)


# -- ranking metrics -----------------------------------------------------------


def rank_metrics(scores, labels) -> tuple[float, float]:
    """AUROC (Mann-Whitney, ties count 1/2) and average precision.

    Average precision sums ``(R_i - R_{i-1}) * P_i`` over distinct score
    thresholds taken from high to low.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("rank metrics need both classes")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    auroc = u / (n_pos * n_neg)

    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last_of_tie = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last_of_tie]
    fp = (last_of_tie + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return float(auroc), ap
