"""Mapping between table rows and per-column token indices.

Numeric columns are discretised into right-closed quantile bins
``[min, e0], (e0, e1], ..., (e_last, max]``; categorical columns use their
category index as the token.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from tabpref.exceptions import DataError
from tabpref.tabular import Schema, Table

DEFAULT_BINS = 32


@dataclass(frozen=True)
class NumericBins:
    edges: np.ndarray
    lo: float
    hi: float
    is_integer: bool = False

    @property
    def vocab(self) -> int:
        return len(self.edges) + 1

    def bounds(self, token: int) -> tuple[float, float]:
        b = np.concatenate([[self.lo], self.edges, [self.hi]])
        return float(b[token]), float(b[token + 1])

    def to_dict(self) -> dict:
        return {
            "edges": [float(e) for e in self.edges],
            "lo": float(self.lo),
            "hi": float(self.hi),
            "is_integer": self.is_integer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NumericBins":
        return cls(np.asarray(d["edges"], dtype=np.float64), d["lo"], d["hi"], d["is_integer"])


@dataclass(frozen=True)
class BinSpec:
    """Per-column discretisation; ``bins[j]`` is ``None`` for categorical columns."""

    schema: Schema
    bins: tuple
    n_bins: int = DEFAULT_BINS

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        return tuple(
            c.n_categories if b is None else b.vocab for c, b in zip(self.schema.columns, self.bins)
        )

    def to_dict(self) -> dict:
        return {
            "n_bins": self.n_bins,
            "bins": [None if b is None else b.to_dict() for b in self.bins],
        }

    @classmethod
    def from_dict(cls, schema: Schema, d: dict) -> "BinSpec":
        bins = tuple(None if b is None else NumericBins.from_dict(b) for b in d["bins"])
        return cls(schema, bins, d["n_bins"])

    def __eq__(self, other):
        if not isinstance(other, BinSpec):
            return NotImplemented
        return self.schema == other.schema and self.to_dict() == other.to_dict()

    __hash__ = None


def _column_bins(values: np.ndarray, n_bins: int, is_integer: bool, name: str) -> NumericBins:
    v = np.sort(values[np.isfinite(values)])
    if v.size == 0:
        raise DataError(f"numeric column {name!r} has no finite values")
    lo, hi = float(v[0]), float(v[-1])
    q = np.quantile(v, np.arange(1, n_bins) / n_bins, method="linear")
    if is_integer:
        # edges at half-integers so that every bin holds at least one whole number
        q = np.floor(q) + 0.5
    edges = np.unique(q)
    edges = edges[edges < hi]
    if edges.size == 0:
        warnings.warn(f"column {name!r} is constant; encoded with a single bin", stacklevel=3)
    return NumericBins(edges, lo, hi, is_integer)


def fit_bins(table: Table, n_bins: int = DEFAULT_BINS) -> BinSpec:
    """Fit quantile bins (linear-interpolated quantiles ``j / n_bins``) per numeric column."""
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    bins = []
    for j, col in enumerate(table.schema.columns):
        if col.is_categorical:
            bins.append(None)
        else:
            bins.append(_column_bins(table.data[:, j], n_bins, col.is_integer, col.name))
    return BinSpec(table.schema, tuple(bins), n_bins)


def encode(data: np.ndarray, spec: BinSpec, return_clamped: bool = False):
    """Encode complete rows (``(n, n_columns)`` cell matrix) into tokens.

    Numeric values outside the fitted range fall into the boundary bins.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if np.isnan(data).any():
        raise DataError("cannot encode rows with missing cells")
    tokens = np.empty(data.shape, dtype=np.int64)
    clamped = 0
    for j, b in enumerate(spec.bins):
        if b is None:
            tokens[:, j] = data[:, j].astype(np.int64)
        else:
            x = data[:, j]
            clamped += int(np.sum((x < b.lo) | (x > b.hi)))
            tokens[:, j] = np.searchsorted(b.edges, x, side="left")
    if return_clamped:
        return tokens, clamped
    return tokens


def encode_row(row, spec: BinSpec) -> np.ndarray:
    return encode(np.asarray(row, dtype=np.float64)[None, :], spec)[0]


def decode(tokens: np.ndarray, spec: BinSpec, rng: np.random.Generator) -> np.ndarray:
    """Decode tokens to cell values, sampling uniformly inside each numeric bin.

    Float values are drawn from ``(lower, upper]`` so they re-encode to the same
    bin; integer columns draw a whole number uniformly from those inside the bin.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    out = np.empty(tokens.shape, dtype=np.float64)
    for j, b in enumerate(spec.bins):
        t = tokens[:, j]
        if b is None:
            out[:, j] = t
            continue
        bounds = np.concatenate([[b.lo], b.edges, [b.hi]])
        lower, upper = bounds[t], bounds[t + 1]
        u = rng.random(len(t))
        if b.is_integer:
            first = np.where(t == 0, np.ceil(lower), np.floor(lower) + 1)
            last = np.floor(upper)
            out[:, j] = first + np.floor(u * (last - first + 1))
        else:
            x = upper - (upper - lower) * u
            # keep interior-bin draws strictly above the lower edge
            low_hit = (t > 0) & (x <= lower)
            x[low_hit] = np.minimum(np.nextafter(lower[low_hit], np.inf), upper[low_hit])
            out[:, j] = x
    return out


def decode_row(enc, spec: BinSpec, seed=None) -> np.ndarray:
    return decode(np.asarray(enc)[None, :], spec, np.random.default_rng(seed))[0]


class QuantileEncoder(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` learns bins, ``transform`` tokenises, ``inverse_transform`` samples values.

    Parameters
    ----------
    n_bins : int
        Requested bins per numeric column; duplicate quantile edges collapse.
    random_state : int or None
        Seed for within-bin sampling in ``inverse_transform``.
    """

    def __init__(self, n_bins: int = DEFAULT_BINS, random_state=None):
        self.n_bins = n_bins
        self.random_state = random_state

    def fit(self, X: Table, y=None):
        self.bin_spec_ = fit_bins(X.dropna(), self.n_bins)
        self.vocab_sizes_ = self.bin_spec_.vocab_sizes
        return self

    def transform(self, X: Table) -> np.ndarray:
        check_is_fitted(self, "bin_spec_")
        return encode(X.data, self.bin_spec_)

    def inverse_transform(self, tokens) -> Table:
        check_is_fitted(self, "bin_spec_")
        rng = np.random.default_rng(self.random_state)
        return Table(self.bin_spec_.schema, decode(tokens, self.bin_spec_, rng))
