"""Oracle-free chosen/rejected pairs built by perturbing one cell of a real row.

Every tuple keeps the row's other cells as the prompt, the original value of
the perturbed column as the chosen completion and the perturbed value as the
rejected one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from tabpref.constraints import Rule, resolve
from tabpref.encoder import BinSpec
from tabpref.exceptions import DataError
from tabpref.metrics import association
from tabpref.tabular import Table

TYPE1, TYPE2, CONSTRAINT = "type1", "type2", "constraint"
KINDS = (TYPE1, TYPE2, CONSTRAINT)


@dataclass(frozen=True)
class PreferenceTuple:
    prompt: tuple[tuple[int, int], ...]
    column: int
    chosen: int
    rejected: int
    kind: str

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected tokens must differ")
        if any(c == self.column for c, _ in self.prompt):
            raise ValueError("the perturbed column cannot be part of the prompt")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "prompt": [[int(c), int(t)] for c, t in self.prompt],
                "col": int(self.column),
                "chosen": int(self.chosen),
                "rejected": int(self.rejected),
                "kind": self.kind,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "PreferenceTuple":
        d = json.loads(line)
        return cls(tuple((c, t) for c, t in d["prompt"]), d["col"], d["chosen"], d["rejected"], d["kind"])


def prompt_of(row: np.ndarray, column: int) -> tuple[tuple[int, int], ...]:
    return tuple((int(c), int(t)) for c, t in enumerate(row) if c != column)


def write_jsonl(tuples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tuples:
            fh.write(t.to_json() + "\n")


def read_jsonl(path) -> list[PreferenceTuple]:
    with open(path, encoding="utf-8") as fh:
        return [PreferenceTuple.from_json(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class CorrelatedPair:
    col_a: str
    col_b: str
    strength: float


def correlated_pairs(table: Table, threshold: float = 0.3) -> list[CorrelatedPair]:
    """Non-target column pairs whose association is at least ``threshold``, strongest first."""
    names = [c.name for c in table.schema.columns if c.name != table.schema.target]
    pairs = []
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            s = association(table, a, b)
            if np.isfinite(s) and s >= threshold:
                pairs.append(CorrelatedPair(a, b, float(min(max(s, 0.0), 1.0))))
    pairs.sort(key=lambda p: (-p.strength, p.col_a, p.col_b))
    return pairs


@dataclass
class BuildStats:
    counts: dict[str, int] = field(default_factory=lambda: {k: 0 for k in KINDS})
    type2_fallbacks: int = 0
    constraint_fallbacks: int = 0


def _other(rng: np.random.Generator, vocab: int, current: int) -> int:
    k = int(rng.integers(vocab - 1))
    return k + (k >= current)


def build_preferences(
    rows: np.ndarray,
    table: Table,
    spec: BinSpec,
    p_type1: float = 0.7,
    pairs: list[CorrelatedPair] | None = None,
    rules: list[Rule] | None = None,
    seed: int = 0,
    constraint_fraction: float = 0.5,
    return_stats: bool = False,
):
    """One preference tuple per encoded row.

    With probability ``p_type1`` the target is perturbed, the rejected label
    drawn from the empirical target marginal of ``table`` restricted to labels
    other than the chosen one. Otherwise a correlated pair is drawn with
    probability proportional to its strength and one of its two columns is
    moved to a uniformly drawn other bin or category. When ``rules`` are given,
    a ``constraint_fraction`` share of those non-target draws instead moves a
    rule variable to a value that breaks the rule. Draws that cannot be
    served fall back (constraint to correlated pair, correlated pair to
    target) and are counted.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if not 0.0 <= p_type1 <= 1.0:
        raise ValueError("p_type1 must lie in [0, 1]")
    schema = spec.schema
    vocab = spec.vocab_sizes
    tgt = schema.target_index
    y = table.values(schema.target)
    marginal = np.bincount(y[~np.isnan(y)].astype(np.int64), minlength=vocab[tgt]).astype(np.float64)
    if (marginal > 0).sum() < 2 and (p_type1 > 0 or not pairs):
        raise DataError("target has fewer than two observed classes: no rejected label exists")
    pairs = list(pairs or [])
    strengths = np.array([p.strength for p in pairs], dtype=np.float64)
    pair_cols = [(schema.index(p.col_a), schema.index(p.col_b)) for p in pairs]
    coded_rules = [resolve(r, schema) for r in (rules or [])]
    rng = np.random.default_rng(seed)
    stats = BuildStats()
    out = []

    def type1(row) -> PreferenceTuple:
        chosen = int(row[tgt])
        w = marginal.copy()
        w[chosen] = 0.0
        if w.sum() == 0:
            raise DataError(f"no rejected label available for target value {chosen}")
        rejected = int(rng.choice(len(w), p=w / w.sum()))
        return PreferenceTuple(prompt_of(row, tgt), tgt, chosen, rejected, TYPE1)

    def type2(row) -> PreferenceTuple | None:
        if not pairs:
            return None
        a, b = pair_cols[int(rng.choice(len(pairs), p=strengths / strengths.sum()))]
        members = [a, b] if rng.random() < 0.5 else [b, a]
        for col in members:
            if vocab[col] >= 2:
                chosen = int(row[col])
                return PreferenceTuple(prompt_of(row, col), col, chosen, _other(rng, vocab[col], chosen), TYPE2)
        return None

    def constraint(row) -> PreferenceTuple | None:
        options = []
        for cr in coded_rules:
            if cr.violated(row):
                continue
            for col, bad in cr.violating_edits(row):
                options.append((col, bad))
        if not options:
            return None
        col, bad = options[int(rng.integers(len(options)))]
        rejected = int(bad[int(rng.integers(len(bad)))])
        return PreferenceTuple(prompt_of(row, col), col, int(row[col]), rejected, CONSTRAINT)

    for row in rows:
        if rng.random() < p_type1:
            t = type1(row)
        else:
            t = None
            if coded_rules and rng.random() < constraint_fraction:
                t = constraint(row)
                if t is None:
                    stats.constraint_fallbacks += 1
            if t is None:
                t = type2(row)
                if t is None:
                    stats.type2_fallbacks += 1
                    t = type1(row)
        stats.counts[t.kind] += 1
        out.append(t)
    return (out, stats) if return_stats else out


def oracle_variant(
    rows: np.ndarray,
    table: Table,
    spec: BinSpec,
    mode: str,
    predict: Callable[[Table], np.ndarray],
):
    """Classifier-based ablations.

    ``predict`` maps a table (the rows of ``table`` aligned with ``rows``) to
    target codes. ``"edit"`` returns type-1 tuples preferring the prediction
    over the recorded label wherever they differ; ``"screen"`` returns the
    boolean mask of rows whose label agrees with the prediction.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) != table.n_rows:
        raise DataError("rows and table must be aligned")
    tgt = spec.schema.target_index
    pred = np.asarray(predict(table)).astype(np.int64)
    agree = pred == rows[:, tgt]
    if mode == "screen":
        return agree
    if mode != "edit":
        raise ValueError(f"mode must be 'edit' or 'screen', got {mode!r}")
    return [
        PreferenceTuple(prompt_of(row, tgt), tgt, int(p), int(row[tgt]), TYPE1)
        for row, p, ok in zip(rows, pred, agree)
        if not ok
    ]
