"""Synthetic toy tables with known structure, used by tests, demos and the CLI."""

from __future__ import annotations

import numpy as np

from tabpref.tabular import Schema, Table, categorical, numeric


SHIFT = np.array([-0.6, 0.0, 0.6])


def planted_rule(n: int = 500, noise: float = 0.1, seed: int = 0) -> Table:
    """Binary target ``y = pos iff x1 + shift[x2] > 0``, labels flipped with probability ``noise``.

    ``x2`` is categorical with shifts -0.6, 0, 0.6 for levels a, b, c. ``x3``
    tracks ``x2`` and ``x4`` tracks ``x1`` (correlated but not used by the
    rule); ``age`` (integer) is an independent distractor.
    """
    rng = np.random.default_rng(seed)
    schema = Schema(
        (
            numeric("x1"),
            categorical("x2", ["a", "b", "c"]),
            categorical("x3", ["u", "v"]),
            numeric("x4"),
            numeric("age", is_integer=True),
            categorical("y", ["neg", "pos"]),
        ),
        target="y",
    )
    x1 = rng.normal(size=n)
    x2 = rng.integers(0, 3, size=n)
    x3 = np.where(rng.random(n) < 0.85, (x2 > 0).astype(np.int64), rng.integers(0, 2, size=n))
    x4 = 0.9 * x1 + 0.45 * rng.normal(size=n)
    age = rng.integers(18, 71, size=n)
    y = (x1 + SHIFT[x2] > 0).astype(np.int64)
    y = np.where(rng.random(n) < noise, 1 - y, y)
    return Table(schema, np.column_stack([x1, x2, x3, x4, age, y]).astype(np.float64))


def planted_label(table: Table) -> np.ndarray:
    """Noise-free label of the planted rule for each row (1 = pos)."""
    x2 = table.values("x2").astype(np.int64)
    return (table.values("x1") + SHIFT[x2] > 0).astype(np.int64)


RELATIONSHIP = ("Husband", "Not-in-family", "Own-child", "Spouse", "Unmarried", "Wife")
MARITAL = ("Divorced", "Married", "Never-married", "Widow")
SEX = ("Female", "Male")

ADULT_RULES = [
    {"id": "I1", "if": {"col": "relationship", "value": "Husband"},
     "then": {"col": "sex", "value": "Male", "op": "eq"}},
    {"id": "I2", "if": {"col": "marital-status", "value": "Widow"},
     "then": {"col": "sex", "value": "Female", "op": "eq"}},
    {"id": "I3", "if": {"col": "marital-status", "value": "Never-married"},
     "then": {"col": "relationship", "value": "Spouse", "op": "neq"}},
]


def adult_like(n: int = 500, seed: int = 0) -> Table:
    """Small census-style table whose rows satisfy rules I1-I3 by construction."""
    rng = np.random.default_rng(seed)
    schema = Schema(
        (
            numeric("age", is_integer=True),
            categorical("marital-status", MARITAL),
            categorical("relationship", RELATIONSHIP),
            categorical("sex", SEX),
            numeric("hours-per-week", is_integer=True),
            categorical("income", ["<=50K", ">50K"]),
        ),
        target="income",
    )
    records = []
    for _ in range(n):
        marital = rng.choice(MARITAL, p=[0.15, 0.45, 0.32, 0.08])
        if marital == "Married":
            rel = rng.choice(["Husband", "Wife", "Spouse"], p=[0.6, 0.3, 0.1])
        elif marital == "Never-married":
            rel = rng.choice(["Own-child", "Not-in-family", "Unmarried"], p=[0.5, 0.4, 0.1])
        else:
            rel = rng.choice(["Not-in-family", "Unmarried", "Own-child"], p=[0.5, 0.4, 0.1])
        if rel == "Husband":
            sex = "Male"
        elif rel == "Wife" or marital == "Widow":
            sex = "Female"
        else:
            sex = rng.choice(SEX)
        age = int(np.clip(rng.normal(24 if marital == "Never-married" else 45, 9), 17, 90))
        hours = int(np.clip(rng.normal(40 if sex == "Male" else 35, 8), 5, 99))
        score = 0.06 * (age - 40) + 0.08 * (hours - 38) + (1.2 if marital == "Married" else -0.8)
        income = ">50K" if rng.random() < 1 / (1 + np.exp(-score)) else "<=50K"
        records.append((age, marital, rel, sex, hours, income))
    return Table.from_records(schema, records)
