"""Typed tables, CSV ingestion and the train/test splitting regimes.

A :class:`Table` stores its cells in one ``float64`` matrix. Numeric cells hold
their value, categorical cells hold the index into the column's category list,
and missing cells are ``NaN``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from tabpref.exceptions import DataError, SchemaError

MAX_UNIQUE_COUNT = 20
MAX_UNIQUE_RATIO = 0.05


@dataclass(frozen=True)
class Column:
    """One column of a schema.

    ``categories`` is ``None`` for numeric columns.
    """

    name: str
    categories: tuple[str, ...] | None = None
    is_integer: bool = False

    @property
    def is_categorical(self) -> bool:
        return self.categories is not None

    @property
    def n_categories(self) -> int:
        return 0 if self.categories is None else len(self.categories)

    def to_dict(self) -> dict:
        if self.is_categorical:
            return {"name": self.name, "kind": "categorical", "categories": list(self.categories)}
        return {"name": self.name, "kind": "numeric", "is_integer": self.is_integer}

    @classmethod
    def from_dict(cls, d: dict) -> "Column":
        kind = d.get("kind")
        if kind == "categorical":
            return cls(d["name"], tuple(str(c) for c in d["categories"]))
        if kind == "numeric":
            return cls(d["name"], None, bool(d.get("is_integer", False)))
        raise SchemaError(f"column {d.get('name')!r}: unknown kind {kind!r}")


def numeric(name: str, is_integer: bool = False) -> Column:
    return Column(name, None, is_integer)


def categorical(name: str, categories: Iterable[str]) -> Column:
    return Column(name, tuple(categories))


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...]
    target: str

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column names in {names}")
        if self.target not in names:
            raise SchemaError(f"target {self.target!r} is not a column")
        for c in self.columns:
            if c.is_categorical:
                if len(c.categories) < 2:
                    raise SchemaError(f"categorical column {c.name!r} needs >= 2 categories")
                if len(set(c.categories)) != len(c.categories):
                    raise SchemaError(f"categorical column {c.name!r} has duplicate categories")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    def index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise SchemaError(f"unknown column {name!r}")

    def column(self, name: str) -> Column:
        return self.columns[self.index(name)]

    @property
    def target_index(self) -> int:
        return self.index(self.target)

    def drop(self, name: str) -> "Schema":
        if name == self.target:
            raise SchemaError("cannot drop the target column")
        return Schema(tuple(c for c in self.columns if c.name != name), self.target)

    def to_dict(self) -> dict:
        return {"columns": [c.to_dict() for c in self.columns], "target": self.target}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(tuple(Column.from_dict(c) for c in d["columns"]), d["target"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Schema":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Table:
    """Rows of typed cells under a :class:`Schema`."""

    schema: Schema
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2 and data.size == 0:
            data = data.reshape(0, self.schema.n_columns)
        if data.ndim != 2 or data.shape[1] != self.schema.n_columns:
            raise DataError(
                f"data shape {data.shape} does not match {self.schema.n_columns} columns"
            )
        for j, col in enumerate(self.schema.columns):
            v = data[:, j]
            v = v[~np.isnan(v)]
            if col.is_categorical:
                if np.any((v < 0) | (v >= col.n_categories) | (v != np.round(v))):
                    raise DataError(f"column {col.name!r}: invalid category index")
            else:
                if np.any(np.isinf(v)):
                    raise DataError(f"column {col.name!r}: infinite value")
                if col.is_integer and np.any(v != np.round(v)):
                    raise DataError(f"integer column {col.name!r} holds non-whole values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    def values(self, name: str) -> np.ndarray:
        return self.data[:, self.schema.index(name)]

    def labels(self, name: str) -> list[str | None]:
        col = self.schema.column(name)
        if not col.is_categorical:
            raise SchemaError(f"column {name!r} is not categorical")
        return [None if math.isnan(v) else col.categories[int(v)] for v in self.values(name)]

    def take(self, idx) -> "Table":
        return Table(self.schema, self.data[np.asarray(idx)])

    def complete_mask(self) -> np.ndarray:
        return ~np.isnan(self.data).any(axis=1)

    def dropna(self) -> "Table":
        return self.take(self.complete_mask())

    def drop_column(self, name: str) -> "Table":
        j = self.schema.index(name)
        return Table(self.schema.drop(name), np.delete(self.data, j, axis=1))

    def concat(self, other: "Table") -> "Table":
        if other.schema != self.schema:
            raise SchemaError("cannot concatenate tables with different schemas")
        return Table(self.schema, np.vstack([self.data, other.data]))

    def row(self, i: int) -> tuple:
        """Return row ``i`` as decoded python values (``None`` for missing)."""
        out = []
        for col, v in zip(self.schema.columns, self.data[i]):
            if math.isnan(v):
                out.append(None)
            elif col.is_categorical:
                out.append(col.categories[int(v)])
            elif col.is_integer:
                out.append(int(v))
            else:
                out.append(float(v))
        return tuple(out)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.schema.names)
        for i in range(self.n_rows):
            w.writerow(["" if v is None else _fmt(v) for v in self.row(i)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_records(cls, schema: Schema, records: Sequence[Sequence]) -> "Table":
        """Build a table from rows of python values (strings for categories)."""
        data = np.full((len(records), schema.n_columns), np.nan)
        lookups = [
            {c: i for i, c in enumerate(col.categories)} if col.is_categorical else None
            for col in schema.columns
        ]
        for i, rec in enumerate(records):
            if len(rec) != schema.n_columns:
                raise DataError(f"record {i} has {len(rec)} cells, expected {schema.n_columns}")
            for j, (v, lk) in enumerate(zip(rec, lookups)):
                if v is None:
                    continue
                if lk is None:
                    data[i, j] = float(v)
                else:
                    try:
                        data[i, j] = lk[str(v)]
                    except KeyError:
                        raise DataError(
                            f"record {i}: unknown category {v!r} in column {schema.columns[j].name!r}"
                        ) from None
        return cls(schema, data)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_float(s: str) -> float | None:
    try:
        x = float(s)
    except ValueError:
        return None
    return x if math.isfinite(x) else None


def read_grid(path: str | Path) -> tuple[list[str], list[list[str]]]:
    """Read a CSV file into its header and string rows, checking row widths."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {reader.line_num} has {len(row)} cells, expected {len(header)}"
                )
            rows.append(row)
    return header, rows


def infer_schema(
    header: Sequence[str], rows: Sequence[Sequence[str]], target: str
) -> tuple[Schema, list[str]]:
    """Infer column kinds from a string grid.

    A column is categorical when any non-empty value is non-numeric, or when
    its unique ratio is at most 0.05 or its unique count at most 20. Returns
    the schema and a list of warnings (single-valued columns).
    """
    if not rows:
        raise DataError("cannot infer a schema from zero data rows")
    if target not in header:
        raise SchemaError(f"target {target!r} not in header {list(header)}")
    n = len(rows)
    columns, notes = [], []
    for j, name in enumerate(header):
        raw = [r[j] for r in rows if r[j] != ""]
        uniq = sorted(set(raw))
        if len(uniq) <= 1:
            notes.append(f"column {name!r} has a single unique value")
        parsed = [_parse_float(s) for s in raw]
        all_numeric = all(p is not None for p in parsed)
        low_card = len(uniq) <= MAX_UNIQUE_COUNT or len(uniq) / n <= MAX_UNIQUE_RATIO
        if not all_numeric or low_card:
            cats = list(uniq)
            # a categorical column needs two levels; pad single-valued ones
            while len(cats) < 2:
                cats.append(f"__other{len(cats)}__")
            columns.append(Column(name, tuple(cats)))
        else:
            is_int = all(p == round(p) for p in parsed)
            columns.append(Column(name, None, is_int))
    return Schema(tuple(columns), target), notes


def load_csv(path: str | Path, schema: Schema | None = None, target: str | None = None) -> Table:
    """Load a CSV file. Empty fields and unparseable numerics become missing."""
    header, rows = read_grid(path)
    if schema is None:
        if target is None:
            raise SchemaError("either a schema or a target column is required")
        if not rows:
            raise DataError(f"{path}: cannot infer a schema from a header-only file")
        schema, notes = infer_schema(header, rows, target)
        for msg in notes:
            warnings.warn(msg, stacklevel=2)
    if list(header) != schema.names:
        raise SchemaError(f"{path}: header {header} does not match schema {schema.names}")
    data = np.full((len(rows), schema.n_columns), np.nan)
    for j, col in enumerate(schema.columns):
        if col.is_categorical:
            lk = {c: i for i, c in enumerate(col.categories)}
            for i, r in enumerate(rows):
                s = r[j]
                if s == "":
                    continue
                if s not in lk:
                    raise DataError(
                        f"{path}: unknown category {s!r} for column {col.name!r} on data row {i + 1}"
                    )
                data[i, j] = lk[s]
        else:
            for i, r in enumerate(rows):
                x = _parse_float(r[j])
                if x is not None:
                    data[i, j] = round(x) if col.is_integer else x
    return Table(schema, data)


# -- splitting ---------------------------------------------------------------


@dataclass(frozen=True)
class Holdout:
    ratio: float = 0.8
    seed: int = 0
    train_cap: int | None = None

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ValueError(f"ratio must lie in (0, 1), got {self.ratio}")


@dataclass(frozen=True)
class Imbalance:
    prevalence: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.prevalence < 1:
            raise ValueError(f"prevalence must lie in (0, 1), got {self.prevalence}")


@dataclass(frozen=True)
class Shift:
    split_column: str
    train_values: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "train_values", frozenset(self.train_values))
        if not self.train_values:
            raise ValueError("train_values must be nonempty")


def split_holdout(table: Table, spec: Holdout) -> tuple[Table, Table]:
    n = table.n_rows
    if n < 2:
        raise DataError("holdout split needs at least 2 rows")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_train = min(max(int(round(spec.ratio * n)), 1), n - 1)
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    if spec.train_cap is not None:
        if spec.train_cap > n_train:
            raise DataError(
                f"train_cap {spec.train_cap} exceeds the {n_train} available training rows"
            )
        train_idx = train_idx[: spec.train_cap]
    return table.take(train_idx), table.take(test_idx)


def _binary_target(table: Table) -> tuple[int, np.ndarray]:
    col = table.schema.column(table.schema.target)
    if not col.is_categorical or col.n_categories != 2:
        raise DataError("target must be a binary categorical column")
    return table.schema.target_index, table.data[:, table.schema.target_index]


def downsample_minority(table: Table, spec: Imbalance) -> Table:
    """Drop minority-class rows at random until the requested prevalence.

    The kept minority count is ``round_half_up(p / (1 - p) * majority)``,
    at least 1. Majority rows and relative row order are untouched.
    """
    _, y = _binary_target(table)
    counts = [int(np.sum(y == k)) for k in (0, 1)]
    if min(counts) == 0:
        raise DataError("both target classes must be present")
    minority = 0 if counts[0] < counts[1] else 1
    n_maj = counts[1 - minority]
    want = max(1, math.floor(spec.prevalence / (1 - spec.prevalence) * n_maj + 0.5))
    minority_idx = np.flatnonzero(y == minority)
    if want >= len(minority_idx):
        return table
    rng = np.random.default_rng(spec.seed)
    keep_minor = rng.choice(minority_idx, size=want, replace=False)
    keep = np.sort(np.concatenate([np.flatnonzero(y != minority), keep_minor]))
    return table.take(keep)


def split_shift(table: Table, spec: Shift) -> tuple[Table, Table]:
    col = table.schema.column(spec.split_column)
    if not col.is_categorical:
        raise SchemaError(f"split column {spec.split_column!r} must be categorical")
    unknown = spec.train_values - set(col.categories)
    if unknown:
        raise SchemaError(f"train_values {sorted(unknown)} not in {spec.split_column!r}")
    if spec.train_values == set(col.categories):
        raise DataError("train_values covers every category: the test side would be empty")
    codes = {i for i, c in enumerate(col.categories) if c in spec.train_values}
    v = table.values(spec.split_column)
    in_train = np.isin(v, list(codes))
    train = table.take(in_train).drop_column(spec.split_column)
    test = table.take(~in_train).drop_column(spec.split_column)
    if train.n_rows == 0:
        raise DataError("shift split produced an empty train side")
    if test.n_rows == 0:
        raise DataError("shift split produced an empty test side")
    return train, test
