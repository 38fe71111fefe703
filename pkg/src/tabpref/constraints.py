"""Single-premise categorical implication rules: parsing, auditing and violation injection."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from tabpref.exceptions import ConstraintError
from tabpref.tabular import Schema, Table

DEFAULT_AUDIT_ROWS = 10_000


@dataclass(frozen=True)
class Rule:
    """``premise_col = premise_value  =>  consequent_col (= | !=) consequent_value``."""

    id: str
    premise_col: str
    premise_value: str
    consequent_col: str
    consequent_value: str
    op: str = "eq"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "if": {"col": self.premise_col, "value": self.premise_value},
            "then": {"col": self.consequent_col, "value": self.consequent_value, "op": self.op},
        }

    def __str__(self) -> str:
        sym = "=" if self.op == "eq" else "!="
        return f"{self.id}: {self.premise_col} = {self.premise_value} => {self.consequent_col} {sym} {self.consequent_value}"


@dataclass(frozen=True)
class _Coded:
    """A rule resolved to column indices and category codes for one schema."""

    rule: Rule
    p_col: int
    p_code: int
    c_col: int
    c_code: int
    n_c: int
    n_p: int

    def premise(self, data: np.ndarray) -> np.ndarray:
        return data[..., self.p_col] == self.p_code

    def consequent(self, data: np.ndarray) -> np.ndarray:
        hit = data[..., self.c_col] == self.c_code
        return hit if self.rule.op == "eq" else ~hit

    def violated(self, data: np.ndarray) -> np.ndarray:
        return self.premise(data) & ~self.consequent(data)

    def violating_edits(self, row) -> list[tuple[int, list[int]]]:
        """Single-cell edits that turn a rule-satisfying ``row`` into a violation."""
        row = np.asarray(row)
        p_true = row[self.p_col] == self.p_code
        c_true = bool(self.consequent(row))
        edits = []
        if not p_true and not c_true:
            edits.append((self.p_col, [self.p_code]))
        if p_true:
            if self.rule.op == "eq":
                bad = [k for k in range(self.n_c) if k != self.c_code]
            else:
                bad = [self.c_code]
            bad = [k for k in bad if k != row[self.c_col]]
            if bad:
                edits.append((self.c_col, bad))
        return edits


def _code(schema: Schema, col: str, value: str, rule_id: str) -> tuple[int, int, int]:
    try:
        column = schema.column(col)
        j = schema.index(col)
    except Exception:
        raise ConstraintError(f"rule {rule_id}: unknown column {col!r}") from None
    if not column.is_categorical:
        raise ConstraintError(f"rule {rule_id}: column {col!r} is not categorical")
    if value not in column.categories:
        raise ConstraintError(f"rule {rule_id}: {value!r} is not a category of {col!r}")
    return j, column.categories.index(value), column.n_categories


def resolve(rule: Rule, schema: Schema) -> _Coded:
    if rule.premise_col == rule.consequent_col:
        raise ConstraintError(f"rule {rule.id}: premise and consequent use the same column")
    if rule.op not in ("eq", "neq"):
        raise ConstraintError(f"rule {rule.id}: op must be 'eq' or 'neq', got {rule.op!r}")
    pj, pk, n_p = _code(schema, rule.premise_col, rule.premise_value, rule.id)
    cj, ck, n_c = _code(schema, rule.consequent_col, rule.consequent_value, rule.id)
    return _Coded(rule, pj, pk, cj, ck, n_c, n_p)


def parse_rules(doc, schema: Schema) -> list[Rule]:
    """Parse a JSON array (text or already-decoded list) of rules and validate them against ``schema``."""
    items = json.loads(doc) if isinstance(doc, (str, bytes)) else doc
    if not isinstance(items, list):
        raise ConstraintError("rules document must be a JSON array")
    rules, seen = [], set()
    for i, item in enumerate(items):
        try:
            rid = str(item["id"])
            rule = Rule(
                rid,
                item["if"]["col"],
                str(item["if"]["value"]),
                item["then"]["col"],
                str(item["then"]["value"]),
                item["then"].get("op", "eq"),
            )
        except (KeyError, TypeError):
            raise ConstraintError(f"rule #{i} is malformed") from None
        if rid in seen:
            raise ConstraintError(f"duplicate rule id {rid!r}")
        seen.add(rid)
        resolve(rule, schema)
        rules.append(rule)
    return rules


def rules_to_json(rules: list[Rule]) -> str:
    return json.dumps([r.to_dict() for r in rules], indent=2)


def violation_counts(table: Table, rules: list[Rule]) -> dict[str, int]:
    return {r.id: int(resolve(r, table.schema).violated(table.data).sum()) for r in rules}


def violation_rate(table: Table, rules: list[Rule]) -> dict[str, float]:
    """Per rule: rows where the premise holds and the consequent fails, over all rows."""
    n = table.n_rows
    return {
        rid: float(Fraction(count, n)) if n else 0.0
        for rid, count in violation_counts(table, rules).items()
    }


def inject_violation(row, rule: Rule, schema: Schema, seed=None) -> np.ndarray:
    """Change one rule variable of a satisfying ``row`` so that it violates ``rule``.

    The variable is drawn uniformly among those whose single-cell change can
    produce a violation, and its new category uniformly among the violating ones.
    """
    coded = resolve(rule, schema)
    row = np.array(row, dtype=np.float64)
    if coded.violated(row):
        raise ConstraintError(f"rule {rule.id}: row already violates the rule")
    edits = coded.violating_edits(row)
    if not edits:
        raise ConstraintError(f"rule {rule.id}: no single-cell change of this row violates the rule")
    rng = np.random.default_rng(seed)
    col, options = edits[rng.integers(len(edits))]
    row[col] = options[rng.integers(len(options))]
    return row
