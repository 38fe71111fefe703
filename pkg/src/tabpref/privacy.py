"""Black-box membership-inference audits driven by distances to the synthetic rows.

All rows are mapped into one numeric space fitted on the synthetic table:
z-scored numerics and one-hot categoricals scaled by ``1/sqrt(2)``, compared
with Euclidean distance. Higher attack scores mean "more member-like".
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from tabpref.exceptions import DataError
from tabpref.metrics import embed, rank_metrics
from tabpref.tabular import Table

DCR, DCR_DIFF, DENSITY = "dcr", "dcr_diff", "density"
ATTACKS = (DCR, DCR_DIFF, DENSITY)
DENSITY_K = 5
DEFAULT_FPR = 0.01


@dataclass(frozen=True)
class AttackInput:
    synth: Table
    members: Table
    nonmembers: Table
    reference: Table | None = None

    def __post_init__(self):
        tables = [self.synth, self.members, self.nonmembers]
        if self.reference is not None:
            tables.append(self.reference)
        if any(t.schema != self.synth.schema for t in tables):
            raise DataError("all attack tables must share one schema")
        if self.members.n_rows == 0 or self.nonmembers.n_rows == 0:
            raise DataError("members and nonmembers must be nonempty")
        if self.synth.n_rows == 0:
            raise DataError("synthetic table is empty")


def _min_dist(x: np.ndarray, cloud: np.ndarray) -> np.ndarray:
    return cdist(x, cloud).min(axis=1)


def _kth_dist(x: np.ndarray, cloud: np.ndarray, k: int) -> np.ndarray:
    d = cdist(x, cloud)
    k = min(k, cloud.shape[0])
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def attack_scores(data: AttackInput, kind: str, k: int = DENSITY_K) -> tuple[np.ndarray, np.ndarray]:
    """Member and nonmember scores for one attack.

    ``dcr`` is minus the distance to the closest synthetic row; ``dcr_diff``
    is the distance to the closest reference row minus that to the closest
    synthetic row; ``density`` is ``-log`` of the distance to the ``k``-th
    closest synthetic row (a k-NN density estimate up to monotone terms).
    """
    if kind not in ATTACKS:
        raise ValueError(f"unknown attack {kind!r}; expected one of {ATTACKS}")
    if kind == DCR_DIFF and data.reference is None:
        raise DataError("dcr_diff needs a reference table")
    s = embed(data.synth, data.synth)
    out = []
    for table in (data.members, data.nonmembers):
        x = embed(table, data.synth)
        if kind == DCR:
            out.append(-_min_dist(x, s))
        elif kind == DCR_DIFF:
            out.append(_min_dist(x, embed(data.reference, data.synth)) - _min_dist(x, s))
        else:
            with np.errstate(divide="ignore"):
                out.append(-np.log(_kth_dist(x, s, k)))
    return out[0], out[1]


def attack_metrics(member_scores, nonmember_scores, fpr: float = DEFAULT_FPR) -> tuple[float, float]:
    """``(auc, tpr_at_fpr)``.

    The TPR is read off the step ROC at the loosest threshold whose false
    positive rate is still at most ``fpr``; rows are flagged when their
    score is at least the threshold.
    """
    m = np.asarray(member_scores, dtype=np.float64)
    n = np.asarray(nonmember_scores, dtype=np.float64)
    if m.size == 0 or n.size == 0:
        raise DataError("both score lists must be nonempty")
    if not 0.0 < fpr < 1.0:
        raise ValueError("fpr must lie in (0, 1)")
    auc, _ = rank_metrics(np.r_[m, n], np.r_[np.ones(m.size), np.zeros(n.size)])
    thresholds = np.unique(np.r_[m, n])
    ms, ns = np.sort(m), np.sort(n)
    tp = m.size - np.searchsorted(ms, thresholds, side="left")
    fp = n.size - np.searchsorted(ns, thresholds, side="left")
    ok = fp <= np.floor(fpr * n.size + 1e-12)
    tpr = float(tp[ok].max() / m.size) if ok.any() else 0.0
    return float(auc), tpr


def authenticity(synth: Table, members: Table) -> float:
    """Share of synthetic rows farther from their closest member than that
    member is from its own closest other member."""
    s = embed(synth, synth)
    r = embed(members, synth)
    if members.n_rows < 2:
        raise DataError("authenticity needs at least two member rows")
    d_sr = cdist(s, r)
    nearest = np.argmin(d_sr, axis=1)
    d_rr = cdist(r, r)
    np.fill_diagonal(d_rr, np.inf)
    own = d_rr.min(axis=1)
    return float(np.mean(d_sr[np.arange(len(s)), nearest] > own[nearest]))


@dataclass
class PrivacyReport:
    attacks: dict[str, dict[str, float]]
    leakage: float
    authenticity: float
    notes: list[str] = field(default_factory=list)
    conventions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def audit(data: AttackInput, fpr: float = DEFAULT_FPR, k: int = DENSITY_K) -> PrivacyReport:
    """Run every attack the inputs allow; leakage is the largest attack AUC."""
    results, notes = {}, []
    for kind in ATTACKS:
        if kind == DCR_DIFF and data.reference is None:
            notes.append("dcr_diff skipped: no reference table")
            continue
        auc, tpr = attack_metrics(*attack_scores(data, kind, k), fpr=fpr)
        results[kind] = {"auc": auc, "tpr_at_fpr": tpr}
    return PrivacyReport(
        attacks=results,
        leakage=max(r["auc"] for r in results.values()),
        authenticity=authenticity(data.synth, data.members),
        notes=notes,
        conventions={
            "distance": "euclidean; numerics z-scored on synth; one-hot categoricals scaled by 1/sqrt(2)",
            "density_k": k,
            "fpr": fpr,
            "score_direction": "higher = more member-like",
        },
    )
