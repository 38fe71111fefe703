"""Downstream classifiers and the train-on-synthetic / test-on-real utility check."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit, logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.tree import DecisionTreeClassifier
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from tabpref.exceptions import DataError
from tabpref.metrics import rank_metrics
from tabpref.tabular import Table


class TableFeaturizer(TransformerMixin, BaseEstimator):
    """Turn a :class:`Table` into a feature matrix and a 0/1 label vector.

    ``encoding="onehot"`` z-scores numerics and one-hot encodes categoricals;
    ``encoding="codes"`` keeps raw numerics and integer category codes.
    Missing numerics are imputed with the training mean, missing categories
    with the most frequent one.
    """

    def __init__(self, encoding: str = "onehot"):
        self.encoding = encoding

    def fit(self, X: Table, y=None):
        schema = X.schema
        self.schema_ = schema
        self.feature_columns_ = [c for c in schema.columns if c.name != schema.target]
        self.fill_, self.mean_, self.std_ = {}, {}, {}
        for col in self.feature_columns_:
            v = X.values(col.name)
            v = v[~np.isnan(v)]
            if col.is_categorical:
                counts = np.bincount(v.astype(np.int64), minlength=col.n_categories)
                self.fill_[col.name] = float(np.argmax(counts))
            else:
                mu = float(v.mean()) if v.size else 0.0
                sd = float(v.std()) if v.size else 1.0
                self.fill_[col.name] = mu
                self.mean_[col.name], self.std_[col.name] = mu, (sd if sd > 0 else 1.0)
        return self

    def categorical_mask(self) -> np.ndarray:
        check_is_fitted(self, "feature_columns_")
        if self.encoding == "codes":
            return np.array([c.is_categorical for c in self.feature_columns_])
        return np.concatenate(
            [np.ones(c.n_categories, bool) if c.is_categorical else [False] for c in self.feature_columns_]
        )

    def transform(self, X: Table) -> np.ndarray:
        check_is_fitted(self, "feature_columns_")
        if X.schema != self.schema_:
            raise DataError("table schema differs from the one seen in fit")
        parts = []
        for col in self.feature_columns_:
            v = np.where(np.isnan(X.values(col.name)), self.fill_[col.name], X.values(col.name))
            if col.is_categorical and self.encoding == "onehot":
                onehot = np.zeros((len(v), col.n_categories))
                onehot[np.arange(len(v)), v.astype(np.int64)] = 1.0
                parts.append(onehot)
            elif col.is_categorical:
                parts.append(v[:, None])
            elif self.encoding == "onehot":
                parts.append(((v - self.mean_[col.name]) / self.std_[col.name])[:, None])
            else:
                parts.append(v[:, None])
        return np.hstack(parts) if parts else np.zeros((X.n_rows, 0))

    def category_counts(self) -> list[int]:
        check_is_fitted(self, "feature_columns_")
        return [c.n_categories for c in self.feature_columns_ if c.is_categorical]

    def labels(self, X: Table) -> np.ndarray:
        y = X.values(X.schema.target)
        if np.isnan(y).any():
            raise DataError("target has missing values")
        return y.astype(np.int64)


class GDLogisticRegression(ClassifierMixin, BaseEstimator):
    """Binary logistic regression fitted by full-batch gradient descent on the mean log-loss."""

    def __init__(self, n_iter: int = 500, learning_rate: float = 0.1):
        self.n_iter = n_iter
        self.learning_rate = learning_rate

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        t = (y == self.classes_[-1]).astype(np.float64)
        w = np.zeros(X.shape[1])
        b = 0.0
        for _ in range(self.n_iter):
            r = expit(X @ w + b) - t
            w -= self.learning_rate * (X.T @ r) / len(t)
            b -= self.learning_rate * r.mean()
        self.coef_, self.intercept_ = w, b
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(np.int64)]


class MixedNaiveBayes(ClassifierMixin, BaseEstimator):
    """Naive Bayes with Gaussian numeric and Laplace-smoothed categorical likelihoods.

    ``categorical_mask`` marks columns that hold integer category codes and
    ``n_categories`` gives their level counts (inferred from the data if omitted).
    """

    def __init__(self, categorical_mask=None, n_categories=None, alpha: float = 1.0, var_smoothing: float = 1e-9):
        self.categorical_mask = categorical_mask
        self.n_categories = n_categories
        self.alpha = alpha
        self.var_smoothing = var_smoothing

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        cat = np.zeros(X.shape[1], bool) if self.categorical_mask is None else np.asarray(self.categorical_mask)
        self.cat_ = cat
        self.classes_ = np.unique(y)
        self.class_log_prior_ = np.log([np.mean(y == c) for c in self.classes_])
        num = X[:, ~cat]
        eps = self.var_smoothing * (num.var(axis=0).max() if num.size else 1.0)
        self.theta_ = np.array([num[y == c].mean(axis=0) for c in self.classes_])
        self.var_ = np.array([num[y == c].var(axis=0) for c in self.classes_]) + max(eps, 1e-12)
        if self.n_categories is None:
            self.n_levels_ = [int(X[:, j].max()) + 1 for j in np.flatnonzero(cat)]
        else:
            self.n_levels_ = [int(n) for n in self.n_categories]
        self.cat_log_prob_ = []
        for j, n_lv in zip(np.flatnonzero(cat), self.n_levels_):
            rows = []
            for c in self.classes_:
                counts = np.bincount(X[y == c, j].astype(np.int64), minlength=n_lv) + self.alpha
                rows.append(np.log(counts / counts.sum()))
            self.cat_log_prob_.append(np.array(rows))
        return self

    def _joint_log_likelihood(self, X):
        check_is_fitted(self, "classes_")
        X = check_array(X)
        num = X[:, ~self.cat_]
        jll = np.tile(self.class_log_prior_, (len(X), 1))
        for k in range(len(self.classes_)):
            jll[:, k] += -0.5 * np.sum(
                np.log(2 * np.pi * self.var_[k]) + (num - self.theta_[k]) ** 2 / self.var_[k], axis=1
            )
        for table, j, n_lv in zip(self.cat_log_prob_, np.flatnonzero(self.cat_), self.n_levels_):
            codes = X[:, j].astype(np.int64)
            if np.any((codes < 0) | (codes >= n_lv)):
                raise DataError(f"feature {j}: category code outside the {n_lv} known levels")
            jll += table[:, codes].T
        return jll

    def predict_proba(self, X):
        jll = self._joint_log_likelihood(X)
        return np.exp(jll - logsumexp(jll, axis=1, keepdims=True))

    def predict(self, X):
        return self.classes_[np.argmax(self._joint_log_likelihood(X), axis=1)]


def default_classifiers(seed: int = 0) -> dict:
    """Classifier name -> (featurizer encoding, estimator factory)."""
    return {
        "logistic_regression": ("onehot", lambda feat: GDLogisticRegression(500, 0.1)),
        "naive_bayes": ("codes", lambda feat: MixedNaiveBayes(feat.categorical_mask(), feat.category_counts())),
        "decision_tree": ("onehot", lambda feat: DecisionTreeClassifier(max_depth=5, random_state=seed)),
    }


@dataclass
class UtilityReport:
    metric: str
    per_classifier: dict[str, dict[str, float]]
    mean: float
    warnings: list[str]

    @property
    def classifiers(self) -> list[str]:
        return list(self.per_classifier)

    def to_dict(self) -> dict:
        return asdict(self)


def downstream_utility(synth_train: Table, real_test: Table, metric: str = "auroc", seed: int = 0) -> UtilityReport:
    """Fit each built-in classifier on synthetic rows and score the real test set.

    A single-class synthetic table yields constant scores (AUROC 0.5) and a
    warning instead of an error.
    """
    metric = metric.lower().replace("-", "_")
    if metric not in ("auroc", "pr_auc"):
        raise ValueError(f"metric must be 'auroc' or 'pr_auc', got {metric!r}")
    tgt = real_test.schema.column(real_test.schema.target)
    if not tgt.is_categorical or tgt.n_categories != 2:
        raise DataError("downstream utility needs a binary categorical target")
    y_test = TableFeaturizer().labels(real_test)
    if len(np.unique(y_test)) < 2:
        raise DataError("real test set must contain both classes")
    train = synth_train.dropna() if synth_train.n_rows else synth_train
    y_train = TableFeaturizer().labels(train) if train.n_rows else np.zeros(0, np.int64)
    notes, results = [], {}
    for name, (encoding, factory) in default_classifiers(seed).items():
        if len(np.unique(y_train)) < 2:
            msg = f"{name}: synthetic training data has a single class; constant scores used"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
            scores = np.zeros(len(y_test))
        else:
            feat = TableFeaturizer(encoding).fit(train)
            clf = factory(feat).fit(feat.transform(train), y_train)
            scores = clf.predict_proba(feat.transform(real_test))[:, list(clf.classes_).index(1)]
        auroc, ap = rank_metrics(scores, y_test)
        results[name] = {"auroc": auroc, "pr_auc": ap}
    mean = float(np.mean([r[metric] for r in results.values()]))
    return UtilityReport(metric, results, mean, notes)
