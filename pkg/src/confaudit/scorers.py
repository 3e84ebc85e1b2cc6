"""Nonconformity scorers.

Every scorer exposes ``scores(data)``, the nonconformity of each example
with its own target.  Classification scorers additionally expose
``labels`` and ``label_scores(data)`` (one column per candidate label);
regression scorers expose ``predict(data) -> (y_hat, sigma_hat)``.

Built-ins:

- :class:`KnnClassScorer` -- ratio of same-class to other-class k-NN
  distance sums.
- :class:`ResidualScorer` -- absolute residual of a k-NN mean regressor,
  optionally normalised by a local difficulty estimate.
- :class:`KnnDistanceScorer` -- label-free sum of k-NN distances, used for
  anomaly detection and drift monitoring.
- :class:`ExternalScoreTable` -- scores or predictions computed elsewhere
  and looked up by example id.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Any, Hashable

import numpy as np
from scipy.spatial import cKDTree

from .core import Dataset, LabeledExample, NonconformityScore, NotFittedError, ValidationError

_EPS = np.finfo(float).eps


def _example_row(example: LabeledExample | Any) -> np.ndarray:
    feats = example.features if isinstance(example, LabeledExample) else example
    return np.asarray(feats, dtype=float).reshape(1, -1)


def nearest_neighbors(
    tree: cKDTree, train: np.ndarray, queries: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """k nearest training rows per query, distance ties broken by row order.

    The tree answers the common case; rows whose k-th and (k+1)-th
    distances tie are recomputed by a stable brute-force sort so that the
    lowest training index wins.
    """
    n = train.shape[0]
    m = min(n, k + 1)
    dist, idx = tree.query(queries, k=m)
    dist = np.asarray(dist, dtype=float).reshape(len(queries), m)
    idx = np.asarray(idx).reshape(len(queries), m)
    if m > k:
        tied = np.flatnonzero(dist[:, k - 1] == dist[:, k])
        for r in tied:
            d = np.sqrt(((train - queries[r]) ** 2).sum(axis=1))
            order = np.argsort(d, kind="stable")[:k]
            idx[r, :k] = order
            dist[r, :k] = d[order]
    return dist[:, :k], idx[:, :k]


def _loo_neighbors(train: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Indices of the k nearest *other* training rows, ties by row order."""
    n = train.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        block = train[start : start + chunk]
        d = ((block[:, None, :] - train[None, :, :]) ** 2).sum(axis=2)
        rows = np.arange(block.shape[0])
        d[rows, start + rows] = np.inf
        out[start : start + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def residual_score(y: float, y_hat: float, sigma: float = 1.0) -> NonconformityScore:
    """Normalised absolute residual ``|y - y_hat| / sigma``."""
    if not sigma > 0:
        raise ValidationError(f"sigma_hat must be positive, got {sigma!r}")
    return NonconformityScore(abs(float(y) - float(y_hat)) / float(sigma))


class KnnClassScorer:
    """k-NN ratio scorer for classification.

    The score of candidate label ``y`` for input ``x`` is the sum of
    distances to the ``k`` nearest training points of class ``y`` divided by
    the sum of distances to the ``k`` nearest points of any other class.
    A zero denominator (exact duplicates) is floored at machine epsilon
    times the feature scale of the training set.

    Parameters
    ----------
    k : int, default=1
    """

    task = "classification"

    def __init__(self, k: int = 1):
        if int(k) != k or k < 1:
            raise ValidationError(f"k must be a positive integer, got {k!r}")
        self.k = int(k)
        self._fitted = False

    def fit(self, train: Dataset) -> "KnnClassScorer":
        if train.targets is None or train.task != "classification":
            raise ValidationError("KnnClassScorer needs a labeled classification dataset")
        if len(train) == 0:
            raise ValidationError("training set is empty")
        self.labels = tuple(train.labels)
        self._X = np.array(train.features)
        self._y = np.array(train.targets)
        counts = np.bincount(self._y, minlength=len(self.labels))
        if counts.min() < self.k:
            small = self.labels[int(np.argmin(counts))]
            raise ValidationError(
                f"k={self.k} exceeds the size of class {small!r} ({counts.min()} training examples)"
            )
        if len(self.labels) < 2:
            raise ValidationError("need at least two classes")
        self._same = [cKDTree(self._X[self._y == j]) for j in range(len(self.labels))]
        self._other = [cKDTree(self._X[self._y != j]) for j in range(len(self.labels))]
        span = float(np.ptp(self._X, axis=0).max()) if self._X.size else 1.0
        self._floor = _EPS * max(1.0, span)
        self._fitted = True
        return self

    def _check(self) -> None:
        if not self._fitted:
            raise NotFittedError("KnnClassScorer is not fitted")

    def _ksum(self, tree: cKDTree, Q: np.ndarray) -> np.ndarray:
        d, _ = tree.query(Q, k=self.k)
        d = np.asarray(d, dtype=float).reshape(len(Q), self.k)
        return d.sum(axis=1)

    def _column(self, Q: np.ndarray, j: int) -> np.ndarray:
        num = self._ksum(self._same[j], Q)
        den = np.maximum(self._ksum(self._other[j], Q), self._floor)
        return num / den

    def label_scores(self, data: Dataset) -> np.ndarray:
        self._check()
        Q = data.features
        if Q.shape[1] != self._X.shape[1]:
            raise ValidationError("feature dimension differs from the training set")
        return np.column_stack([self._column(Q, j) for j in range(len(self.labels))])

    def scores(self, data: Dataset) -> np.ndarray:
        self._check()
        if data.targets is None:
            raise ValidationError("true-label scores need a labeled dataset")
        missing = [y for y in data.labels if y not in self.labels]
        if missing:
            raise ValidationError(f"labels {missing!r} absent from training data")
        cols = np.array([self.labels.index(y) for y in data.labels])
        j = cols[data.targets] if len(data) else np.zeros(0, dtype=int)
        out = np.empty(len(data))
        for c in np.unique(j):
            mask = j == c
            out[mask] = self._column(data.features[mask], int(c))
        return out

    def score(self, example: LabeledExample | Any, label: Hashable) -> NonconformityScore:
        """Score a single (example, candidate label) pair."""
        self._check()
        if label not in self.labels:
            raise ValidationError(f"class {label!r} absent from training data")
        return NonconformityScore(self._column(_example_row(example), self.labels.index(label))[0])

    def to_dict(self) -> dict:
        self._check()
        return {
            "kind": "knn_class",
            "k": self.k,
            "labels": list(self.labels),
            "train_features": self._X.tolist(),
            "train_labels": self._y.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnnClassScorer":
        X = np.asarray(d["train_features"], dtype=float)
        train = Dataset(X, np.asarray(d["train_labels"]), "classification", tuple(d["labels"]))
        return cls(d["k"]).fit(train)


class KnnRegressor:
    """k-NN mean regressor (ties broken by training order)."""

    def __init__(self, k: int = 5):
        if int(k) != k or k < 1:
            raise ValidationError(f"k must be a positive integer, got {k!r}")
        self.k = int(k)
        self._tree = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "KnnRegressor":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(X) < self.k:
            raise ValidationError(f"k={self.k} exceeds training size {len(X)}")
        self._X, self._y = X, y
        self._tree = cKDTree(X)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self._tree is None:
            raise NotFittedError("KnnRegressor is not fitted")
        _, idx = nearest_neighbors(self._tree, self._X, np.asarray(X, dtype=float), self.k)
        return self._y[idx].mean(axis=1)

    def loo_predict(self) -> np.ndarray:
        """Leave-one-out predictions on the training set."""
        if len(self._X) <= self.k:
            raise ValidationError("leave-one-out needs more than k training points")
        idx = _loo_neighbors(self._X, self.k)
        return self._y[idx].mean(axis=1)


class ResidualScorer:
    """Absolute-residual scorer around a k-NN mean regressor.

    With ``normalize=True`` the residual is divided by a local difficulty
    estimate: the mean absolute leave-one-out training residual among the
    ``difficulty_k`` nearest training neighbours, plus a floor ``beta``.
    ``beta`` defaults to ``1e-6`` times the interquartile range of the
    training targets.
    """

    task = "regression"

    def __init__(self, k: int = 5, normalize: bool = False, difficulty_k: int | None = None, beta: float | None = None):
        self.k = int(k)
        self.normalize = bool(normalize)
        self.difficulty_k = int(difficulty_k) if difficulty_k is not None else self.k
        if beta is not None and not beta > 0:
            raise ValidationError(f"beta must be positive, got {beta!r}")
        self.beta = beta
        self._model: KnnRegressor | None = None

    def fit(self, train: Dataset) -> "ResidualScorer":
        if train.targets is None or train.task != "regression":
            raise ValidationError("ResidualScorer needs a labeled regression dataset")
        self._model = KnnRegressor(self.k).fit(train.features, train.targets)
        if self.beta is None:
            q75, q25 = np.percentile(train.targets, [75, 25])
            iqr = float(q75 - q25)
            self.beta = 1e-6 * iqr if iqr > 0 else 1e-6
        if self.normalize:
            self._abs_res = np.abs(train.targets - self._model.loo_predict())
            self._tree = cKDTree(train.features)
            if len(train) < self.difficulty_k:
                raise ValidationError("difficulty_k exceeds training size")
        return self

    def _check(self) -> KnnRegressor:
        if self._model is None:
            raise NotFittedError("ResidualScorer is not fitted")
        return self._model

    def difficulty(self, X: np.ndarray) -> np.ndarray:
        model = self._check()
        X = np.asarray(X, dtype=float)
        if not self.normalize:
            return np.ones(len(X))
        _, idx = nearest_neighbors(self._tree, model._X, X, self.difficulty_k)
        return self._abs_res[idx].mean(axis=1) + self.beta

    def predict(self, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
        model = self._check()
        return model.predict(data.features), self.difficulty(data.features)

    def scores(self, data: Dataset) -> np.ndarray:
        if data.targets is None:
            raise ValidationError("true-target scores need a labeled dataset")
        y_hat, sigma = self.predict(data)
        return np.abs(data.targets - y_hat) / sigma

    def score(self, example: LabeledExample | Any, y: float) -> NonconformityScore:
        y_hat, sigma = self.predict(Dataset(_example_row(example)))
        return residual_score(y, y_hat[0], sigma[0])

    def to_dict(self) -> dict:
        model = self._check()
        return {
            "kind": "residual",
            "k": self.k,
            "normalize": self.normalize,
            "difficulty_k": self.difficulty_k,
            "beta": self.beta,
            "train_features": model._X.tolist(),
            "train_targets": model._y.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResidualScorer":
        train = Dataset(np.asarray(d["train_features"], dtype=float), np.asarray(d["train_targets"]), "regression")
        return cls(d["k"], d["normalize"], d["difficulty_k"], d["beta"]).fit(train)


class KnnDistanceScorer:
    """Label-free scorer: sum of distances to the k nearest training inputs."""

    task = None

    def __init__(self, k: int = 5):
        if int(k) != k or k < 1:
            raise ValidationError(f"k must be a positive integer, got {k!r}")
        self.k = int(k)
        self._tree = None

    def fit(self, train: Dataset) -> "KnnDistanceScorer":
        if len(train) < self.k:
            raise ValidationError(f"k={self.k} exceeds training size {len(train)}")
        self._X = np.array(train.features)
        self._tree = cKDTree(self._X)
        return self

    def scores(self, data: Dataset | np.ndarray) -> np.ndarray:
        if self._tree is None:
            raise NotFittedError("KnnDistanceScorer is not fitted")
        Q = data.features if isinstance(data, Dataset) else np.asarray(data, dtype=float).reshape(len(data), -1)
        d, _ = self._tree.query(Q, k=self.k)
        return np.asarray(d, dtype=float).reshape(len(Q), self.k).sum(axis=1)

    def score(self, example: LabeledExample | Any, target: Any = None) -> NonconformityScore:
        return NonconformityScore(self.scores(_example_row(example))[0])

    def to_dict(self) -> dict:
        return {"kind": "knn_distance", "k": self.k, "train_features": self._X.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "KnnDistanceScorer":
        return cls(d["k"]).fit(Dataset(np.asarray(d["train_features"], dtype=float)))


class ExternalScoreTable:
    """Scores or point predictions computed outside the toolkit.

    Classification tables hold one nonconformity score per
    (example id, label) pair and must be complete over the label universe.
    Regression tables hold ``y_hat`` and an optional positive ``sigma_hat``
    per example id; scores are then normalised residuals.
    """

    def __init__(
        self,
        task: str,
        class_scores: dict[tuple[str, Hashable], float] | None = None,
        predictions: dict[str, tuple[float, float | None]] | None = None,
        labels: tuple | None = None,
        source: str | None = None,
    ):
        self.task = task
        self.source = source
        if task == "classification":
            class_scores = dict(class_scores or {})
            if labels is None:
                labels = tuple(dict.fromkeys(lbl for _, lbl in class_scores))
            self.labels = tuple(labels)
            ids = dict.fromkeys(i for i, _ in class_scores)
            for i in ids:
                for y in self.labels:
                    if (i, y) not in class_scores:
                        raise ValidationError(f"external score table missing pair (example_id={i!r}, label={y!r})")
            for key, v in class_scores.items():
                if not math.isfinite(v):
                    raise ValidationError(f"non-finite score for {key!r}")
            self._scores = class_scores
        elif task == "regression":
            predictions = dict(predictions or {})
            for i, (y_hat, sigma) in predictions.items():
                if not math.isfinite(y_hat):
                    raise ValidationError(f"non-finite y_hat for example {i!r}")
                if sigma is not None and not sigma > 0:
                    raise ValidationError(f"sigma_hat must be positive for example {i!r}")
            self._pred = predictions
        else:
            raise ValidationError(f"unknown task {task!r}")

    @classmethod
    def from_csv(cls, path: str | Path, labels: tuple | None = None) -> "ExternalScoreTable":
        """Read ``example_id,label,score`` or ``example_id,y_hat[,sigma_hat]``."""
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            cols = reader.fieldnames or []
            if {"example_id", "label", "score"} <= set(cols):
                scores: dict = {}
                for lineno, row in enumerate(reader, start=2):
                    try:
                        scores[(row["example_id"], row["label"])] = float(row["score"])
                    except (TypeError, ValueError):
                        raise ValidationError(f"{path}: malformed score on row {lineno}") from None
                return cls("classification", class_scores=scores, labels=labels, source=str(path))
            if {"example_id", "y_hat"} <= set(cols):
                preds: dict = {}
                for lineno, row in enumerate(reader, start=2):
                    try:
                        sigma = row.get("sigma_hat")
                        preds[row["example_id"]] = (float(row["y_hat"]), float(sigma) if sigma not in (None, "") else None)
                    except (TypeError, ValueError):
                        raise ValidationError(f"{path}: malformed prediction on row {lineno}") from None
                return cls("regression", predictions=preds, source=str(path))
        raise ValidationError(f"{path}: header must be example_id,label,score or example_id,y_hat[,sigma_hat]")

    def lookup(self, example_id: str, y: Any) -> NonconformityScore:
        """Score for ``(example_id, y)``; a missing pair raises :class:`KeyError`."""
        if self.task == "classification":
            try:
                return NonconformityScore(self._scores[(example_id, y)])
            except KeyError:
                raise KeyError(f"no external score for example_id={example_id!r}, label={y!r}") from None
        try:
            y_hat, sigma = self._pred[example_id]
        except KeyError:
            raise KeyError(f"no external prediction for example_id={example_id!r}") from None
        return residual_score(y, y_hat, 1.0 if sigma is None else sigma)

    def fit(self, train: Dataset) -> "ExternalScoreTable":
        return self

    def label_scores(self, data: Dataset) -> np.ndarray:
        if self.task != "classification":
            raise ValidationError("label_scores is only defined for classification tables")
        return np.array([[self.lookup(i, y) for y in self.labels] for i in data.ids], dtype=float).reshape(
            len(data), len(self.labels)
        )

    def predict(self, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
        if self.task != "regression":
            raise ValidationError("predict is only defined for regression tables")
        y_hat, sigma = [], []
        for i in data.ids:
            if i not in self._pred:
                raise KeyError(f"no external prediction for example_id={i!r}")
            yh, s = self._pred[i]
            y_hat.append(yh)
            sigma.append(1.0 if s is None else s)
        return np.array(y_hat, dtype=float), np.array(sigma, dtype=float)

    def scores(self, data: Dataset) -> np.ndarray:
        if data.targets is None:
            raise ValidationError("true-target scores need a labeled dataset")
        truths = data.target_values()
        return np.array([self.lookup(i, y) for i, y in zip(data.ids, truths)], dtype=float)

    def score(self, example: LabeledExample, y: Any) -> NonconformityScore:
        if example.example_id is None:
            raise ValidationError("external scores are looked up by example_id")
        return self.lookup(example.example_id, y)

    def to_dict(self) -> dict:
        d: dict = {"kind": "external", "task": self.task, "source": self.source}
        if self.task == "classification":
            d["labels"] = list(self.labels)
        return d


def load_external_scores(table: ExternalScoreTable, example_id: str, y: Any) -> NonconformityScore:
    """Stored score (classification) or normalised residual (regression)."""
    return table.lookup(example_id, y)


def scorer_from_dict(d: dict):
    """Rebuild a fitted scorer from :meth:`to_dict` output."""
    kind = d.get("kind")
    if kind == "knn_class":
        return KnnClassScorer.from_dict(d)
    if kind == "residual":
        return ResidualScorer.from_dict(d)
    if kind == "knn_distance":
        return KnnDistanceScorer.from_dict(d)
    if kind == "external":
        if not d.get("source"):
            raise ValidationError("external scorer reference has no source path")
        labels = tuple(d["labels"]) if d.get("labels") else None
        return ExternalScoreTable.from_csv(d["source"], labels=labels)
    raise ValidationError(f"unknown scorer kind {kind!r}")
