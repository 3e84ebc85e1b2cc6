"""Shared domain types.

Scores are stored with *nonconformity* orientation throughout the package:
a larger score means a stranger (example, target) pair.  Conformity scores
coming from elsewhere are converted with :func:`to_nonconformity`.

Two threshold conventions are used and should not be confused:

* prediction sets keep a label when ``p > epsilon``;
* anomaly detection flags an example when ``p <= epsilon``.
"""

from __future__ import annotations

import math
from decimal import Decimal
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Iterator, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when user input violates a documented contract."""


class NotFittedError(RuntimeError):
    """Raised when a scorer or predictor is used before fitting."""


class NonconformityScore(float):
    """A finite real strangeness score (higher = stranger)."""

    def __new__(cls, value: float) -> "NonconformityScore":
        value = float(value)
        if not math.isfinite(value):
            raise ValidationError(f"nonconformity score must be finite, got {value!r}")
        return super().__new__(cls, value)


def to_nonconformity(conformity: float) -> NonconformityScore:
    """Convert a conformity score (higher = more typical) to nonconformity.

    >>> to_nonconformity(10.0)
    -10.0
    """
    conformity = float(conformity)
    if not math.isfinite(conformity):
        raise ValidationError(f"conformity score must be finite, got {conformity!r}")
    return NonconformityScore(-conformity)


@dataclass(frozen=True)
class ConfidenceLevel:
    """Confidence level in the open interval (0, 1)."""

    level: float

    def __post_init__(self) -> None:
        level = float(self.level)
        if not (0.0 < level < 1.0) or not math.isfinite(level):
            raise ValidationError(f"confidence level must lie in (0, 1), got {self.level!r}")
        object.__setattr__(self, "level", level)

    @property
    def epsilon(self) -> float:
        """Significance level ``1 - level``.

        Subtracted in decimal so that level 0.9 gives exactly the float
        0.1 rather than 0.09999999999999998, which would otherwise flip
        ``p > epsilon`` comparisons at p = 0.1.
        """
        return float(Decimal(1) - Decimal(repr(self.level)))


def as_confidence(conf: "ConfidenceLevel | float") -> ConfidenceLevel:
    if isinstance(conf, ConfidenceLevel):
        return conf
    return ConfidenceLevel(conf)


@dataclass(frozen=True)
class LabeledExample:
    """A single observation: features, optional target and subgroup tags."""

    features: tuple[float, ...]
    target: Any = None
    group_tags: frozenset[str] = frozenset()
    example_id: str | None = None

    @property
    def labeled(self) -> bool:
        return self.target is not None


@dataclass(frozen=True)
class SetPrediction:
    """Classification output for one example.

    ``labels`` is derived from the p-values: a label is in the set iff its
    p-value exceeds ``epsilon``.  The empty set is a legitimate output.
    """

    p_values: dict[Hashable, float]
    epsilon: float
    flags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        for label, p in self.p_values.items():
            if not (0.0 < p <= 1.0):
                raise ValidationError(f"p-value for {label!r} outside (0, 1]: {p!r}")

    @property
    def labels(self) -> frozenset:
        return frozenset(y for y, p in self.p_values.items() if p > self.epsilon)

    def __contains__(self, label: Hashable) -> bool:
        return label in self.labels


@dataclass(frozen=True)
class IntervalPrediction:
    """Regression output: ``[lo, hi]``, possibly infinite at either end."""

    lo: float
    hi: float
    flags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if math.isnan(self.lo) or math.isnan(self.hi) or self.lo > self.hi:
            raise ValidationError(f"invalid interval [{self.lo}, {self.hi}]")

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.lo) or math.isinf(self.hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def __contains__(self, y: float) -> bool:
        return self.lo <= y <= self.hi


PredictionOutput = SetPrediction | IntervalPrediction


@dataclass(frozen=True)
class SetBatch:
    """Vectorised classification output for many examples.

    Parameters
    ----------
    labels : tuple
        Label universe, in column order of ``p_values``.
    p_values : ndarray of shape (n, n_labels)
    epsilon : float
    flags : tuple of frozenset, optional
        Per-example flags such as ``"marginal-only"``.
    """

    labels: tuple
    p_values: np.ndarray
    epsilon: float
    flags: tuple[frozenset[str], ...] | None = None

    @property
    def membership(self) -> np.ndarray:
        return self.p_values > self.epsilon

    @property
    def sizes(self) -> np.ndarray:
        return self.membership.sum(axis=1)

    def contains(self, truths: Sequence[Hashable]) -> np.ndarray:
        """Boolean array: does each set contain the matching truth?"""
        index = {y: j for j, y in enumerate(self.labels)}
        member = self.membership
        out = np.zeros(len(self), dtype=bool)
        for i, y in enumerate(truths):
            j = index.get(y)
            out[i] = j is not None and bool(member[i, j])
        return out

    def __len__(self) -> int:
        return self.p_values.shape[0]

    def __getitem__(self, i: int) -> SetPrediction:
        flags = self.flags[i] if self.flags is not None else frozenset()
        return SetPrediction(
            {y: float(p) for y, p in zip(self.labels, self.p_values[i])}, self.epsilon, flags
        )

    def __iter__(self) -> Iterator[SetPrediction]:
        for i in range(len(self)):
            yield self[i]


@dataclass(frozen=True)
class IntervalBatch:
    """Vectorised regression output: arrays of lower and upper endpoints."""

    lo: np.ndarray
    hi: np.ndarray
    flags: tuple[frozenset[str], ...] | None = None

    @property
    def unbounded(self) -> np.ndarray:
        return np.isinf(self.lo) | np.isinf(self.hi)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, truths: Sequence[float]) -> np.ndarray:
        y = np.asarray(truths, dtype=float)
        return (self.lo <= y) & (y <= self.hi)

    def __len__(self) -> int:
        return self.lo.shape[0]

    def __getitem__(self, i: int) -> IntervalPrediction:
        flags = self.flags[i] if self.flags is not None else frozenset()
        return IntervalPrediction(float(self.lo[i]), float(self.hi[i]), flags)

    def __iter__(self) -> Iterator[IntervalPrediction]:
        for i in range(len(self)):
            yield self[i]


def as_batch(predictions: "SetBatch | IntervalBatch | Sequence[PredictionOutput]"):
    """Normalise a list of single predictions into a batch container."""
    if isinstance(predictions, (SetBatch, IntervalBatch)):
        return predictions
    predictions = list(predictions)
    if not predictions:
        raise ValidationError("no predictions given")
    if all(isinstance(p, IntervalPrediction) for p in predictions):
        return IntervalBatch(
            np.array([p.lo for p in predictions], dtype=float),
            np.array([p.hi for p in predictions], dtype=float),
            tuple(p.flags for p in predictions),
        )
    if all(isinstance(p, SetPrediction) for p in predictions):
        labels: list = []
        for p in predictions:
            for y in p.p_values:
                if y not in labels:
                    labels.append(y)
        eps = {p.epsilon for p in predictions}
        if len(eps) != 1:
            raise ValidationError("set predictions mix different confidence levels")
        # absent labels get p = 0 so they are never members
        pv = np.array([[p.p_values.get(y, 0.0) for y in labels] for p in predictions])
        return SetBatch(tuple(labels), pv, eps.pop(), tuple(p.flags for p in predictions))
    raise ValidationError("predictions must be all sets or all intervals")


@dataclass(frozen=True)
class Dataset:
    """Column-oriented collection of examples sharing one feature layout.

    Parameters
    ----------
    features : ndarray of shape (n, d)
    targets : ndarray of shape (n,) or None
        Integer label ids for classification (see ``labels``) or real
        values for regression.  ``None`` for unlabeled data.
    task : {"classification", "regression", None}
    labels : tuple
        Interned label universe for classification, in load order.
    ids : tuple of str
    group_tags : tuple of frozenset
    feature_names : tuple of str
    group_columns : dict
        Raw string values of group-tag columns, keyed by column name.
    """

    features: np.ndarray
    targets: np.ndarray | None = None
    task: str | None = None
    labels: tuple = ()
    ids: tuple[str, ...] = ()
    group_tags: tuple[frozenset[str], ...] = ()
    feature_names: tuple[str, ...] = ()
    group_columns: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else X.reshape(0, 0)
        if X.ndim != 2:
            raise ValidationError("features must be a 2-D array")
        if not np.all(np.isfinite(X)):
            raise ValidationError("features contain non-finite values")
        X.setflags(write=False)
        object.__setattr__(self, "features", X)
        n = X.shape[0]
        if self.task not in (None, "classification", "regression"):
            raise ValidationError(f"unknown task {self.task!r}")
        if self.targets is not None:
            dtype = np.int64 if self.task == "classification" else float
            t = np.asarray(self.targets, dtype=dtype)
            if t.shape != (n,):
                raise ValidationError("targets must have one entry per example")
            if self.task == "classification":
                if n and (t.min() < 0 or t.max() >= len(self.labels)):
                    raise ValidationError("label id outside the label universe")
            elif not np.all(np.isfinite(t)):
                raise ValidationError("regression targets contain non-finite values")
            t.setflags(write=False)
            object.__setattr__(self, "targets", t)
        ids = tuple(self.ids) if self.ids else tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise ValidationError("ids must have one entry per example")
        if len(set(ids)) != n:
            raise ValidationError("example ids must be unique")
        object.__setattr__(self, "ids", ids)
        tags = tuple(frozenset(t) for t in self.group_tags) if self.group_tags else (frozenset(),) * n
        if len(tags) != n:
            raise ValidationError("group_tags must have one entry per example")
        object.__setattr__(self, "group_tags", tags)
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValidationError("feature_names length does not match feature dimension")
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "labels", tuple(self.labels))
        for col, values in self.group_columns.items():
            if len(values) != n:
                raise ValidationError(f"group column {col!r} has wrong length")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> bool:
        return self.targets is not None

    def target_values(self) -> list:
        """Targets as user-facing values (label names for classification)."""
        if self.targets is None:
            raise ValidationError("dataset is unlabeled")
        if self.task == "classification":
            return [self.labels[int(t)] for t in self.targets]
        return [float(t) for t in self.targets]

    def label_id(self, label: Hashable) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValidationError(f"unknown label {label!r}") from None

    def take(self, index: Iterable[int]) -> "Dataset":
        idx = np.asarray(list(index) if not isinstance(index, np.ndarray) else index, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            targets=None if self.targets is None else self.targets[idx],
            task=self.task,
            labels=self.labels,
            ids=tuple(self.ids[i] for i in idx),
            group_tags=tuple(self.group_tags[i] for i in idx),
            feature_names=self.feature_names,
            group_columns={c: tuple(v[i] for i in idx) for c, v in self.group_columns.items()},
        )

    def example(self, i: int) -> LabeledExample:
        target = None
        if self.targets is not None:
            target = self.labels[int(self.targets[i])] if self.task == "classification" else float(self.targets[i])
        return LabeledExample(tuple(float(v) for v in self.features[i]), target, self.group_tags[i], self.ids[i])

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self.example(i)

    def column(self, name: str) -> np.ndarray:
        """Look up a feature, target or group column by name."""
        if name in self.feature_names:
            return self.features[:, self.feature_names.index(name)]
        if name in ("label", "target"):
            return np.array(self.target_values(), dtype=object)
        if name in self.group_columns:
            return np.array(self.group_columns[name], dtype=object)
        raise ValidationError(f"unknown column {name!r}")

    @classmethod
    def from_examples(
        cls, examples: Sequence[LabeledExample], task: str | None = None, labels: Sequence | None = None
    ) -> "Dataset":
        """Build a dataset from single examples, interning labels in load order."""
        examples = list(examples)
        if not examples:
            return cls(np.zeros((0, 0)), task=task)
        dims = {len(e.features) for e in examples}
        if len(dims) != 1:
            raise ValidationError(f"inconsistent feature dimensionality {sorted(dims)}")
        has_target = {e.target is not None for e in examples}
        if len(has_target) != 1:
            raise ValidationError("target presence must be uniform within a dataset")
        X = np.array([e.features for e in examples], dtype=float).reshape(len(examples), dims.pop())
        ids = [e.example_id if e.example_id is not None else str(i) for i, e in enumerate(examples)]
        tags = [e.group_tags for e in examples]
        if not has_target.pop():
            return cls(X, None, task, tuple(labels or ()), tuple(ids), tuple(tags))
        if task is None:
            task = "regression" if all(isinstance(e.target, float) for e in examples) else "classification"
        if task == "classification":
            universe = list(labels or ())
            for e in examples:
                if e.target not in universe:
                    if labels:
                        raise ValidationError(f"label {e.target!r} not in label universe")
                    universe.append(e.target)
            targets = np.array([universe.index(e.target) for e in examples])
            return cls(X, targets, task, tuple(universe), tuple(ids), tuple(tags))
        targets = np.array([float(e.target) for e in examples])
        return cls(X, targets, task, (), tuple(ids), tuple(tags))
