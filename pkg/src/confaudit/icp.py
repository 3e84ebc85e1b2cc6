"""Inductive (split) conformal prediction.

A scorer is fitted on a training split; the scores of a disjoint
calibration split, computed with the true targets, form a
:class:`CalibrationSet`.  A test score ``a`` then gets the p-value

* deterministic: ``(#{cal >= a} + 1) / (n + 1)``
* smoothed:      ``(#{cal > a} + tau * (#{cal == a} + 1)) / (n + 1)``

with ``tau ~ U[0, 1]``.  Smoothing randomises ties instead of perturbing
the scores, so a seeded generator reproduces it exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Hashable, Sequence

import numpy as np

from .core import (
    ConfidenceLevel,
    Dataset,
    IntervalBatch,
    IntervalPrediction,
    LabeledExample,
    SetBatch,
    SetPrediction,
    ValidationError,
    as_confidence,
)


@dataclass(frozen=True)
class CalibrationSet:
    """Sorted calibration scores with the tags and ids carried alongside."""

    scores: np.ndarray
    tags: tuple[frozenset[str], ...] = ()
    ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 1 or s.size == 0:
            raise ValidationError("calibration set must contain at least one score")
        if not np.all(np.isfinite(s)):
            raise ValidationError("calibration scores must be finite")
        if np.any(np.diff(s) < 0):
            raise ValidationError("calibration scores must be sorted ascending")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    @property
    def n(self) -> int:
        return self.scores.size

    @classmethod
    def from_scores(cls, scores: Sequence[float], tags: Sequence | None = None, ids: Sequence | None = None) -> "CalibrationSet":
        s = np.asarray(scores, dtype=float)
        order = np.argsort(s, kind="stable")
        return cls(
            s[order],
            tuple(frozenset(tags[i]) for i in order) if tags else (),
            tuple(ids[i] for i in order) if ids else (),
        )


def calibrate(scorer: Any, data: Dataset) -> CalibrationSet:
    """Score held-out labeled examples with their true targets."""
    if len(data) == 0:
        raise ValidationError("calibration data is empty")
    if data.targets is None:
        raise ValidationError("calibration examples must be labeled")
    return CalibrationSet.from_scores(scorer.scores(data), data.group_tags, data.ids)


def _check_tau(tau: np.ndarray) -> None:
    if np.any((tau < 0) | (tau > 1)) or np.any(np.isnan(tau)):
        raise ValidationError("tau must lie in [0, 1]")


def p_values(cal_scores: np.ndarray, scores: Any, tau: Any = None) -> np.ndarray:
    """Vectorised p-values of ``scores`` against sorted ``cal_scores``.

    ``tau=None`` gives deterministic p-values; otherwise ``tau`` broadcasts
    against ``scores`` and gives smoothed ones.
    """
    cal = np.asarray(cal_scores, dtype=float)
    a = np.asarray(scores, dtype=float)
    n = cal.size
    left = np.searchsorted(cal, a, side="left")
    right = np.searchsorted(cal, a, side="right")
    greater = n - right
    if tau is None:
        return (n - left + 1) / (n + 1)
    t = np.asarray(tau, dtype=float)
    _check_tau(t)
    return (greater + t * (right - left + 1)) / (n + 1)


def p_value(cal: CalibrationSet, score: float, tau: float | None = None, smoothed: bool = False) -> float:
    """p-value of one test score.

    Parameters
    ----------
    cal : CalibrationSet
    score : float
        Nonconformity of the test pair.
    tau : float, optional
        Uniform draw in [0, 1]; required when ``smoothed``.
    smoothed : bool, default=False

    Examples
    --------
    >>> cal = CalibrationSet.from_scores([1, 2, 3, 4])
    >>> p_value(cal, 2.5)
    0.6
    >>> p_value(cal, 2.5, tau=0.0, smoothed=True)
    0.4
    """
    if not math.isfinite(score):
        raise ValidationError("test score must be finite")
    if smoothed:
        if tau is None:
            raise ValidationError("smoothed p-value needs tau")
        return float(p_values(cal.scores, score, tau))
    if tau is not None and not (0.0 <= tau <= 1.0):
        raise ValidationError("tau must lie in [0, 1]")
    return float(p_values(cal.scores, score))


def interval_rank(n: int, epsilon: float) -> int:
    """Rank ``k = ceil((1 - epsilon)(n + 1))`` of the interval quantile.

    Computed as the largest ``k`` whose score still has deterministic
    p-value above ``epsilon``, which equals the ceiling formula but is
    immune to floating-point rounding of ``(1 - epsilon)(n + 1)``.
    """

    def admits(k: int) -> bool:
        return (n - k + 2) / (n + 1) > epsilon

    k = min(max(math.ceil((1.0 - epsilon) * (n + 1)), 1), n + 1)
    while k > 1 and not admits(k):
        k -= 1
    while k <= n and admits(k + 1):
        k += 1
    return k


def interval_quantile(cal_scores: np.ndarray, epsilon: float) -> float:
    """Half-width multiplier ``q``; ``inf`` when the calibration set is too small."""
    n = len(cal_scores)
    k = interval_rank(n, epsilon)
    return math.inf if k > n else float(cal_scores[k - 1])


def _intervals(y_hat: np.ndarray, sigma: np.ndarray, q: np.ndarray | float) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=float)
    with np.errstate(invalid="ignore"):
        half = q * sigma
    lo = np.where(np.isinf(q), -np.inf, y_hat - half)
    hi = np.where(np.isinf(q), np.inf, y_hat + half)
    return lo, hi


def _draw_tau(rng: np.random.Generator | None, shape: tuple, tau: Any) -> np.ndarray:
    if tau is not None:
        return np.broadcast_to(np.asarray(tau, dtype=float), shape)
    if rng is None:
        raise ValidationError("smoothed prediction needs an rng or explicit tau")
    return rng.random(shape)


def predict_set(
    cal: CalibrationSet,
    scorer: Any,
    x: LabeledExample,
    conf: ConfidenceLevel | float,
    labels: Sequence[Hashable] | None = None,
    smoothed: bool = False,
    tau: float | Sequence[float] | None = None,
    rng: np.random.Generator | None = None,
) -> SetPrediction:
    """Prediction set for one example: every label with ``p > epsilon``."""
    conf = as_confidence(conf)
    universe = tuple(scorer.labels if labels is None else labels)
    unknown = [y for y in universe if y not in scorer.labels]
    if unknown:
        raise ValidationError(f"labels {unknown!r} are unknown to the scorer")
    scores = np.array([scorer.score(x, y) for y in universe], dtype=float)
    if smoothed:
        t = _draw_tau(rng, scores.shape, tau)
        pv = p_values(cal.scores, scores, t)
    else:
        pv = p_values(cal.scores, scores)
    return SetPrediction(dict(zip(universe, map(float, pv))), conf.epsilon)


def predict_interval(cal: CalibrationSet, scorer: Any, x: LabeledExample, conf: ConfidenceLevel | float) -> IntervalPrediction:
    """Prediction interval ``y_hat +/- q * sigma_hat`` for one example."""
    conf = as_confidence(conf)
    ids = (x.example_id,) if x.example_id is not None else ()
    y_hat, sigma = scorer.predict(Dataset(np.asarray(x.features, dtype=float).reshape(1, -1), ids=ids))
    q = interval_quantile(cal.scores, conf.epsilon)
    lo, hi = _intervals(y_hat, sigma, q)
    return IntervalPrediction(float(lo[0]), float(hi[0]))


class ConformalClassifier:
    """Split conformal classifier over a fitted classification scorer."""

    def __init__(self, scorer: Any, calibration: CalibrationSet):
        self.scorer = scorer
        self.calibration = calibration

    @classmethod
    def fit(cls, scorer: Any, calibration_data: Dataset) -> "ConformalClassifier":
        return cls(scorer, calibrate(scorer, calibration_data))

    @property
    def labels(self) -> tuple:
        return tuple(self.scorer.labels)

    def p_values(self, data: Dataset, smoothed: bool = False, rng: np.random.Generator | None = None, tau: Any = None) -> np.ndarray:
        scores = self.scorer.label_scores(data)
        if not smoothed:
            return p_values(self.calibration.scores, scores)
        return p_values(self.calibration.scores, scores, _draw_tau(rng, scores.shape, tau))

    def predict(
        self,
        data: Dataset,
        conf: ConfidenceLevel | float,
        smoothed: bool = False,
        rng: np.random.Generator | None = None,
        tau: Any = None,
    ) -> SetBatch:
        conf = as_confidence(conf)
        return SetBatch(self.labels, self.p_values(data, smoothed, rng, tau), conf.epsilon)


class ConformalRegressor:
    """Split conformal regressor producing symmetric intervals."""

    def __init__(self, scorer: Any, calibration: CalibrationSet):
        self.scorer = scorer
        self.calibration = calibration

    @classmethod
    def fit(cls, scorer: Any, calibration_data: Dataset) -> "ConformalRegressor":
        return cls(scorer, calibrate(scorer, calibration_data))

    def predict(self, data: Dataset, conf: ConfidenceLevel | float, **_: Any) -> IntervalBatch:
        conf = as_confidence(conf)
        y_hat, sigma = self.scorer.predict(data)
        lo, hi = _intervals(y_hat, sigma, interval_quantile(self.calibration.scores, conf.epsilon))
        return IntervalBatch(lo, hi)


def conformal_predictor(scorer: Any, calibration: CalibrationSet):
    """Classifier or regressor depending on the scorer's task."""
    if scorer.task == "classification":
        return ConformalClassifier(scorer, calibration)
    if scorer.task == "regression":
        return ConformalRegressor(scorer, calibration)
    raise ValidationError("prediction needs a classification or regression scorer")
