"""Conformal anomaly detection.

An example is flagged when its smoothed p-value against a reference set of
scores is at most ``epsilon`` (note ``<=``, whereas prediction sets keep
labels with ``p > epsilon``).  For exchangeable data the false alarm
probability is exactly ``epsilon``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from .core import Dataset, LabeledExample, NonconformityScore, ValidationError
from .icp import CalibrationSet, p_values


@dataclass(frozen=True)
class AnomalyVerdict:
    p_value: float
    epsilon: float
    score: NonconformityScore
    is_anomaly: bool
    example_id: str | None = None

    def __post_init__(self) -> None:
        if self.is_anomaly != (self.p_value <= self.epsilon):
            raise ValidationError("is_anomaly must equal p_value <= epsilon")

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "p_value": self.p_value,
            "epsilon": self.epsilon,
            "score": float(self.score),
            "is_anomaly": self.is_anomaly,
        }


@dataclass(frozen=True)
class BatchSummary:
    n: int
    n_anomalies: int
    alarm_rate: float | None

    def to_dict(self) -> dict:
        return {"n": self.n, "n_anomalies": self.n_anomalies, "alarm_rate": self.alarm_rate}


def _check_epsilon(epsilon: float) -> float:
    epsilon = float(epsilon)
    if not (0.0 < epsilon < 1.0):
        raise ValidationError(f"epsilon must lie in (0, 1), got {epsilon!r}")
    return epsilon


def _score_one(scorer: Any, x: LabeledExample, y: Any) -> float:
    if getattr(scorer, "task", None) is None:
        return float(scorer.score(x))
    target = y if y is not None else x.target
    if target is None:
        raise ValidationError("a supervised scorer needs the example's target")
    return float(scorer.score(x, target))


def detect(
    reference: CalibrationSet,
    x: LabeledExample,
    scorer: Any,
    epsilon: float,
    tau: float,
    y: Any = None,
) -> AnomalyVerdict:
    """Single-example verdict.

    Label-free scorers (``task is None``) look at the features only;
    supervised scorers score ``x`` with ``y`` (or ``x.target``).
    """
    epsilon = _check_epsilon(epsilon)
    s = NonconformityScore(_score_one(scorer, x, y))
    p = float(p_values(reference.scores, s, tau))
    return AnomalyVerdict(p, epsilon, s, p <= epsilon, x.example_id)


def batch_detect(
    reference: CalibrationSet,
    batch: Dataset,
    scorer: Any,
    epsilon: float,
    rng: np.random.Generator,
) -> tuple[list[AnomalyVerdict], BatchSummary]:
    """Verdicts for a whole batch with one shared seeded tau stream."""
    epsilon = _check_epsilon(epsilon)
    if len(batch) == 0:
        return [], BatchSummary(0, 0, None)
    scores = np.asarray(scorer.scores(batch), dtype=float)
    tau = rng.random(len(batch))
    pv = p_values(reference.scores, scores, tau)
    flagged = pv <= epsilon
    verdicts = [
        AnomalyVerdict(float(p), epsilon, NonconformityScore(s), bool(f), i)
        for p, s, f, i in zip(pv, scores, flagged, batch.ids)
    ]
    k = int(flagged.sum())
    return verdicts, BatchSummary(len(batch), k, k / len(batch))


def verdict_lines(verdicts: list[AnomalyVerdict]) -> list[str]:
    return [json.dumps(v.to_dict(), sort_keys=True) for v in verdicts]
