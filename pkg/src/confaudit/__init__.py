"""Conformal prediction toolkit with conditional-validity, drift and audit tools."""

from .core import (
    ConfidenceLevel,
    Dataset,
    IntervalBatch,
    IntervalPrediction,
    LabeledExample,
    NonconformityScore,
    NotFittedError,
    SetBatch,
    SetPrediction,
    ValidationError,
    to_nonconformity,
)
from .icp import (
    CalibrationSet,
    ConformalClassifier,
    ConformalRegressor,
    calibrate,
    p_value,
    predict_interval,
    predict_set,
)
from .scorers import ExternalScoreTable, KnnClassScorer, KnnDistanceScorer, ResidualScorer

__version__ = "0.1.0"
