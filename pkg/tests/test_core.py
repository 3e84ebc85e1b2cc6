import math

import numpy as np
import pytest

from confaudit.core import (
    ConfidenceLevel,
    Dataset,
    IntervalBatch,
    IntervalPrediction,
    LabeledExample,
    NonconformityScore,
    SetBatch,
    SetPrediction,
    ValidationError,
    as_batch,
    to_nonconformity,
)


def test_conformity_is_negated():
    assert to_nonconformity(10) == -10
    assert to_nonconformity(-3) == 3


def test_nonconformity_rejects_non_finite():
    with pytest.raises(ValidationError):
        NonconformityScore(math.nan)
    with pytest.raises(ValidationError):
        NonconformityScore(math.inf)


@pytest.mark.parametrize("level", [0.0, 1.0, -0.1, 1.5])
def test_confidence_level_bounds(level):
    with pytest.raises(ValidationError):
        ConfidenceLevel(level)


def test_confidence_epsilon():
    assert ConfidenceLevel(0.95).epsilon == pytest.approx(0.05)


def test_set_prediction_thresholds_strictly():
    p = SetPrediction({"A": 0.02, "B": 0.40, "C": 0.01, "D": 0.20}, 0.05)
    assert p.labels == {"B", "D"}
    assert SetPrediction({"A": 0.05}, 0.05).labels == frozenset()


def test_interval_prediction():
    iv = IntervalPrediction(1.0, 19.0)
    assert iv.width == 18.0
    assert 1.0 in iv and 19.0 in iv and 20.0 not in iv
    unb = IntervalPrediction(-math.inf, math.inf)
    assert unb.unbounded and 1e300 in unb
    with pytest.raises(ValidationError):
        IntervalPrediction(2.0, 1.0)


def test_set_batch_roundtrip():
    b = SetBatch(("A", "B"), np.array([[0.5, 0.01], [0.01, 0.01]]), 0.05)
    assert b.sizes.tolist() == [1, 0]
    assert b.contains(["A", "A"]).tolist() == [True, False]
    assert b[0].labels == {"A"}
    assert as_batch([b[0], b[1]]).sizes.tolist() == [1, 0]


def test_interval_batch_contains():
    b = IntervalBatch(np.array([0.0, -np.inf]), np.array([1.0, np.inf]))
    assert b.contains([0.5, 7.0]).tolist() == [True, True]
    assert b.unbounded.tolist() == [False, True]


def test_dataset_validation():
    with pytest.raises(ValidationError):
        Dataset(np.array([[0.0], [np.nan]]))
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 1)), ids=("a", "a"))
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 1)), np.array([0, 3]), "classification", ("A", "B"))


def test_dataset_from_examples_interns_labels():
    exs = [LabeledExample((0.0,), "B", example_id="x"), LabeledExample((1.0,), "A", example_id="y")]
    ds = Dataset.from_examples(exs, task="classification")
    assert ds.labels == ("B", "A")
    assert ds.target_values() == ["B", "A"]
    assert ds.example(1).target == "A"
    assert ds.take([1]).ids == ("y",)
