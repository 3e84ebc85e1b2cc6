import json

import numpy as np
import pytest
from scipy.stats import binomtest

from confaudit.anomaly import AnomalyVerdict, batch_detect, detect, verdict_lines
from confaudit.core import Dataset, LabeledExample, ValidationError
from confaudit.icp import CalibrationSet
from confaudit.scorers import KnnClassScorer, KnnDistanceScorer


class ConstantScorer:
    task = None

    def __init__(self, value):
        self.value = value

    def score(self, x, target=None):
        return self.value

    def scores(self, data):
        return np.full(len(data), self.value, dtype=float)


REF99 = CalibrationSet.from_scores(np.arange(1, 100))


def test_threshold_examples():
    # against scores 1..99 with tau = 1: 99.5 gives p = 1/100, 50.5 gives p = 50/100
    v = detect(REF99, LabeledExample((0.0,)), ConstantScorer(99.5), 0.05, tau=1.0)
    assert v.p_value == pytest.approx(0.01) and v.is_anomaly
    v = detect(REF99, LabeledExample((0.0,)), ConstantScorer(50.5), 0.05, tau=1.0)
    assert v.p_value == pytest.approx(0.5) and not v.is_anomaly


def test_boundary_is_inclusive():
    v = detect(REF99, LabeledExample((0.0,)), ConstantScorer(95.5), 0.05, tau=1.0)
    assert v.p_value == pytest.approx(0.05)
    assert v.is_anomaly == (v.p_value <= 0.05)


def test_verdict_invariant_enforced():
    with pytest.raises(ValidationError):
        AnomalyVerdict(0.5, 0.05, 1.0, True)


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.1])
def test_epsilon_range(eps):
    with pytest.raises(ValidationError):
        detect(REF99, LabeledExample((0.0,)), ConstantScorer(1.0), eps, tau=0.5)


def test_empty_batch():
    verdicts, summary = batch_detect(REF99, Dataset(np.zeros((0, 1))), ConstantScorer(1.0), 0.05, np.random.default_rng(0))
    assert verdicts == [] and summary.alarm_rate is None
    assert json.loads(json.dumps(summary.to_dict()))["alarm_rate"] is None


def _reference(seed, n_train=300, n_ref=2000, dim=2):
    rng = np.random.default_rng(seed)
    sc = KnnDistanceScorer(5).fit(Dataset(rng.normal(size=(n_train, dim))))
    ref = CalibrationSet.from_scores(sc.scores(rng.normal(size=(n_ref, dim))))
    return rng, sc, ref


def test_exchangeable_false_alarm_rate():
    rng, sc, ref = _reference(1)
    batch = Dataset(rng.normal(size=(5000, 2)))
    _, summary = batch_detect(ref, batch, sc, 0.05, np.random.default_rng(2))
    assert binomtest(summary.n_anomalies, summary.n, 0.05).pvalue > 0.001


def test_far_outliers_flagged():
    rng, sc, ref = _reference(3)
    batch = Dataset(rng.normal(size=(500, 2)) + 100.0)
    _, summary = batch_detect(ref, batch, sc, 0.05, np.random.default_rng(4))
    assert summary.alarm_rate >= 0.99


def test_labeled_mode_on_reference_itself():
    # batch = reference examples: every score ties with itself, so p >= tau/(n+1)
    # with many ties above; the alarm rate stays at or below epsilon up to noise
    rng = np.random.default_rng(5)
    X = rng.normal(size=(400, 2))
    y = (X[:, 0] > 0).astype(int)
    train = Dataset(X[:200], y[:200], "classification", ("n", "p"))
    ref_data = Dataset(X[200:], y[200:], "classification", ("n", "p"))
    sc = KnnClassScorer(3).fit(train)
    ref = CalibrationSet.from_scores(sc.scores(ref_data))
    rates = []
    for seed in range(20):
        _, summary = batch_detect(ref, ref_data, sc, 0.05, np.random.default_rng(seed))
        rates.append(summary.alarm_rate)
    # exact oracle: with distinct scores the k-th largest score has p = (k - 1 + 2 tau)/(n + 1)
    n = len(ref_data)
    expected = sum(min(1.0, max(0.0, (0.05 * (n + 1) - (k - 1)) / 2)) for k in range(1, n + 1)) / n
    assert np.mean(rates) == pytest.approx(expected, abs=3 * np.sqrt(0.05 / (n * 20)))
    assert np.mean(rates) <= 0.05 + 3 * np.sqrt(0.05 / (n * 20))


def test_raising_epsilon_never_unflags():
    rng, sc, ref = _reference(6, n_ref=300)
    batch = Dataset(rng.normal(size=(300, 2)) * 1.5)
    a, _ = batch_detect(ref, batch, sc, 0.05, np.random.default_rng(7))
    b, _ = batch_detect(ref, batch, sc, 0.10, np.random.default_rng(7))
    assert all(vb.is_anomaly for va, vb in zip(a, b) if va.is_anomaly)


def test_verdict_lines_are_json():
    rng, sc, ref = _reference(8, n_ref=50)
    v, _ = batch_detect(ref, Dataset(rng.normal(size=(3, 2))), sc, 0.05, np.random.default_rng(0))
    recs = [json.loads(line) for line in verdict_lines(v)]
    assert [r["example_id"] for r in recs] == ["0", "1", "2"]
    assert set(recs[0]) == {"example_id", "p_value", "epsilon", "score", "is_anomaly"}
