import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))


class FixedRegressor:
    """Stub regression scorer returning constant ``y_hat`` and ``sigma``."""

    task = "regression"

    def __init__(self, y_hat: float, sigma: float = 1.0):
        self.y_hat = y_hat
        self.sigma = sigma

    def predict(self, data):
        n = len(data)
        return np.full(n, self.y_hat, dtype=float), np.full(n, self.sigma, dtype=float)


class TableClassifier:
    """Stub classification scorer with one score per label, same for all inputs."""

    task = "classification"

    def __init__(self, scores: dict):
        self.labels = tuple(scores)
        self._scores = dict(scores)

    def score(self, x, label):
        return self._scores[label]

    def label_scores(self, data):
        return np.tile([self._scores[y] for y in self.labels], (len(data), 1)).astype(float)
