"""Dataset files, train/calibration/tuning/test splits and synthetic data.

CSV layout: a mandatory header row; ``example_id`` (optional), ``label``
(classification) or ``target`` (regression), group-tag columns prefixed
``group_`` and every other column a numeric feature.  Floats are written
with 17 significant digits so files round-trip exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from .core import Dataset, ValidationError

GROUP_PREFIX = "group_"


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _tag(column: str, value: str) -> str:
    return f"{column[len(GROUP_PREFIX):]}={value}"


def load(path: str | Path, label_order: tuple | None = None) -> Dataset:
    """Read a dataset CSV.

    Raises :class:`ValidationError` naming the row for malformed values and
    naming the column set when both ``label`` and ``target`` are present.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file, header row is mandatory") from None
        if len(set(header)) != len(header):
            raise ValidationError(f"{path}: duplicate column names in header")
        if "label" in header and "target" in header:
            raise ValidationError(f"{path}: use either 'label' or 'target', not both")
        group_cols = [c for c in header if c.startswith(GROUP_PREFIX)]
        feat_cols = [c for c in header if c not in ("example_id", "label", "target") and c not in group_cols]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            rows.append((lineno, dict(zip(header, row))))

    n = len(rows)
    X = np.empty((n, len(feat_cols)))
    for i, (lineno, row) in enumerate(rows):
        for j, c in enumerate(feat_cols):
            try:
                v = float(row[c])
            except ValueError:
                raise ValidationError(f"{path}: row {lineno}, column {c!r}: not a number: {row[c]!r}") from None
            if not math.isfinite(v):
                raise ValidationError(f"{path}: row {lineno}, column {c!r}: non-finite value")
            X[i, j] = v

    ids = tuple(row["example_id"] for _, row in rows) if "example_id" in header else ()
    if ids and len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate example_id values")
    group_columns = {c: tuple(row[c] for _, row in rows) for c in group_cols}
    tags = tuple(frozenset(_tag(c, row[c]) for c in group_cols if row[c] != "") for _, row in rows)

    task, targets, labels = None, None, ()
    if "label" in header:
        task = "classification"
        universe = list(label_order or ())
        targets = np.empty(n, dtype=np.int64)
        for i, (lineno, row) in enumerate(rows):
            y = row["label"]
            if y == "":
                raise ValidationError(f"{path}: row {lineno}: missing label")
            if y not in universe:
                if label_order:
                    raise ValidationError(f"{path}: row {lineno}: label {y!r} not in label universe")
                universe.append(y)
            targets[i] = universe.index(y)
        labels = tuple(universe)
    elif "target" in header:
        task = "regression"
        targets = np.empty(n)
        for i, (lineno, row) in enumerate(rows):
            try:
                targets[i] = float(row["target"])
            except ValueError:
                raise ValidationError(f"{path}: row {lineno}: target is not a number: {row['target']!r}") from None
            if not math.isfinite(targets[i]):
                raise ValidationError(f"{path}: row {lineno}: non-finite target")
    return Dataset(X, targets, task, labels, ids, tags, tuple(feat_cols), group_columns)


def write(dataset: Dataset, path: str | Path) -> None:
    """Write ``dataset`` as CSV (inverse of :func:`load`)."""
    header = ["example_id", *dataset.feature_names]
    if dataset.targets is not None:
        header.append("label" if dataset.task == "classification" else "target")
    header.extend(dataset.group_columns)
    truths = dataset.target_values() if dataset.targets is not None else None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [dataset.ids[i], *(_fmt(v) for v in dataset.features[i])]
            if truths is not None:
                row.append(truths[i] if dataset.task == "classification" else _fmt(truths[i]))
            row.extend(vals[i] for vals in dataset.group_columns.values())
            w.writerow(row)


# ----- splits ----- #


@dataclass(frozen=True)
class SplitConfig:
    """Train/calibration/tuning fractions; the test split takes the rest."""

    train: float = 0.5
    calibration: float = 0.25
    tuning: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.train <= 0 or self.calibration <= 0 or self.tuning < 0:
            raise ValidationError("train and calibration fractions must be positive, tuning nonnegative")
        if self.train + self.calibration + self.tuning > 1 + 1e-12:
            raise ValidationError("split fractions sum to more than 1")


class Splits(NamedTuple):
    train: Dataset
    calibration: Dataset
    tuning: Dataset
    test: Dataset


def split(dataset: Dataset, config: SplitConfig) -> Splits:
    """Disjoint, exhaustive random split, reproducible under ``config.seed``."""
    n = len(dataset)
    perm = np.random.default_rng(config.seed).permutation(n)
    n_train = int(round(config.train * n))
    n_cal = int(round(config.calibration * n))
    n_tune = int(round(config.tuning * n))
    if n_train + n_cal + n_tune > n:
        n_tune = max(0, n - n_train - n_cal)
    a, b, c = n_train, n_train + n_cal, n_train + n_cal + n_tune
    parts = [np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:c]), np.sort(perm[c:])]
    return Splits(*(dataset.take(p) for p in parts))


# ----- synthetic generators ----- #


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator family, its parameters and the seed that fixes the output."""

    family: str
    params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0


def _gaussian_classes(rng: np.random.Generator, n: int = 1000, n_classes: int = 3, dim: int = 2, separation: float = 2.0, sd: float = 1.0) -> Dataset:
    if dim < 2:
        raise ValidationError("gaussian-classes needs dim >= 2")
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = separation * np.cos(angles)
    means[:, 1] = separation * np.sin(angles)
    y = rng.integers(0, n_classes, size=n)
    X = means[y] + sd * rng.standard_normal((n, dim))
    labels = tuple(f"c{j}" for j in range(n_classes))
    return Dataset(X, y, "classification", labels, tuple(f"g{i}" for i in range(n)))


def _heteroscedastic(rng: np.random.Generator, n: int = 1000, dim: int = 1, slope: float = 2.0, sd: float = 0.5) -> Dataset:
    X = rng.uniform(-3.0, 3.0, size=(n, dim))
    noise = sd * (1.0 + np.abs(X[:, 0])) * rng.standard_normal(n)
    y = slope * X.sum(axis=1) + noise
    return Dataset(X, y, "regression", (), tuple(f"h{i}" for i in range(n)))


def _region_biased(
    rng: np.random.Generator,
    n: int = 3000,
    proportions: tuple = (0.7, 0.15, 0.15),
    noise_scales: tuple = (1.0, 3.0, 3.0),
    slope: float = 1.0,
) -> Dataset:
    """1-D regression where the (feature-invisible) region sets the noise scale.

    Region ``r`` (named "1", "2", ...) appears in the ``group_region`` column
    and as tag ``region=r``.  Region 1 is the majority by default.
    """
    p = np.asarray(proportions, dtype=float)
    scales = np.asarray(noise_scales, dtype=float)
    if p.shape != scales.shape or np.any(p < 0) or not math.isclose(p.sum(), 1.0):
        raise ValidationError("proportions must be nonnegative, sum to 1 and match noise_scales")
    region = rng.choice(len(p), size=n, p=p)
    x = rng.uniform(0.0, 10.0, size=n)
    y = slope * x + scales[region] * rng.standard_normal(n)
    names = tuple(str(r + 1) for r in region)
    return Dataset(
        x.reshape(-1, 1), y, "regression", (), tuple(f"r{i}" for i in range(n)),
        tuple(frozenset({f"region={r}"}) for r in names), ("x",), {"group_region": names},
    )


def _changepoint_stream(
    rng: np.random.Generator,
    length: int = 500,
    change_at: int = 250,
    shift: float = 3.0,
    sd: float = 1.0,
    mean: float = 0.0,
    dim: int = 1,
) -> Dataset:
    X = mean + sd * rng.standard_normal((length, dim))
    X[change_at:, :] += shift * sd
    return Dataset(X, ids=tuple(f"s{i}" for i in range(length)))


_FAMILIES = {
    "gaussian-classes": _gaussian_classes,
    "linear-regression-heteroscedastic": _heteroscedastic,
    "region-biased": _region_biased,
    "changepoint-stream": _changepoint_stream,
}


def generate(spec: SyntheticSpec) -> Dataset:
    """Draw a synthetic dataset; the seed fixes the output bit for bit."""
    try:
        fn = _FAMILIES[spec.family]
    except KeyError:
        raise ValidationError(f"unknown generator family {spec.family!r}; choose from {sorted(_FAMILIES)}") from None
    try:
        return fn(np.random.default_rng(spec.seed), **spec.params)
    except TypeError as exc:
        raise ValidationError(f"bad parameters for {spec.family!r}: {exc}") from None
