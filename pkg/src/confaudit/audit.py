"""Coverage, inefficiency, calibration curves and subgroup bias reports.

Conventions: an empty prediction set has size 0 and never covers; an
unbounded interval always covers but is left out of the mean width and
counted separately.  Calibration is tested with the exact two-sided
binomial test.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Hashable, Mapping, Sequence

import numpy as np
from scipy.stats import binom, binomtest

from .core import Dataset, IntervalBatch, SetBatch, ValidationError, as_batch, as_confidence

DEFAULT_GRID = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99)


def binomial_test(successes: int, n: int, level: float) -> float:
    """Exact two-sided binomial p-value for ``successes ~ Bin(n, level)``."""
    if n <= 0:
        raise ValidationError("binomial test needs n >= 1")
    return float(binomtest(int(successes), int(n), float(level)).pvalue)


def binomial_band(n: int, level: float, confidence: float = 0.99) -> tuple[float, float]:
    """Central ``confidence`` band of ``Bin(n, level) / n`` (as fractions)."""
    a = (1.0 - confidence) / 2.0
    return float(binom.ppf(a, n, level)) / n, float(binom.ppf(1.0 - a, n, level)) / n


def within_band(successes: int, n: int, level: float, confidence: float = 0.99) -> bool:
    lo, hi = binomial_band(n, level, confidence)
    # compare counts, not fractions, to avoid rounding at the edges
    return round(lo * n) <= successes <= round(hi * n)


def _hits(predictions: Any, truths: Sequence) -> tuple[SetBatch | IntervalBatch, np.ndarray]:
    batch = as_batch(predictions)
    truths = list(truths)
    if len(batch) != len(truths):
        raise ValidationError(f"{len(batch)} predictions but {len(truths)} truths")
    return batch, batch.contains(truths)


def _group_index(groups: Sequence | None, n: int) -> dict[Hashable, np.ndarray]:
    """Group -> boolean mask.  Set-valued entries put an example in several groups."""
    if groups is None:
        return {}
    groups = list(groups)
    if len(groups) != n:
        raise ValidationError(f"{len(groups)} group entries but {n} predictions")
    masks: dict[Hashable, np.ndarray] = {}
    for i, g in enumerate(groups):
        members = g if isinstance(g, (set, frozenset, list, tuple)) else (g,)
        for m in members:
            masks.setdefault(m, np.zeros(n, dtype=bool))[i] = True
    return masks


@dataclass(frozen=True)
class CoverageReport:
    marginal: float
    n: int
    per_group: dict[Hashable, float] = field(default_factory=dict)
    group_sizes: dict[Hashable, int] = field(default_factory=dict)


def coverage(predictions: Any, truths: Sequence, groups: Sequence | None = None) -> CoverageReport:
    """Fraction of predictions containing the truth, overall and per group."""
    _, hit = _hits(predictions, truths)
    n = len(hit)
    if n == 0:
        raise ValidationError("no predictions to score")
    per, sizes = {}, {}
    for g, mask in _group_index(groups, n).items():
        sizes[g] = int(mask.sum())
        per[g] = int(hit[mask].sum()) / sizes[g]
    return CoverageReport(int(hit.sum()) / n, n, per, sizes)


@dataclass(frozen=True)
class InefficiencyReport:
    """N-criterion summary.

    ``mean_size`` is the mean set size (classification) or the mean width of
    bounded intervals (regression; ``None`` if every interval is unbounded).
    """

    kind: str
    mean_size: float | None
    n: int
    empty_rate: float = 0.0
    unbounded_count: int = 0
    per_group: dict[Hashable, float | None] = field(default_factory=dict)


def _mean_size(batch: SetBatch | IntervalBatch, mask: np.ndarray) -> float | None:
    if isinstance(batch, SetBatch):
        return float(batch.sizes[mask].mean()) if mask.any() else None
    bounded = mask & ~batch.unbounded
    return float(batch.widths[bounded].mean()) if bounded.any() else None


def inefficiency(predictions: Any, groups: Sequence | None = None) -> InefficiencyReport:
    batch = as_batch(predictions)
    n = len(batch)
    everything = np.ones(n, dtype=bool)
    per = {g: _mean_size(batch, m) for g, m in _group_index(groups, n).items()}
    if isinstance(batch, SetBatch):
        return InefficiencyReport("set", _mean_size(batch, everything), n, float((batch.sizes == 0).mean()), 0, per)
    return InefficiencyReport("interval", _mean_size(batch, everything), n, 0.0, int(batch.unbounded.sum()), per)


# ----- calibration curve ----- #


@dataclass(frozen=True)
class CurvePoint:
    level: float
    coverage: float
    binomial_p: float
    n: int


@dataclass(frozen=True)
class CalibrationCurve:
    points: tuple[CurvePoint, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "coverage", "binomial_p", "n"])
        for p in self.points:
            w.writerow([repr(p.level), repr(p.coverage), repr(p.binomial_p), p.n])
        return buf.getvalue()


def calibration_curve(
    predictor: Any,
    data: Dataset,
    grid: Sequence[float] = DEFAULT_GRID,
    smoothed: bool = False,
    rng: np.random.Generator | None = None,
) -> CalibrationCurve:
    """Empirical coverage and binomial calibration test at each grid level."""
    if len(data) == 0:
        raise ValidationError("evaluation data is empty")
    if data.targets is None:
        raise ValidationError("evaluation data must be labeled")
    truths = data.target_values()
    points = []
    for level in grid:
        conf = as_confidence(level)
        preds = predictor.predict(data, conf, smoothed=smoothed, rng=rng)
        _, hit = _hits(preds, truths)
        k = int(hit.sum())
        points.append(CurvePoint(conf.level, k / len(hit), binomial_test(k, len(hit), conf.level), len(hit)))
    return CalibrationCurve(tuple(points))


# ----- full audit of one predictor ----- #


@dataclass(frozen=True)
class AuditReport:
    level: float
    coverage: CoverageReport
    inefficiency: InefficiencyReport
    binomial_p: float
    curve: CalibrationCurve | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return _jsonable(d)


def audit(
    predictor: Any,
    data: Dataset,
    level: float,
    groups: Sequence | None = None,
    grid: Sequence[float] | None = DEFAULT_GRID,
    smoothed: bool = False,
    rng: np.random.Generator | None = None,
) -> AuditReport:
    """Coverage, inefficiency and calibration tests for one predictor."""
    if len(data) == 0:
        raise ValidationError("evaluation data is empty")
    truths = data.target_values()
    preds = predictor.predict(data, level, smoothed=smoothed, rng=rng)
    cov = coverage(preds, truths, groups)
    ineff = inefficiency(preds, groups)
    k = round(cov.marginal * cov.n)
    curve = calibration_curve(predictor, data, grid, smoothed, rng) if grid else None
    return AuditReport(float(level), cov, ineff, binomial_test(k, cov.n, level), curve)


# ----- subgroup bias ----- #


@dataclass(frozen=True)
class SubgroupRow:
    variant: str
    subgroup: str
    level: float
    n: int
    coverage: float | None
    mean_set_size: float | None
    flagged: bool | None
    binomial_p: float | None


@dataclass(frozen=True)
class SubgroupReport:
    """Per-variant, per-subgroup coverage and inefficiency.

    ``marginals`` holds the whole-population rows (subgroup ``"*"``).
    For regression ``mean_set_size`` is the mean bounded interval width.
    """

    rows: tuple[SubgroupRow, ...]
    marginals: tuple[SubgroupRow, ...]
    band: float = 0.99

    def row(self, variant: str, subgroup: str, level: float) -> SubgroupRow:
        for r in self.rows + self.marginals:
            if r.variant == variant and r.subgroup == subgroup and math.isclose(r.level, level):
                return r
        raise KeyError((variant, subgroup, level))

    def flagged(self, variant: str | None = None) -> list[SubgroupRow]:
        return [r for r in self.rows if r.flagged and (variant is None or r.variant == variant)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "subgroup", "level", "coverage", "mean_set_size", "flagged"])
        for r in self.rows:
            w.writerow([
                r.variant, r.subgroup, repr(r.level),
                "" if r.coverage is None else repr(r.coverage),
                "" if r.mean_set_size is None else repr(r.mean_set_size),
                "" if r.flagged is None else str(r.flagged).lower(),
            ])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return _jsonable({"band": self.band, "rows": [asdict(r) for r in self.rows], "marginals": [asdict(r) for r in self.marginals]})


def _row(variant: str, subgroup: str, level: float, hit: np.ndarray, size: float | None, band: float) -> SubgroupRow:
    n = int(hit.size)
    if n == 0:
        return SubgroupRow(variant, subgroup, level, 0, None, None, None, None)
    k = int(hit.sum())
    return SubgroupRow(
        variant, subgroup, level, n, k / n, size, not within_band(k, n, level, band), binomial_test(k, n, level)
    )


def subgroup_bias_report(
    variants: Mapping[str, Any],
    data: Dataset,
    subgroups: Any,
    levels: Sequence[float] = (0.8, 0.9),
    smoothed: bool = False,
    rng: np.random.Generator | None = None,
    band: float = 0.99,
) -> SubgroupReport:
    """Compare predictor variants on the same evaluation data.

    Parameters
    ----------
    variants : mapping of name -> predictor
        Each predictor has ``predict(data, level, smoothed=..., rng=...)``.
    data : Dataset
        Labeled evaluation split shared by all variants.
    subgroups : Taxonomy or sequence
        Either a taxonomy (evaluated on ``data`` with true targets; every
        category is reported even if empty) or one group id per example.
    band : float
        A subgroup is flagged when its covered count falls outside the
        central ``band`` interval of ``Bin(n_g, level)``.
    """
    if data.targets is None:
        raise ValidationError("evaluation data must be labeled")
    if hasattr(subgroups, "assign"):
        cats = subgroups.assign(data)
        names = list(subgroups.names)
    else:
        cats = np.asarray(list(subgroups), dtype=object)
        if cats.shape != (len(data),):
            raise ValidationError("need one subgroup id per evaluation example")
        names = list(dict.fromkeys(cats.tolist()))
    truths = data.target_values()
    rows, marginals = [], []
    for name, predictor in variants.items():
        for level in levels:
            level = as_confidence(level).level
            preds = predictor.predict(data, level, smoothed=smoothed, rng=rng)
            batch, hit = _hits(preds, truths)
            everything = np.ones(len(hit), dtype=bool)
            marginals.append(_row(name, "*", level, hit, _mean_size(batch, everything), band))
            for g in names:
                mask = cats == g
                rows.append(_row(name, str(g), level, hit[mask], _mean_size(batch, mask), band))
    return SubgroupReport(tuple(rows), tuple(marginals), band)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj: Any) -> str:
    """Deterministic JSON used for every report file."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2)
