"""Conditional validity: Mondrian calibration and IFACM adjustment.

Mondrian conformal prediction calibrates each category of a taxonomy
separately.  IFACM (iterative feedback-adjusted conformity measure) keeps a
single calibration set but rescales scores per region,
``a' = a * exp(delta_g)``, and tunes the ``delta_g`` on a separate tuning
split until every region's coverage is near the target.  The update rule,
step size and stopping rule are this package's own choices:

    delta_g <- delta_g - eta * ((1 - epsilon) - coverage_g)

and the returned state is the iterate with the smallest recorded maximum
coverage deviation, not the last one.
"""

from __future__ import annotations

import json
import logging
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Hashable, Sequence

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
from .icp import CalibrationSet, _draw_tau, _intervals, interval_quantile, p_values

log = logging.getLogger(__name__)

MARGINAL_ONLY = "marginal-only"
UNSEEN_REGION = "unseen-region"

_OPS: dict[str, Callable[[Any, Any], bool]] = {
    "==": operator.eq,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}
_TARGET_COLUMNS = ("label", "target")


@dataclass(frozen=True)
class Predicate:
    """``column <op> value`` on a feature, target or group column."""

    column: str
    op: str
    value: Any

    def __post_init__(self) -> None:
        if self.op not in _OPS and self.op != "in":
            raise ValidationError(f"unknown comparator {self.op!r}")
        if self.op == "in" and not isinstance(self.value, (list, tuple, set, frozenset)):
            raise ValidationError("'in' needs a list of values")

    def evaluate(self, values: np.ndarray) -> np.ndarray:
        if self.op == "in":
            allowed = set(self.value) | {str(v) for v in self.value}
            return np.array([v in allowed or str(v) in allowed for v in values], dtype=bool)
        fn = _OPS[self.op]
        out = np.empty(len(values), dtype=bool)
        for i, v in enumerate(values):
            a, b = v, self.value
            if isinstance(a, str) != isinstance(b, str):
                if self.op == "==":
                    a, b = str(a), str(b)
                else:
                    try:
                        a, b = float(a), float(b)
                    except ValueError:
                        raise ValidationError(f"cannot compare {a!r} {self.op} {b!r}") from None
            out[i] = fn(a, b)
        return out


@dataclass(frozen=True)
class Category:
    """A named conjunction of predicates."""

    name: str
    predicates: tuple[Predicate, ...]


@dataclass(frozen=True)
class Taxonomy:
    """Maps each (example, candidate target) to exactly one category.

    Categories are tried in order and the first match wins; anything left
    over goes to ``rest``.  A taxonomy may instead wrap a plain function
    ``fn(dataset, targets) -> sequence of category names``.
    """

    categories: tuple[Category, ...] = ()
    rest: str = "rest"
    function: Callable[[Dataset, Sequence | None], Sequence[str]] | None = field(default=None, compare=False)
    function_names: tuple[str, ...] = ()
    function_uses_target: bool = False

    @property
    def names(self) -> tuple[str, ...]:
        if self.function is not None:
            return self.function_names
        return tuple(c.name for c in self.categories) + (self.rest,)

    @property
    def uses_target(self) -> bool:
        if self.function is not None:
            return self.function_uses_target
        return any(p.column in _TARGET_COLUMNS for c in self.categories for p in c.predicates)

    @classmethod
    def from_function(cls, fn: Callable, names: Sequence[str], uses_target: bool = False) -> "Taxonomy":
        return cls(function=fn, function_names=tuple(names), function_uses_target=uses_target)

    @classmethod
    def single(cls, name: str = "all") -> "Taxonomy":
        """The one-category taxonomy."""
        return cls((), rest=name)

    @classmethod
    def from_dict(cls, spec: dict) -> "Taxonomy":
        """Build from ``{"categories": [{"name", "predicates": [...]}], "rest"}``."""
        if not isinstance(spec, dict) or not isinstance(spec.get("categories"), list):
            raise ValidationError("taxonomy must be an object with a 'categories' list")
        cats = []
        for i, c in enumerate(spec["categories"]):
            try:
                preds = tuple(Predicate(p["feature"], p["op"], p["value"]) for p in c["predicates"])
                cats.append(Category(str(c["name"]), preds))
            except (KeyError, TypeError):
                raise ValidationError(f"taxonomy.categories[{i}] is malformed") from None
        names = [c.name for c in cats]
        if len(set(names)) != len(names):
            raise ValidationError("taxonomy category names must be unique")
        return cls(tuple(cats), rest=str(spec.get("rest", "rest")))

    @classmethod
    def from_json(cls, path: str | Path) -> "Taxonomy":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        if self.function is not None:
            raise ValidationError("function taxonomies cannot be serialised")
        return {
            "categories": [
                {"name": c.name, "predicates": [{"feature": p.column, "op": p.op, "value": p.value} for p in c.predicates]}
                for c in self.categories
            ],
            "rest": self.rest,
        }

    def assign(self, data: Dataset, targets: Sequence | None = None) -> np.ndarray:
        """Category name per example.

        ``targets`` overrides the dataset's own targets, which is how
        label-conditional taxonomies are evaluated per candidate label.
        """
        n = len(data)
        if self.function is not None:
            out = np.asarray(list(self.function(data, targets)), dtype=object)
            if out.shape != (n,):
                raise ValidationError("taxonomy function must return one category per example")
            return out
        out = np.full(n, self.rest, dtype=object)
        undecided = np.ones(n, dtype=bool)
        cache: dict[str, np.ndarray] = {}

        def column(name: str) -> np.ndarray:
            if name not in cache:
                if name in _TARGET_COLUMNS and targets is not None:
                    cache[name] = np.asarray(list(targets), dtype=object)
                else:
                    cache[name] = data.column(name)
            return cache[name]

        for cat in self.categories:
            match = undecided.copy()
            for p in cat.predicates:
                match &= p.evaluate(column(p.column))
            out[match] = cat.name
            undecided &= ~match
        return out


class MondrianPredictor:
    """One calibration set per category, with a pooled fallback.

    Categories with fewer than ``min_size`` calibration scores fall back to
    the pooled calibration set and their predictions are flagged
    ``"marginal-only"``.
    """

    def __init__(self, per_category: dict[Hashable, CalibrationSet], pooled: CalibrationSet, min_size: int = 20):
        self.per_category = dict(per_category)
        self.pooled = pooled
        self.min_size = int(min_size)

    @classmethod
    def from_scores(cls, scores: Sequence[float], categories: Sequence[Hashable], min_size: int = 20) -> "MondrianPredictor":
        s = np.asarray(scores, dtype=float)
        cats = np.asarray(list(categories), dtype=object)
        if s.shape != cats.shape:
            raise ValidationError("scores and categories must align")
        per = {c: CalibrationSet.from_scores(s[cats == c]) for c in dict.fromkeys(cats.tolist())}
        return cls(per, CalibrationSet.from_scores(s), min_size)

    def calibration_for(self, category: Hashable) -> tuple[CalibrationSet, bool]:
        cal = self.per_category.get(category)
        if cal is None or cal.n < self.min_size:
            return self.pooled, True
        return cal, False

    def p_value(self, score: float, category: Hashable, tau: float | None = None) -> tuple[float, bool]:
        """p-value against the category's own calibration set.

        Returns the p-value and whether it fell back to pooled calibration.
        """
        cal, fallback = self.calibration_for(category)
        pv = p_values(cal.scores, score) if tau is None else p_values(cal.scores, score, tau)
        return float(pv), fallback

    def p_values(self, scores: np.ndarray, categories: np.ndarray, tau: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        scores = np.asarray(scores, dtype=float)
        categories = np.asarray(categories, dtype=object)
        out = np.empty(scores.shape)
        fallback = np.zeros(scores.shape, dtype=bool)
        for c in dict.fromkeys(categories.ravel().tolist()):
            mask = categories == c
            cal, fb = self.calibration_for(c)
            t = None if tau is None else np.asarray(tau)[mask]
            out[mask] = p_values(cal.scores, scores[mask], t)
            fallback[mask] = fb
        return out, fallback

    def to_dict(self) -> dict:
        return {
            "min_size": self.min_size,
            "pooled": self.pooled.scores.tolist(),
            "categories": {str(c): cal.scores.tolist() for c, cal in self.per_category.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MondrianPredictor":
        per = {c: CalibrationSet(np.asarray(v, dtype=float)) for c, v in d["categories"].items()}
        return cls(per, CalibrationSet(np.asarray(d["pooled"], dtype=float)), d["min_size"])


def mondrian_p_value(pred: MondrianPredictor, score: float, category: Hashable, tau: float | None = None) -> tuple[float, bool]:
    return pred.p_value(score, category, tau)


def _flags(mask: np.ndarray, flag: str) -> tuple[frozenset[str], ...]:
    hit, none = frozenset({flag}), frozenset()
    return tuple(hit if m else none for m in mask)


class MondrianClassifier:
    """Mondrian conformal classifier; label-dependent taxonomies are
    evaluated once per candidate label."""

    def __init__(self, scorer: Any, taxonomy: Taxonomy, mondrian: MondrianPredictor):
        self.scorer = scorer
        self.taxonomy = taxonomy
        self.mondrian = mondrian

    @classmethod
    def fit(cls, scorer: Any, taxonomy: Taxonomy, calibration_data: Dataset, min_size: int = 20) -> "MondrianClassifier":
        if calibration_data.targets is None or len(calibration_data) == 0:
            raise ValidationError("calibration data must be labeled and nonempty")
        cats = taxonomy.assign(calibration_data)
        return cls(scorer, taxonomy, MondrianPredictor.from_scores(scorer.scores(calibration_data), cats, min_size))

    @property
    def labels(self) -> tuple:
        return tuple(self.scorer.labels)

    def categories(self, data: Dataset) -> np.ndarray:
        """Category matrix of shape (n, n_labels)."""
        if self.taxonomy.uses_target:
            return np.column_stack([self.taxonomy.assign(data, [y] * len(data)) for y in self.labels])
        cats = self.taxonomy.assign(data)
        return np.repeat(cats[:, None], len(self.labels), axis=1)

    def predict(
        self,
        data: Dataset,
        conf: ConfidenceLevel | float,
        smoothed: bool = False,
        rng: np.random.Generator | None = None,
        tau: Any = None,
    ) -> SetBatch:
        conf = as_confidence(conf)
        scores = self.scorer.label_scores(data)
        t = _draw_tau(rng, scores.shape, tau) if smoothed else None
        pv, fb = self.mondrian.p_values(scores, self.categories(data), t)
        return SetBatch(self.labels, pv, conf.epsilon, _flags(fb.any(axis=1), MARGINAL_ONLY))


class MondrianRegressor:
    """Mondrian conformal regressor; the taxonomy must not read the target."""

    def __init__(self, scorer: Any, taxonomy: Taxonomy, mondrian: MondrianPredictor):
        if taxonomy.uses_target:
            raise ValidationError("regression taxonomies cannot depend on the target")
        self.scorer = scorer
        self.taxonomy = taxonomy
        self.mondrian = mondrian

    @classmethod
    def fit(cls, scorer: Any, taxonomy: Taxonomy, calibration_data: Dataset, min_size: int = 20) -> "MondrianRegressor":
        if taxonomy.uses_target:
            raise ValidationError("regression taxonomies cannot depend on the target")
        if calibration_data.targets is None or len(calibration_data) == 0:
            raise ValidationError("calibration data must be labeled and nonempty")
        cats = taxonomy.assign(calibration_data)
        return cls(scorer, taxonomy, MondrianPredictor.from_scores(scorer.scores(calibration_data), cats, min_size))

    def predict(self, data: Dataset, conf: ConfidenceLevel | float, **_: Any) -> IntervalBatch:
        conf = as_confidence(conf)
        y_hat, sigma = self.scorer.predict(data)
        cats = self.taxonomy.assign(data)
        q = np.empty(len(data))
        fb = np.zeros(len(data), dtype=bool)
        for c in dict.fromkeys(cats.tolist()):
            cal, fallback = self.mondrian.calibration_for(c)
            mask = cats == c
            q[mask] = interval_quantile(cal.scores, conf.epsilon)
            fb[mask] = fallback
        lo, hi = _intervals(y_hat, sigma, q)
        return IntervalBatch(lo, hi, _flags(fb, MARGINAL_ONLY))


def mondrian_predictor(scorer: Any, taxonomy: Taxonomy, calibration_data: Dataset, min_size: int = 20):
    if scorer.task == "classification":
        return MondrianClassifier.fit(scorer, taxonomy, calibration_data, min_size)
    return MondrianRegressor.fit(scorer, taxonomy, calibration_data, min_size)


# ----- IFACM ----- #


@dataclass(frozen=True)
class IfacmIteration:
    """One pass of the feedback loop: adjustments used and tuning coverage seen."""

    iteration: int
    adjustments: dict[str, float]
    coverage: dict[str, float]
    max_deviation: float


@dataclass(frozen=True)
class IfacmState:
    """Fitted per-region log-adjustments and the calibration they imply."""

    adjustments: dict[str, float]
    level: float
    eta: float
    iterations: int
    tolerance: float
    calibration: CalibrationSet
    history: tuple[IfacmIteration, ...] = ()
    best_iteration: int | None = None
    frozen: frozenset[str] = frozenset()
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.adjustments.values()):
            raise ValidationError("IFACM adjustments must be finite")
        if len(self.history) > self.iterations:
            raise ValidationError("history longer than the iteration budget")

    def factors(self, regions: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Multiplicative score factors per example and an unseen-region mask."""
        regions = list(regions)
        unseen = np.array([r not in self.adjustments for r in regions], dtype=bool)
        delta = np.array([self.adjustments.get(r, 0.0) for r in regions], dtype=float)
        return np.exp(delta), unseen

    def to_dict(self) -> dict:
        return {
            "adjustments": self.adjustments,
            "level": self.level,
            "eta": self.eta,
            "iterations": self.iterations,
            "tolerance": self.tolerance,
            "calibration": self.calibration.scores.tolist(),
            "best_iteration": self.best_iteration,
            "frozen": sorted(self.frozen),
            "warnings": list(self.warnings),
            "history": [
                {"iteration": h.iteration, "adjustments": h.adjustments, "coverage": h.coverage, "max_deviation": h.max_deviation}
                for h in self.history
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IfacmState":
        hist = tuple(IfacmIteration(h["iteration"], h["adjustments"], h["coverage"], h["max_deviation"]) for h in d["history"])
        return cls(
            d["adjustments"], d["level"], d["eta"], d["iterations"], d["tolerance"],
            CalibrationSet(np.asarray(d["calibration"], dtype=float)), hist, d["best_iteration"],
            frozenset(d["frozen"]), tuple(d["warnings"]),
        )


def _check_nonnegative(scores: np.ndarray, what: str) -> None:
    if np.any(scores < 0):
        raise ValidationError(f"IFACM rescales scores multiplicatively; {what} scores must be nonnegative")


def fit_adjustments(
    cal_scores: Sequence[float],
    cal_regions: Sequence[str],
    tune_scores: Sequence[float],
    tune_regions: Sequence[str],
    conf: ConfidenceLevel | float,
    eta: float = 1.0,
    iterations: int = 20,
    tolerance: float = 0.01,
) -> IfacmState:
    """Run the IFACM feedback loop on precomputed true-target scores.

    Tuning coverage of region ``g`` is the fraction of its tuning examples
    whose adjusted score has deterministic p-value above ``epsilon``
    against the adjusted calibration scores.
    """
    conf = as_confidence(conf)
    if eta < 0 or not math.isfinite(eta):
        raise ValidationError("eta must be a finite nonnegative number")
    if iterations < 0:
        raise ValidationError("iterations must be nonnegative")
    cal = np.asarray(cal_scores, dtype=float)
    tune = np.asarray(tune_scores, dtype=float)
    cal_r = np.asarray([str(r) for r in cal_regions], dtype=object)
    tune_r = np.asarray([str(r) for r in tune_regions], dtype=object)
    if cal.shape != cal_r.shape or tune.shape != tune_r.shape:
        raise ValidationError("scores and regions must align")
    if cal.size == 0:
        raise ValidationError("calibration split is empty")
    _check_nonnegative(cal, "calibration")
    _check_nonnegative(tune, "tuning")

    regions = list(dict.fromkeys(cal_r.tolist() + tune_r.tolist()))
    active = [g for g in regions if np.any(tune_r == g)]
    frozen = frozenset(g for g in regions if g not in active)
    warnings = tuple(f"region {g!r} has no tuning examples; adjustment frozen at 0" for g in sorted(frozen))
    for w in warnings:
        log.warning(w)

    target = conf.level
    delta = {g: 0.0 for g in regions}
    history: list[IfacmIteration] = []
    for t in range(1, iterations + 1):
        cal_adj = np.sort(cal * np.exp([delta[g] for g in cal_r]))
        tune_adj = tune * np.exp([delta[g] for g in tune_r])
        covered = p_values(cal_adj, tune_adj) > conf.epsilon
        coverage = {g: float(covered[tune_r == g].mean()) for g in active}
        max_dev = max((abs(c - target) for c in coverage.values()), default=0.0)
        history.append(IfacmIteration(t, dict(delta), coverage, max_dev))
        log.debug("ifacm iteration %d: max deviation %.4f", t, max_dev)
        if max_dev < tolerance:
            break
        for g in active:
            delta[g] = delta[g] - eta * (target - coverage[g])

    best = min(history, key=lambda h: h.max_deviation) if history else None
    final = dict(best.adjustments) if best else {g: 0.0 for g in regions}
    calibration = CalibrationSet.from_scores(cal * np.exp([final[g] for g in cal_r]))
    return IfacmState(
        final, target, float(eta), int(iterations), float(tolerance), calibration,
        tuple(history), best.iteration if best else None, frozen, warnings,
    )


def ifacm_fit(
    scorer: Any,
    calibration_data: Dataset,
    tuning_data: Dataset,
    taxonomy: Taxonomy,
    conf: ConfidenceLevel | float,
    eta: float = 1.0,
    iterations: int = 20,
    tolerance: float = 0.01,
) -> IfacmState:
    """Fit IFACM adjustments for ``scorer`` on the given splits.

    ``taxonomy`` must be a function of the example only.
    """
    if taxonomy.uses_target:
        raise ValidationError("IFACM regions must not depend on the target")
    if calibration_data.targets is None or tuning_data.targets is None:
        raise ValidationError("calibration and tuning splits must be labeled")
    if set(calibration_data.ids) & set(tuning_data.ids):
        raise ValidationError("tuning split overlaps the calibration split")
    return fit_adjustments(
        scorer.scores(calibration_data), taxonomy.assign(calibration_data),
        scorer.scores(tuning_data), taxonomy.assign(tuning_data),
        conf, eta, iterations, tolerance,
    )


def ifacm_predict(
    state: IfacmState,
    scorer: Any,
    x: LabeledExample,
    region: str,
    conf: ConfidenceLevel | float,
    candidates: Sequence[Hashable] | None = None,
    tau: float | Sequence[float] | None = None,
) -> SetPrediction | IntervalPrediction:
    """IFACM prediction for one example whose region is ``region``.

    Classification returns a set over ``candidates`` (default: all
    labels), smoothed when ``tau`` is given; regression returns an interval.
    """
    conf = as_confidence(conf)
    factor, unseen = state.factors([region])
    flags = frozenset({UNSEEN_REGION}) if unseen[0] else frozenset()
    if scorer.task == "classification":
        universe = tuple(scorer.labels if candidates is None else candidates)
        scores = np.array([scorer.score(x, y) for y in universe], dtype=float) * factor[0]
        _check_nonnegative(scores, "test")
        pv = p_values(state.calibration.scores, scores) if tau is None else p_values(
            state.calibration.scores, scores, np.broadcast_to(np.asarray(tau, dtype=float), scores.shape)
        )
        return SetPrediction(dict(zip(universe, map(float, pv))), conf.epsilon, flags)
    ids = (x.example_id,) if x.example_id is not None else ()
    y_hat, sigma = scorer.predict(Dataset(np.asarray(x.features, dtype=float).reshape(1, -1), ids=ids))
    q = interval_quantile(state.calibration.scores, conf.epsilon)
    lo, hi = _intervals(y_hat, sigma / factor, q)
    return IntervalPrediction(float(lo[0]), float(hi[0]), flags)


class IfacmPredictor:
    """Batch IFACM predictor holding one fitted state per confidence level."""

    def __init__(self, scorer: Any, taxonomy: Taxonomy, states: dict[float, IfacmState]):
        self.scorer = scorer
        self.taxonomy = taxonomy
        self.states = dict(states)

    @classmethod
    def fit(
        cls,
        scorer: Any,
        taxonomy: Taxonomy,
        calibration_data: Dataset,
        tuning_data: Dataset,
        levels: Sequence[float],
        eta: float = 1.0,
        iterations: int = 20,
        tolerance: float = 0.01,
    ) -> "IfacmPredictor":
        states = {
            float(lv): ifacm_fit(scorer, calibration_data, tuning_data, taxonomy, lv, eta, iterations, tolerance)
            for lv in levels
        }
        return cls(scorer, taxonomy, states)

    def state(self, conf: ConfidenceLevel | float) -> IfacmState:
        level = as_confidence(conf).level
        for lv, st in self.states.items():
            if math.isclose(lv, level, rel_tol=0, abs_tol=1e-12):
                return st
        raise ValidationError(f"IFACM was not fitted at level {level}")

    @property
    def labels(self) -> tuple:
        return tuple(self.scorer.labels)

    def predict(
        self,
        data: Dataset,
        conf: ConfidenceLevel | float,
        smoothed: bool = False,
        rng: np.random.Generator | None = None,
        tau: Any = None,
    ):
        conf = as_confidence(conf)
        st = self.state(conf)
        factor, unseen = st.factors(self.taxonomy.assign(data))
        flags = _flags(unseen, UNSEEN_REGION)
        if self.scorer.task == "classification":
            scores = self.scorer.label_scores(data) * factor[:, None]
            _check_nonnegative(scores, "test")
            t = _draw_tau(rng, scores.shape, tau) if smoothed else None
            pv = p_values(st.calibration.scores, scores, t) if smoothed else p_values(st.calibration.scores, scores)
            return SetBatch(self.labels, pv, conf.epsilon, flags)
        y_hat, sigma = self.scorer.predict(data)
        lo, hi = _intervals(y_hat, sigma / factor, interval_quantile(st.calibration.scores, conf.epsilon))
        return IntervalBatch(lo, hi, flags)
