"""Conformal test martingales for drift and selection-bias warnings.

A fixed scorer turns each arriving example into a nonconformity score.
The score gets a smoothed p-value against every score seen before it
(optionally preceded by a development sample, which is treated as the
start of the stream), and a betting martingale multiplies in
``f(p) = eps * p ** (eps - 1)``.  Under exchangeability the p-values are
i.i.d. uniform, so by Ville's inequality the martingale reaches ``1/delta``
with probability at most ``delta``.

Everything is tracked in log space.  The default bet is the uniform
mixture over ``eps in {0.05, 0.10, ..., 0.95}``.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import Dataset, LabeledExample, NotFittedError, ValidationError

DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass(frozen=True)
class BettingConfig:
    """Power calibrator (``kind="power"``) or grid mixture of them."""

    kind: str = "mixture"
    epsilon: float = 0.5
    grid: tuple[float, ...] = DEFAULT_GRID

    def __post_init__(self) -> None:
        if self.kind not in ("power", "mixture"):
            raise ValidationError(f"unknown betting kind {self.kind!r}")
        eps = self.epsilons
        if eps.size == 0 or np.any((eps <= 0) | (eps >= 1)):
            raise ValidationError("betting epsilons must lie in (0, 1)")

    @property
    def epsilons(self) -> np.ndarray:
        return np.array([self.epsilon] if self.kind == "power" else self.grid, dtype=float)

    def log_factors(self, p: Any) -> np.ndarray:
        """``log f(p)`` per component; trailing axis indexes components."""
        p = np.asarray(p, dtype=float)[..., None]
        eps = self.epsilons
        return np.log(eps) + (eps - 1.0) * np.log(p)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "epsilon": self.epsilon, "grid": list(self.grid)}


def alarm_threshold_for(false_alarm_prob: float) -> float:
    """Ville threshold ``c = 1/delta``: under exchangeability ``P(sup M >= c) <= delta``."""
    d = float(false_alarm_prob)
    if not (0.0 < d < 1.0):
        raise ValidationError(f"false alarm probability must lie in (0, 1), got {false_alarm_prob!r}")
    return 1.0 / d


@dataclass
class MartingaleState:
    """Running log-martingale of one monitor.

    ``log_components`` holds one log-martingale per betting epsilon; the
    reported value is their log-mean.
    """

    betting: BettingConfig = field(default_factory=BettingConfig)
    threshold: float = 20.0
    log_components: np.ndarray | None = None
    n: int = 0
    log_martingale: float = 0.0
    alarmed: bool = False
    first_alarm: int | None = None
    history: list[tuple[int, float]] = field(default_factory=list)
    p_history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.threshold > 1:
            raise ValidationError("alarm threshold must exceed 1")
        if self.log_components is None:
            self.log_components = np.zeros(self.betting.epsilons.size)

    def update(self, p: float) -> "MartingaleState":
        if not (0.0 < p <= 1.0):
            raise ValidationError(f"p-value outside (0, 1]: {p!r}")
        self.log_components = self.log_components + self.betting.log_factors(p)
        self.n += 1
        self.log_martingale = float(logsumexp(self.log_components) - math.log(self.log_components.size))
        self.p_history.append(float(p))
        self.history.append((self.n, self.log_martingale))
        if not self.alarmed and self.log_martingale >= math.log(self.threshold):
            self.alarmed = True
            self.first_alarm = self.n
        return self


class OnlineConformalSource:
    """Smoothed online p-values from a fixed scorer.

    Parameters
    ----------
    scorer : object, optional
        Fitted scorer.  Label-free scorers (``task is None``) score the
        features; supervised scorers score the example with its own target.
    rng : numpy Generator
        Stream of smoothing draws.
    reference : sequence of float, optional
        Scores of a development sample observed before the monitored
        stream.  They enter the reservoir but are not bet on.
    """

    def __init__(self, scorer: Any = None, rng: np.random.Generator | None = None, reference: Sequence[float] | None = None):
        self.scorer = scorer
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._sorted: list[float] = []
        self.arrivals: list[float] = []
        for s in (() if reference is None else reference):
            self._push(float(s))

    @property
    def size(self) -> int:
        return len(self._sorted)

    def _push(self, score: float) -> None:
        if not math.isfinite(score):
            raise ValidationError("stream score must be finite")
        bisect.insort(self._sorted, score)
        self.arrivals.append(score)

    def score(self, example: LabeledExample) -> float:
        if self.scorer is None:
            raise NotFittedError("source has no scorer; use observe_score")
        if getattr(self.scorer, "task", None) is None:
            return float(self.scorer.score(example))
        if example.target is None:
            raise ValidationError("supervised monitoring needs labeled stream examples")
        return float(self.scorer.score(example, example.target))

    def p_value(self, score: float, tau: float | None = None) -> float:
        """Smoothed p-value of ``score`` against the reservoir, then store it."""
        score = float(score)
        if not math.isfinite(score):
            raise ValidationError("stream score must be finite")
        if tau is None:
            tau = float(self.rng.random())
        m = len(self._sorted)
        left = bisect.bisect_left(self._sorted, score)
        right = bisect.bisect_right(self._sorted, score)
        p = ((m - right) + tau * (right - left + 1)) / (m + 1)
        self._push(score)
        return p


def observe_score(source: OnlineConformalSource, state: MartingaleState, score: float) -> MartingaleState:
    p = source.p_value(score)
    if p <= 0.0:
        # tau == 0 with no larger scores; the draw has probability zero
        p = np.nextafter(0.0, 1.0)
    return state.update(p)


def observe(source: OnlineConformalSource, state: MartingaleState, example: LabeledExample) -> MartingaleState:
    """Feed one stream example through the source and the martingale."""
    return observe_score(source, state, source.score(example))


class DriftMonitor:
    """Source + martingale bundled as a single-writer state machine."""

    def __init__(
        self,
        scorer: Any = None,
        false_alarm: float = 0.05,
        betting: BettingConfig | None = None,
        seed: int | None = 0,
        reference: Sequence[float] | None = None,
    ):
        self.source = OnlineConformalSource(scorer, np.random.default_rng(seed), reference)
        self.state = MartingaleState(betting or BettingConfig(), alarm_threshold_for(false_alarm))

    def observe(self, example: LabeledExample) -> dict:
        observe(self.source, self.state, example)
        return self.record()

    def observe_score(self, score: float) -> dict:
        observe_score(self.source, self.state, score)
        return self.record()

    def record(self) -> dict:
        s = self.state
        return {"n": s.n, "p": s.p_history[-1], "log_martingale": s.log_martingale, "alarmed": s.alarmed}

    def run(self, examples: Iterable[LabeledExample]) -> Iterable[str]:
        """Yield one JSON line per observed example."""
        for ex in examples:
            yield json.dumps(self.observe(ex), sort_keys=True)


# ----- vectorised paths for Monte-Carlo work ----- #


def batch_online_p_values(scores: np.ndarray, rng: np.random.Generator, reference: np.ndarray | None = None) -> np.ndarray:
    """Online smoothed p-values for many independent streams at once.

    Parameters
    ----------
    scores : ndarray of shape (n_streams, length)
    rng : numpy Generator
    reference : ndarray of shape (n_streams, m0), optional
        Development scores preceding each stream.

    Returns
    -------
    ndarray of shape (n_streams, length)
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    S, n = scores.shape
    ref = np.zeros((S, 0)) if reference is None else np.atleast_2d(np.asarray(reference, dtype=float))
    full = np.concatenate([ref, scores], axis=1)
    m0, N = ref.shape[1], full.shape[1]
    tau = rng.random((S, n))
    # dense 1-based rank of every score within its own stream
    order = np.argsort(full, axis=1, kind="stable")
    srt = np.take_along_axis(full, order, axis=1)
    dense = np.concatenate([np.ones((S, 1), dtype=np.int64), 1 + np.cumsum(srt[:, 1:] != srt[:, :-1], axis=1)], axis=1)
    rank = np.empty_like(dense)
    np.put_along_axis(rank, order, dense, axis=1)
    # Fenwick tree of counts per rank, one row per stream
    tree = np.zeros((S, N + 1), dtype=np.int64)
    rows = np.arange(S)

    def add(idx: np.ndarray) -> None:
        idx = idx.copy()
        while True:
            live = idx <= N
            if not live.any():
                return
            tree[rows[live], idx[live]] += 1
            idx[live] += idx[live] & -idx[live]

    def prefix(idx: np.ndarray) -> np.ndarray:
        idx = idx.copy()
        total = np.zeros(S, dtype=np.int64)
        while True:
            live = idx > 0
            if not live.any():
                return total
            total[live] += tree[rows[live], idx[live]]
            idx[live] -= idx[live] & -idx[live]

    for j in range(m0):
        add(rank[:, j])
    out = np.empty((S, n))
    for j in range(n):
        m = m0 + j
        r = rank[:, m]
        le = prefix(r)
        eq = le - prefix(r - 1)
        gt = m - le
        out[:, j] = (gt + tau[:, j] * (eq + 1)) / (m + 1)
        add(r)
    return np.maximum(out, np.nextafter(0.0, 1.0))


def log_martingale_paths(p: np.ndarray, betting: BettingConfig | None = None) -> np.ndarray:
    """Log-martingale after each step for one or many p-value sequences."""
    betting = betting or BettingConfig()
    p = np.asarray(p, dtype=float)
    log_p = np.log(p)
    eps = betting.epsilons
    total = None
    for e in eps:
        comp = np.cumsum(math.log(e) + (e - 1.0) * log_p, axis=-1)
        total = comp if total is None else np.logaddexp(total, comp)
    return total - math.log(eps.size)


# ----- changepoint benchmark ----- #


@dataclass(frozen=True)
class ChangepointConfig:
    """Gaussian mean-shift stream with a k-NN distance scorer.

    ``change_at`` is the 0-based index of the first post-change item;
    the shift is in units of the pre-change standard deviation.
    """

    length: int = 500
    change_at: int = 250
    shift: float = 3.0
    sd: float = 1.0
    dim: int = 1
    n_train: int = 200
    n_reference: int = 200
    k: int = 5
    false_alarm: float = 0.05
    betting: BettingConfig = field(default_factory=BettingConfig)
    seed: int = 0


@dataclass(frozen=True)
class DetectionReport:
    first_alarm: int | None
    change_at: int
    detection_delay: int | None
    false_alarm: bool
    final_log_martingale: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def changepoint_benchmark(config: ChangepointConfig) -> DetectionReport:
    """Run one monitored stream and report when (and whether) it alarmed.

    ``first_alarm`` is the 0-based index of the stream item at which the
    martingale first reached the threshold.
    """
    from .data_io import SyntheticSpec, generate
    from .scorers import KnnDistanceScorer

    rng = np.random.default_rng(config.seed)
    seeds = rng.integers(0, 2**63 - 1, size=3)
    params = {"dim": config.dim, "sd": config.sd, "mean": 0.0}
    train = generate(SyntheticSpec("changepoint-stream", {**params, "length": config.n_train, "change_at": config.n_train}, int(seeds[0])))
    ref = generate(SyntheticSpec("changepoint-stream", {**params, "length": config.n_reference, "change_at": config.n_reference}, int(seeds[1])))
    stream = generate(
        SyntheticSpec(
            "changepoint-stream",
            {**params, "length": config.length, "change_at": config.change_at, "shift": config.shift},
            int(seeds[2]),
        )
    )
    scorer = KnnDistanceScorer(config.k).fit(train)
    monitor = DriftMonitor(None, config.false_alarm, config.betting, int(seeds[2]) ^ 0x5EED, scorer.scores(ref) if len(ref) else None)
    for s in scorer.scores(stream):
        monitor.observe_score(float(s))
    st = monitor.state
    first = None if st.first_alarm is None else st.first_alarm - 1
    false_alarm = first is not None and first < config.change_at
    delay = first - config.change_at if first is not None and not false_alarm else None
    return DetectionReport(first, config.change_at, delay, false_alarm, st.log_martingale)
