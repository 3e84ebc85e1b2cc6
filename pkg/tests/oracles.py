"""Independent reference computations used by the tests.

Everything here is written from the definitions by direct counting, with
no calls into the package, so that disagreements point at real bugs.
"""

from __future__ import annotations

import math

import numpy as np


def det_p(cal, a) -> float:
    """Deterministic p-value by direct count."""
    return (sum(1 for c in cal if c >= a) + 1) / (len(cal) + 1)


def smooth_p(cal, a, tau) -> float:
    gt = sum(1 for c in cal if c > a)
    eq = sum(1 for c in cal if c == a)
    return (gt + tau * (eq + 1)) / (len(cal) + 1)


def interval_by_membership(cal, y_hat, sigma, eps):
    """Interval endpoints from the membership predicate ``det_p(|y - y_hat|/sigma) > eps``.

    The predicate is monotone in the residual, so the admitted residuals
    form a closed set ``[0, a*]`` where ``a*`` is the largest calibration
    score that is itself admitted (``det_p`` drops only just above a
    calibration score).  If even the largest residual is admitted the
    interval is the real line.
    """
    if det_p(cal, math.inf) > eps:
        return -math.inf, math.inf
    admitted = [c for c in cal if det_p(cal, c) > eps]
    a_star = max(admitted)
    return y_hat - a_star * sigma, y_hat + a_star * sigma


def grid_membership(cal, y_hat, sigma, eps, ys):
    return np.array([det_p(cal, abs(y - y_hat) / sigma) > eps for y in ys])


def mixture_martingale(ps, grid):
    """Arithmetic mean over the grid of the direct products of bets."""
    vals = []
    for e in grid:
        m = 1.0
        for p in ps:
            m *= e * p ** (e - 1.0)
        vals.append(m)
    return sum(vals) / len(vals)
