"""Logistic score distribution: density, sampling and confidence intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScoreDistribution:
    """Logistic density over MUSHRA scores with location ``mu`` and scale ``exp(log_a)``."""

    mu: float
    log_a: float

    @property
    def a(self) -> float:
        return math.exp(self.log_a)

    @property
    def std(self) -> float:
        return std_of(self)


def nll(dist: ScoreDistribution, s):
    """Negative log-likelihood ``log(4a) - 2 log sech((s - mu) / 2a)`` of score(s) ``s``.

    This is ``-log`` of the logistic density, so it is bounded below by
    ``log(4a)`` and integrates (as ``exp(-nll)``) to one.  Intermediates use
    extended precision, leaving only the final rounding to float64.
    """
    ld = np.longdouble
    log_a = ld(dist.log_a)
    z = (np.asarray(s, dtype=ld) - ld(dist.mu)) / (ld(2) * np.exp(log_a))
    az = np.abs(z)
    # log 4 and the -2 log 2 inside log sech cancel exactly
    out = log_a + ld(2) * (az + np.log1p(np.exp(ld(-2) * az)))
    out = out.astype(np.float64)
    return float(out) if np.ndim(out) == 0 else out


def density(dist: ScoreDistribution, s):
    return np.exp(-np.asarray(nll(dist, s)))


def quantile(dist: ScoreDistribution, p):
    p = np.asarray(p, dtype=np.float64)
    return dist.mu + dist.a * np.log(p / (1.0 - p))


def sample(dist: ScoreDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. draws by inverse CDF ``mu + a log(u / (1 - u))``."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    u = rng.random(n)
    while np.any(u == 0.0):
        zero = u == 0.0
        u[zero] = rng.random(int(zero.sum()))
    return dist.mu + dist.a * np.log(u / (1.0 - u))


def std_of(dist: ScoreDistribution) -> float:
    return math.pi * math.exp(dist.log_a) / math.sqrt(3.0)


# --------------------------------------------------------------------------- Student t


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 1000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: float) -> float:
    x = df / (df + t * t)
    tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def _t_pdf(t: float, df: float) -> float:
    ln = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(ln - (df + 1) / 2 * math.log1p(t * t / df))


def t_quantile(p: float, df: float) -> float:
    """Inverse CDF of Student's t by bracketed Newton iteration."""
    if not (0.0 < p < 1.0):
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if df < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, df)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < p:
        lo, hi = hi, hi * 2.0
    t = 0.5 * (lo + hi)
    for _ in range(200):
        f = t_cdf(t, df) - p
        if f > 0:
            hi = t
        else:
            lo = t
        step = f / max(_t_pdf(t, df), 1e-300)
        nxt = t - step
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        if abs(nxt - t) <= 1e-13 * max(1.0, abs(t)):
            return nxt
        t = nxt
    return t


def confidence_interval(dist: ScoreDistribution, n_listeners: int, level: float = 0.95) -> tuple[float, float]:
    """t-based interval for the mean of ``n_listeners`` simulated scores."""
    if n_listeners < 2:
        raise ValueError(f"need at least 2 listeners for a confidence interval, got {n_listeners}")
    if not (0.0 < level < 1.0):
        raise ValueError(f"level must lie in (0, 1), got {level}")
    half = t_quantile((1.0 + level) / 2.0, n_listeners - 1) * std_of(dist) / math.sqrt(n_listeners)
    return dist.mu - half, dist.mu + half
