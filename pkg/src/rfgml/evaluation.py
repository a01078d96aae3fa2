"""Correlation metrics, MUSHRA aggregation and report generators."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .distribution import ScoreDistribution, t_quantile

HIDDEN_REFERENCE = "hidden_reference"


class ZeroVarianceError(ValueError):
    """A correlation was requested for a constant sequence."""


def _pair_arrays(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need two 1-d sequences of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 points for a correlation")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair_arrays(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVarianceError("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def rankdata(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    x, y = _pair_arrays(x, y)
    return pearson(rankdata(x), rankdata(y))


def safe_corr(fn, x, y) -> float:
    """``fn(x, y)`` or NaN when it is undefined."""
    try:
        return fn(x, y)
    except ValueError:
        return float("nan")


@dataclass
class SystemScore:
    excerpt_id: str
    system_id: str
    predicted: ScoreDistribution
    subjective_mean: float = float("nan")
    subjective_ci: tuple = (float("nan"), float("nan"))
    n_listeners: int = 0


def mu_metric(scores) -> float:
    """Mean predicted score over hidden-reference items."""
    refs = [s.predicted.mu for s in scores if s.system_id == HIDDEN_REFERENCE]
    if not refs:
        raise ValueError("no hidden_reference items to compute MU from")
    return float(np.mean(refs))


def aggregate_mushra(scores, level: float = 0.95) -> tuple[float, tuple | None, int]:
    """Mean, t-based CI (``None`` below two listeners) and listener count."""
    s = np.asarray(scores, dtype=np.float64)
    n = s.size
    if n == 0:
        raise ValueError("no scores to aggregate")
    mean = float(s.mean())
    if n < 2:
        return mean, None, n
    half = t_quantile((1.0 + level) / 2.0, n - 1) * float(s.std(ddof=1)) / math.sqrt(n)
    return mean, (mean - half, mean + half), n


def fmt(x) -> str:
    """Six significant digits, locale independent."""
    if isinstance(x, str):
        return x
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{float(x):.6g}"


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def correlation_summary(scores) -> dict:
    """Pooled R_p / R_s over (excerpt, system) points, plus MU when references exist."""
    pred = [s.predicted.mu for s in scores]
    subj = [s.subjective_mean for s in scores]
    out = {"rp": safe_corr(pearson, pred, subj), "rs": safe_corr(spearman, pred, subj), "n": len(scores)}
    try:
        out["mu"] = mu_metric(scores)
    except ValueError:
        out["mu"] = float("nan")
    return out


def per_excerpt_correlations(scores) -> dict:
    groups: dict[str, list] = {}
    for s in scores:
        groups.setdefault(s.excerpt_id, []).append(s)
    return {
        ex: (
            safe_corr(pearson, [s.predicted.mu for s in g], [s.subjective_mean for s in g]),
            safe_corr(spearman, [s.predicted.mu for s in g], [s.subjective_mean for s in g]),
        )
        for ex, g in groups.items()
    }


def condition_means(scores, conditions=None) -> tuple[list, np.ndarray, np.ndarray]:
    """Per-condition mean of predicted and subjective means across excerpts."""
    conds = list(conditions) if conditions is not None else sorted({s.system_id for s in scores})
    pred, subj = [], []
    for c in conds:
        rows = [s for s in scores if s.system_id == c]
        if not rows:
            raise ValueError(f"condition {c!r} has no items")
        pred.append(np.mean([s.predicted.mu for s in rows]))
        subj.append(np.mean([s.subjective_mean for s in rows]))
    return conds, np.array(pred), np.array(subj)


def scaling_report(predict, items, conditions) -> tuple[str, float]:
    """Mean predicted score per condition along an ordered ladder.

    ``items`` maps condition -> list of inputs accepted by ``predict`` (which
    returns a ScoreDistribution).  The rank correlation is between ladder
    position and mean score; NaN when fewer than two conditions or constant.
    """
    rows, means = [], []
    for rank, cond in enumerate(conditions):
        mus = [predict(x).mu for x in items[cond]]
        m = float(np.mean(mus))
        means.append(m)
        rows.append((cond, rank, m, len(mus)))
    rho = safe_corr(spearman, list(range(len(means))), means) if len(means) >= 2 else float("nan")
    text = to_csv(("condition", "rank", "mean_mu", "n_excerpts"), rows)
    return text, rho


def bandwidth_scatter(predict, bandwidth, files) -> tuple[str, float]:
    """Rows ``(file, bandwidth_hz, mu)`` and Pearson(bandwidth, mu); NaN when undefined."""
    files = list(files)
    if len(files) < 3:
        raise ValueError(f"bandwidth scatter needs at least 3 files, got {len(files)}")
    rows = []
    for f in files:
        rows.append((str(f), bandwidth(f), predict(f).mu))
    r = safe_corr(pearson, [r[1] for r in rows], [r[2] for r in rows])
    return to_csv(("file", "bandwidth_hz", "mu"), rows), r
