"""CutMix for spectrogram segments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CutMixConfig:
    alpha: float = 0.7
    enabled: bool = True
    prob: float = 0.5

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"CutMix alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"CutMix probability must lie in [0, 1], got {self.prob}")


def sample_beta(alpha: float, rng: np.random.Generator) -> float:
    """One Beta(alpha, alpha) draw as a ratio of two Gamma(alpha) draws."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    while True:
        x = rng.gamma(alpha)
        y = rng.gamma(alpha)
        if x + y > 0:
            lam = x / (x + y)
            if 0.0 < lam < 1.0:
                return float(lam)


def cut_box(shape: tuple, lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Rectangle ``(f0, f1, t0, t1)`` covering about ``1 - lam`` of a ``(bands, frames)`` plane.

    Side lengths are ``sqrt(1 - lam)`` of each axis, at least one cell, and
    the box sits fully inside the plane.
    """
    bands, frames = shape
    side = math.sqrt(max(0.0, 1.0 - lam))
    h = min(bands, max(1, int(round(side * bands))))
    w = min(frames, max(1, int(round(side * frames))))
    f0 = int(rng.integers(0, bands - h + 1))
    t0 = int(rng.integers(0, frames - w + 1))
    return f0, f0 + h, t0, t0 + w


def cutmix(spec_a: np.ndarray, y_a, spec_b: np.ndarray, y_b, lam: float, rng: np.random.Generator | None = None,
           box: tuple | None = None):
    """Paste a box of ``spec_b`` onto ``spec_a`` across every plane.

    Returns ``(mixed, y_mixed, lam_realized)`` with ``lam_realized`` the exact
    fraction of cells still taken from ``spec_a`` and
    ``y_mixed = lam_realized * y_a + (1 - lam_realized) * y_b``.
    """
    spec_a = np.asarray(spec_a)
    spec_b = np.asarray(spec_b)
    if spec_a.shape != spec_b.shape:
        raise ValueError(f"CutMix segments differ in shape: {spec_a.shape} vs {spec_b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1.0 and box is None:
        return spec_a.copy(), y_a, 1.0
    if box is None:
        box = cut_box(spec_a.shape[-2:], lam, rng if rng is not None else np.random.default_rng())
    f0, f1, t0, t1 = box
    mixed = spec_a.copy()
    mixed[..., f0:f1, t0:t1] = spec_b[..., f0:f1, t0:t1]
    bands, frames = spec_a.shape[-2:]
    lam_r = 1.0 - (f1 - f0) * (t1 - t0) / (bands * frames)
    return mixed, lam_r * y_a + (1.0 - lam_r) * y_b, lam_r
