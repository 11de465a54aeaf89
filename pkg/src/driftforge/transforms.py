"""Target-invariant single-stock transforms driven by a strength in [0, 1].

Every transform acts on a raw ``(L, F)`` window of one stock and leaves the
label alone. Strength 0 is the identity for all kinds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from statsmodels.tsa.seasonal import STL

JITTER_SCALE = 0.05
SCALE_SIGMA = 0.1
WARP_SIGMA = 0.2
WARP_KNOTS = 4
MAX_SEGMENTS = 8
STL_MIN_PERIOD = 5
STL_PERIOD_SPAN = 25


class TransformKind(enum.IntEnum):
    JITTER = 0
    SCALE = 1
    MAGNITUDE_WARP = 2
    PERMUTE = 3
    STL_AUGMENT = 4


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class StlComponents:
    trend: np.ndarray
    seasonal: np.ndarray
    residual: np.ndarray
    period: int


def stl_decompose(series: np.ndarray, period: int) -> StlComponents:
    """Additive LOESS decomposition; trend + seasonal + residual reproduces the input."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D series, got shape {x.shape}")
    if period < 2:
        raise ValueError(f"period must be at least 2, got {period}")
    if len(x) < 2 * period:
        raise ValueError(f"series of length {len(x)} is too short for period {period}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    res = STL(x, period=period).fit()
    trend = np.asarray(res.trend)
    seasonal = np.asarray(res.seasonal)
    return StlComponents(trend, seasonal, x - trend - seasonal, period)


def stl_period(lam: float, length: int) -> int:
    return min(max(STL_MIN_PERIOD + round_half_up(lam * STL_PERIOD_SPAN), 2), length // 2)


def n_segments(lam: float, length: int) -> int:
    return min(1 + round_half_up(lam * (MAX_SEGMENTS - 1)), length)


def jitter(window: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    sigma = lam * JITTER_SCALE * window.std(axis=0)
    return window + rng.standard_normal(window.shape) * sigma


def scale(window: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    factors = rng.normal(1.0, SCALE_SIGMA * lam, size=window.shape[1])
    return window * factors


def warp_curves(length: int, n_features: int, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth multiplicative curves, one per feature, pinned to 1 at both ends."""
    knots = np.linspace(0.0, length - 1.0, WARP_KNOTS + 2)
    vals = np.ones((WARP_KNOTS + 2, n_features))
    vals[1:-1] = rng.normal(1.0, WARP_SIGMA * lam, size=(WARP_KNOTS, n_features))
    return CubicSpline(knots, vals, axis=0, bc_type="natural")(np.arange(length))


def magnitude_warp(window: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    return window * warp_curves(window.shape[0], window.shape[1], lam, rng)


def permute(window: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    segs = np.array_split(np.arange(window.shape[0]), n_segments(lam, window.shape[0]))
    order = rng.permutation(len(segs))
    return window[np.concatenate([segs[k] for k in order])]


def stl_augment(window: np.ndarray, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Trend + seasonal + i.i.d. bootstrap of the residuals, per feature."""
    L = window.shape[0]
    if L < 4:
        raise ValueError(f"window of length {L} is too short for STL")
    period = stl_period(lam, L)
    out = np.empty_like(window)
    for f in range(window.shape[1]):
        comp = stl_decompose(window[:, f], period)
        out[:, f] = comp.trend + comp.seasonal + comp.residual[rng.integers(0, L, size=L)]
    return out


_DISPATCH = {
    TransformKind.JITTER: jitter,
    TransformKind.SCALE: scale,
    TransformKind.MAGNITUDE_WARP: magnitude_warp,
    TransformKind.PERMUTE: permute,
    TransformKind.STL_AUGMENT: stl_augment,
}


def apply_transform(kind: TransformKind, lam: float, window: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected an (L, F) window, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("window contains non-finite values")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"strength must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return w.copy()
    return _DISPATCH[TransformKind(kind)](w, lam, rng)
