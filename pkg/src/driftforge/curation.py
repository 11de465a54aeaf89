"""Financial-integrity curation, rolling normalisation and Binary Mix compensation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CLOSE, HIGH, LOW, OPEN, STD_FLOOR, VOLUME, RollingStats


@dataclass(frozen=True)
class BinaryMixConfig:
    b_max: float = 0.5
    bins: int = 16

    def __post_init__(self) -> None:
        if not 0.0 <= self.b_max <= 1.0:
            raise ValueError(f"b_max must lie in [0, 1], got {self.b_max}")
        if self.bins < 2:
            raise ValueError(f"bins must be at least 2, got {self.bins}")


@dataclass(frozen=True)
class MiEstimate:
    mi_xy: float
    mi_xx: float
    feature: int = -1


def enforce_kline_consistency(window: np.ndarray, columns: tuple[int, int, int, int] = (OPEN, HIGH, LOW, CLOSE)) -> np.ndarray:
    """Set each row's high to the max and low to the min of its four prices; open/close stay put."""
    w = np.array(window, dtype=np.float64)
    o, h, lo, c = columns
    prices = w[..., [o, h, lo, c]]
    if not np.all(np.isfinite(prices)):
        raise ValueError("non-finite prices")
    w[..., h] = prices.max(axis=-1)
    w[..., lo] = prices.min(axis=-1)
    return w


PRICE_FLOOR = 1e-8


def curate(window: np.ndarray) -> np.ndarray:
    """Positive prices, K-line repair and non-negative volume, for OHLCV-ordered windows."""
    w = np.array(window, dtype=np.float64)
    if not np.all(np.isfinite(w[..., :VOLUME])):
        raise ValueError("non-finite prices")
    np.maximum(w[..., :VOLUME], PRICE_FLOOR, out=w[..., :VOLUME])
    w = enforce_kline_consistency(w)
    if w.shape[-1] > VOLUME:
        np.maximum(w[..., VOLUME], 0.0, out=w[..., VOLUME])
    return w


def _check_stats(window: np.ndarray, mean: np.ndarray | None, std: np.ndarray | None) -> None:
    if mean is None or std is None:
        raise ValueError("missing rolling statistics")
    if mean.shape != window.shape or std.shape != window.shape:
        raise ValueError(f"statistics shape {mean.shape} does not cover window shape {window.shape}")


def rolling_normalize(window: np.ndarray, mean: np.ndarray, std: np.ndarray, eps: float = STD_FLOOR) -> np.ndarray:
    _check_stats(window, mean, std)
    return (window - mean) / np.maximum(std, eps)


def rolling_denormalize(z: np.ndarray, mean: np.ndarray, std: np.ndarray, eps: float = STD_FLOOR) -> np.ndarray:
    _check_stats(z, mean, std)
    return z * np.maximum(std, eps) + mean


def normalize_at(window: np.ndarray, stats: RollingStats, stock: int, end: int) -> np.ndarray:
    mean, std = stats.at(stock, end, window.shape[0])
    return rolling_normalize(window, mean, std, stats.eps)


def denormalize_at(z: np.ndarray, stats: RollingStats, stock: int, end: int) -> np.ndarray:
    mean, std = stats.at(stock, end, z.shape[0])
    return rolling_denormalize(z, mean, std, stats.eps)


def _plugin_mi(x: np.ndarray, y: np.ndarray, bins: int) -> float:
    joint, _, _ = np.histogram2d(x, y, bins=bins)
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    return float(max(np.sum(pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])), 0.0))


def estimate_mutual_information(x: np.ndarray, y: np.ndarray, bins: int = 16, feature: int = -1) -> MiEstimate:
    """Histogram plug-in MI in nats, with MI(x; x) as the similarity ceiling."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"expected equal-length 1-D series, got {x.shape} and {y.shape}")
    if len(x) < bins:
        raise ValueError(f"need at least {bins} observations, got {len(x)}")
    mi_xx = _plugin_mi(x, x, bins)
    if mi_xx <= 0.0:
        raise ValueError("x is constant; MI baseline undefined")
    return MiEstimate(_plugin_mi(x, y, bins), mi_xx, feature)


def binary_mix_weight(x: np.ndarray, y: np.ndarray, cfg: BinaryMixConfig, rng: np.random.Generator) -> tuple[float, MiEstimate]:
    varying = np.flatnonzero(np.ptp(x, axis=0) > 0)
    if len(varying) == 0:
        raise ValueError("every feature of the original window is constant")
    k = int(varying[rng.integers(len(varying))])
    est = estimate_mutual_information(x[:, k], y[:, k], cfg.bins, k)
    ratio = min(est.mi_xy, est.mi_xx) / est.mi_xx
    b_mix = float(np.clip(cfg.b_max - ratio * cfg.b_max, 0.0, cfg.b_max))
    return b_mix, est


def binary_mix(x: np.ndarray, y: np.ndarray, cfg: BinaryMixConfig, rng: np.random.Generator) -> np.ndarray:
    """Pull the augmented window ``y`` back toward the original ``x`` when they share little information."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    b_mix, _ = binary_mix_weight(x, y, cfg, rng)
    return b_mix * x + (1.0 - b_mix) * y
