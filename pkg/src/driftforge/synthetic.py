"""Synthetic OHLCV panels and return series with controllable drift, for tests and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PanelSeries

DAY = np.timedelta64(86400, "s")
EPOCH = np.datetime64("2020-01-01T00:00:00", "s")


@dataclass(frozen=True)
class PanelSpec:
    """Recipe for a synthetic panel.

    Log prices share a random-walk factor plus a stationary AR(1) spread per
    stock, so every pair is cointegrated. Returns carry an AR(1) component with
    coefficient ``ar_coef``; from ``shift_at`` on (a fraction of T) the return
    volatility is multiplied by ``vol_shift`` and ``ar_coef_after`` takes over.
    ``drift`` adds a mean that grows linearly over the whole range.
    """

    n_stocks: int = 4
    n_timestamps: int = 400
    vol: float = 0.01
    ar_coef: float = 0.0
    ar_coef_after: float | None = None
    spread_coef: float = 0.9
    spread_vol: float = 0.005
    shift_at: float | None = None
    vol_shift: float = 1.0
    drift: float = 0.0
    start_price: float = 100.0
    garch: tuple[float, float, float] | None = None


def garch_returns(n: int, rng: np.random.Generator, omega: float = 1e-6, a: float = 0.1, b: float = 0.85) -> np.ndarray:
    """GARCH(1,1) returns with Gaussian innovations, started at the stationary variance."""
    if a + b >= 1:
        raise ValueError("a + b must be below 1 for a stationary variance")
    var = omega / (1.0 - a - b)
    out = np.empty(n)
    for t in range(n):
        out[t] = np.sqrt(var) * rng.standard_normal()
        var = omega + a * out[t] ** 2 + b * var
    return out


def _factor_returns(spec: PanelSpec, rng: np.random.Generator) -> np.ndarray:
    T = spec.n_timestamps
    if spec.garch is not None:
        eps = garch_returns(T, rng, *spec.garch)
    else:
        eps = spec.vol * rng.standard_normal(T)
    cut = T if spec.shift_at is None else int(round(spec.shift_at * T))
    coef = np.full(T, spec.ar_coef)
    scale = np.ones(T)
    if cut < T:
        coef[cut:] = spec.ar_coef if spec.ar_coef_after is None else spec.ar_coef_after
        scale[cut:] = spec.vol_shift
    r = np.empty(T)
    prev = 0.0
    for t in range(T):
        prev = coef[t] * prev + scale[t] * eps[t]
        r[t] = prev
    return r + spec.drift * np.arange(T) / max(T - 1, 1)


def synthetic_closes(spec: PanelSpec, seed: int) -> np.ndarray:
    """(T, S) close prices."""
    rng = np.random.default_rng(seed)
    T, S = spec.n_timestamps, spec.n_stocks
    factor = np.cumsum(_factor_returns(spec, rng))
    spread = np.zeros((T, S))
    for t in range(1, T):
        spread[t] = spec.spread_coef * spread[t - 1] + spec.spread_vol * rng.standard_normal(S)
    level = np.log(spec.start_price) + rng.normal(0.0, 0.2, S)
    return np.exp(level + factor[:, None] + spread)


def bars_from_closes(closes: np.ndarray, rng: np.random.Generator, intraday: float = 0.004) -> np.ndarray:
    """(T, S, 5) OHLCV values consistent with the given closes."""
    T, S = closes.shape
    opens = np.empty_like(closes)
    opens[0] = closes[0]
    opens[1:] = closes[:-1] * np.exp(intraday * 0.5 * rng.standard_normal((T - 1, S)))
    top = np.maximum(opens, closes)
    bottom = np.minimum(opens, closes)
    highs = top * np.exp(intraday * np.abs(rng.standard_normal((T, S))))
    lows = bottom * np.exp(-intraday * np.abs(rng.standard_normal((T, S))))
    rets = np.vstack([np.zeros((1, S)), np.diff(np.log(closes), axis=0)])
    volume = np.exp(12.0 + 20.0 * np.abs(rets) + 0.3 * rng.standard_normal((T, S)))
    return np.stack([opens, highs, lows, closes, volume], axis=2)


def synthetic_panel(spec: PanelSpec = PanelSpec(), seed: int = 0) -> PanelSeries:
    closes = synthetic_closes(spec, seed)
    values = bars_from_closes(closes, np.random.default_rng([seed, 1]))
    timestamps = EPOCH + DAY * np.arange(spec.n_timestamps)
    return PanelSeries(values, timestamps, tuple(f"S{k:02d}" for k in range(spec.n_stocks)))


def drifting_features(n: int, n_features: int, rng: np.random.Generator, shift: float = 3.0) -> np.ndarray:
    """(n, F) Gaussian rows whose mean rises linearly from 0 to ``shift``."""
    return rng.standard_normal((n, n_features)) + np.linspace(0.0, shift, n)[:, None]
