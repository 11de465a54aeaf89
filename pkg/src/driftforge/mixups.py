"""Multi-stock mix-ups and cointegration-guided partner selection.

Mix-ups are target-variant: the label is blended with the same weight as the
features. They operate on windows that have already been normalised so that
two stocks at different price levels can be combined.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from statsmodels.tsa.adfvalues import mackinnonp

from .data import CLOSE, ConfigurationError, PanelSeries
from .transforms import round_half_up

MIN_COINT_LENGTH = 50


class MixKind(enum.IntEnum):
    CUT_MIX = 0
    LINEAR_MIX = 1
    AMPLITUDE_MIX = 2
    TAILORED_MIX = 3


# ---------------------------------------------------------------------------
# Engle-Granger cointegration
# ---------------------------------------------------------------------------


def schwert_lag(n: int) -> int:
    return int(math.floor(12.0 * (n / 100.0) ** 0.25))


def adf_tstat(resid: np.ndarray, lag: int) -> float:
    """t-statistic of the lagged level in an ADF regression with no deterministic terms."""
    dx = np.diff(resid)
    nobs = len(dx) - lag
    if nobs <= lag + 2:
        raise ValueError(f"series too short for {lag} ADF lags")
    cols = [resid[lag:-1]]
    for i in range(1, lag + 1):
        cols.append(dx[lag - i : len(dx) - i])
    X = np.column_stack(cols)
    y = dx[lag:]
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid_ols = y - X @ coef
    sigma2 = resid_ols @ resid_ols / (nobs - X.shape[1])
    cov = sigma2 * np.linalg.inv(X.T @ X)
    return float(coef[0] / math.sqrt(cov[0, 0]))


def engle_granger_pvalue(a: np.ndarray, b: np.ndarray, lag: int | None = None) -> float:
    """Two-step residual test: OLS of ``a`` on ``[1, b]``, then ADF on the residuals.

    The p-value comes from MacKinnon's response surface for two variables with
    a constant in the cointegrating regression.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"series must be 1-D and equal length, got {a.shape} and {b.shape}")
    if len(a) < MIN_COINT_LENGTH:
        raise ValueError(f"need at least {MIN_COINT_LENGTH} observations, got {len(a)}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("series contain non-finite values")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("zero-variance series")
    X = np.column_stack([np.ones_like(b), b])
    coef, *_ = np.linalg.lstsq(X, a, rcond=None)
    resid = a - X @ coef
    if np.ptp(resid) <= 1e-12 * max(np.abs(a).max(), 1.0):
        return 0.0
    stat = adf_tstat(resid, schwert_lag(len(a)) if lag is None else lag)
    return float(np.clip(mackinnonp(stat, regression="c", N=2), 0.0, 1.0))


@dataclass(frozen=True)
class CointMatrix:
    """Row ``a``, column ``j`` holds the p-value of regressing stock a on stock j; NaN marks invalid."""

    pvalues: np.ndarray
    stock_ids: tuple[str, ...]

    def candidates(self, a: int) -> np.ndarray:
        row = self.pvalues[a]
        return np.array([j for j in range(len(row)) if j != a and np.isfinite(row[j])], dtype=np.int64)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stock", *self.stock_ids])
            for sid, row in zip(self.stock_ids, self.pvalues):
                w.writerow([sid, *("" if not np.isfinite(v) else repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "CointMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        ids = tuple(rows[0][1:])
        vals = np.array([[float(c) if c else np.nan for c in r[1:]] for r in rows[1:]])
        return cls(vals, ids)


def build_coint_matrix(train: PanelSeries, price_feature: int = CLOSE) -> CointMatrix:
    S = train.n_stocks
    if S < 2:
        raise ConfigurationError("cointegration matrix needs at least 2 stocks")
    prices = train.values[:, :, price_feature]
    pv = np.full((S, S), np.nan)
    for a in range(S):
        for j in range(S):
            if a == j:
                continue
            try:
                pv[a, j] = engle_granger_pvalue(prices[:, a], prices[:, j])
            except ValueError:
                pass
    return CointMatrix(pv, train.stock_ids)


# ---------------------------------------------------------------------------
# Partner sampling
# ---------------------------------------------------------------------------


def mix_target_distribution(a: int, lam: float, coint: CointMatrix, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Candidate stocks and their selection probabilities for source ``a``.

    Low strengths favour strongly cointegrated partners, high strengths favour
    weakly cointegrated ones. ``k`` is clamped to the number of valid candidates.
    """
    if k < 1:
        raise ValueError(f"candidate count must be positive, got {k}")
    cand = coint.candidates(a)
    if len(cand) == 0:
        raise ValueError(f"stock {a} has no valid cointegration partners")
    p = coint.pvalues[a, cand]
    if lam <= 0.5:
        beta = 1.0 - lam
        scores = -np.power(p, beta)
    else:
        beta = lam
        scores = np.power(p, 1.0 / beta)
    order = np.argsort(-scores, kind="stable")[: min(k, len(cand))]
    top = scores[order]
    q = np.exp(top - top.max())
    q /= q.sum()
    return cand[order], q


def sample_mix_target(a: int, lam: float, coint: CointMatrix, k: int, rng: np.random.Generator) -> int:
    cand, q = mix_target_distribution(a, lam, coint, k)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(q), u, side="right"))
    return int(cand[min(idx, len(cand) - 1)])


# ---------------------------------------------------------------------------
# Mix-up operations
# ---------------------------------------------------------------------------


def _polar(spec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.abs(spec), np.angle(spec)


def cut_mix(src: np.ndarray, tgt: np.ndarray, lam: float, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    L = src.shape[0]
    span = round_half_up(lam * L)
    out = src.copy()
    if span > 0:
        start = int(rng.integers(0, L - span + 1))
        out[start : start + span] = tgt[start : start + span]
    return out, span / L


def linear_mix(src: np.ndarray, tgt: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    return (1.0 - lam) * src + lam * tgt, lam


def amplitude_mix(src: np.ndarray, tgt: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Blend Fourier magnitudes per feature while keeping the source phase."""
    L = src.shape[0]
    ms, ps = _polar(np.fft.rfft(src, axis=0))
    mt, _ = _polar(np.fft.rfft(tgt, axis=0))
    mag = (1.0 - lam) * ms + lam * mt
    return np.fft.irfft(mag * np.exp(1j * ps), n=L, axis=0), lam


def tailored_mix(src: np.ndarray, tgt: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Blend magnitude and phase at the target's dominant frequencies only."""
    L = src.shape[0]
    ms, ps = _polar(np.fft.rfft(src, axis=0))
    mt, pt = _polar(np.fft.rfft(tgt, axis=0))
    n_bins = ms.shape[0]
    q = min(max(1, round_half_up(lam * L / 4)), n_bins)
    mag, phase = ms.copy(), ps.copy()
    for f in range(src.shape[1]):
        bins = np.argsort(-mt[:, f], kind="stable")[:q]
        mag[bins, f] = (1.0 - lam) * ms[bins, f] + lam * mt[bins, f]
        # shorter arc between the two phases
        delta = np.angle(np.exp(1j * (pt[bins, f] - ps[bins, f])))
        phase[bins, f] = ps[bins, f] + lam * delta
    return np.fft.irfft(mag * np.exp(1j * phase), n=L, axis=0), lam


def apply_mixup(
    kind: MixKind,
    lam: float,
    src: tuple[np.ndarray, float],
    tgt: tuple[np.ndarray, float],
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    xs, ys = np.asarray(src[0], dtype=np.float64), float(src[1])
    xt, yt = np.asarray(tgt[0], dtype=np.float64), float(tgt[1])
    if xs.shape != xt.shape or xs.ndim != 2:
        raise ValueError(f"source and target windows must share an (L, F) shape, got {xs.shape} and {xt.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"strength must lie in [0, 1], got {lam}")
    kind = MixKind(kind)
    if kind is MixKind.CUT_MIX:
        out, w = cut_mix(xs, xt, lam, rng)
    elif kind is MixKind.LINEAR_MIX:
        out, w = linear_mix(xs, xt, lam)
    elif kind is MixKind.AMPLITUDE_MIX:
        out, w = amplitude_mix(xs, xt, lam)
    else:
        out, w = tailored_mix(xs, xt, lam)
    return out, (1.0 - w) * ys + w * yt


def mix_names(kinds: Sequence[MixKind]) -> list[str]:
    return [MixKind(k).name.lower() for k in kinds]
