"""Drift metrics, validation/test proximity reports, stylized facts and the discriminative score."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist, pdist

from . import diffcore as dc
from .data import split_sizes
from .diffcore import OptimizerConfig, Tensor
from .models import GRUForecaster, InputEncoder

log = logging.getLogger(__name__)

PSI_EPS = 1e-6
PAIRS = ("train_test", "valid_test")
METRICS = ("psi", "ks", "mmd2")


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def psi_from_proportions(p: np.ndarray, q: np.ndarray, eps: float = PSI_EPS) -> float:
    p = np.where(np.asarray(p, dtype=np.float64) > 0, p, eps)
    q = np.where(np.asarray(q, dtype=np.float64) > 0, q, eps)
    return float(np.sum((p - q) * np.log(p / q)))


def quantile_edges(baseline: np.ndarray, bins: int) -> np.ndarray:
    """Distinct interior cut points at the baseline's 1/bins, ..., (bins-1)/bins quantiles."""
    if bins < 2:
        raise ValueError(f"bins must be at least 2, got {bins}")
    cuts = np.unique(np.quantile(baseline, np.linspace(0.0, 1.0, bins + 1)[1:-1]))
    cuts = cuts[(cuts > baseline.min()) & (cuts <= baseline.max())]
    if len(cuts) == 0:
        raise ValueError("baseline has a single distinct value; PSI needs at least 2 bins")
    return cuts


def psi(baseline, target, bins: int = 10, eps: float = PSI_EPS) -> float:
    """Population stability index of ``target`` against quantile bins of ``baseline``."""
    a = np.asarray(baseline, dtype=np.float64).ravel()
    b = np.asarray(target, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("psi needs non-empty samples")
    edges = quantile_edges(a, bins)
    k = len(edges) + 1
    p = np.bincount(np.searchsorted(edges, a, side="left"), minlength=k) / a.size
    q = np.bincount(np.searchsorted(edges, b, side="left"), minlength=k) / b.size
    return psi_from_proportions(p, q, eps)


def ks_statistic(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_statistic needs non-empty samples")
    return float(stats.ks_2samp(a, b).statistic)


def median_bandwidth(u: np.ndarray, v: np.ndarray) -> float:
    d = pdist(np.vstack([u, v]))
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def mmd2_rbf(u, v, bandwidth: float | str = "median") -> float:
    """Unbiased squared MMD with an RBF kernel exp(-|x - y|^2 / (2 s^2)).

    For equal sample sizes the paired U-statistic is used, which is exactly 0
    when ``u`` and ``v`` hold the same points; otherwise within-set diagonals
    are dropped and the cross term is the full mean.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u = u.reshape(len(u), -1)
    v = v.reshape(len(v), -1)
    n, m = len(u), len(v)
    if n < 2 or m < 2:
        raise ValueError(f"mmd2_rbf needs at least 2 points per set, got {n} and {m}")
    s = median_bandwidth(u, v) if bandwidth == "median" else float(bandwidth)
    if not s > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    g = 1.0 / (2.0 * s * s)
    kuu = np.exp(-g * cdist(u, u, "sqeuclidean"))
    kvv = np.exp(-g * cdist(v, v, "sqeuclidean"))
    kuv = np.exp(-g * cdist(u, v, "sqeuclidean"))
    if n == m:
        h = kuu + kvv - kuv - kuv.T
        np.fill_diagonal(h, 0.0)
        return float(h.sum() / (n * (n - 1)))
    within = (kuu.sum() - np.trace(kuu)) / (n * (n - 1)) + (kvv.sum() - np.trace(kvv)) / (m * (m - 1))
    return float(within - 2.0 * kuv.mean())


# ---------------------------------------------------------------------------
# Proximity across rolling folds
# ---------------------------------------------------------------------------


@dataclass
class DriftReport:
    """Rows of (fold, pair, metric, feature, value); ``feature`` is -1 for the aggregate."""

    rows: list[dict] = field(default_factory=list)

    def add(self, fold: int, pair: str, metric: str, value: float, feature: int = -1) -> None:
        self.rows.append({"fold": fold, "pair": pair, "metric": metric, "feature": feature, "value": float(value)})

    @property
    def folds(self) -> list[int]:
        return sorted({r["fold"] for r in self.rows})

    def value(self, fold: int, pair: str, metric: str) -> float:
        for r in self.rows:
            if (r["fold"], r["pair"], r["metric"], r["feature"]) == (fold, pair, metric, -1):
                return r["value"]
        raise KeyError((fold, pair, metric))

    def averages(self) -> dict[tuple[str, str], float]:
        return {
            (pair, metric): float(np.mean([self.value(f, pair, metric) for f in self.folds]))
            for pair in PAIRS
            for metric in METRICS
        }

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["fold", "pair", "metric", "feature", "value"], lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "value": repr(r["value"])})
            for (pair, metric), v in self.averages().items():
                w.writerow({"fold": "mean", "pair": pair, "metric": metric, "feature": -1, "value": repr(v)})


def expanding_fold_ends(n: int, n_folds: int, first: float = 0.5) -> list[int]:
    """End indices (exclusive) of expanding folds; the first covers ``first`` of the range, the last all of it."""
    if n_folds < 1:
        raise ValueError(f"need at least one fold, got {n_folds}")
    if n_folds == 1:
        return [n]
    return [int(round(e)) for e in np.linspace(first * n, n, n_folds)]


def _subsample(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    return x if len(x) <= k else x[np.sort(rng.choice(len(x), k, replace=False))]


def proximity_report(
    rows: np.ndarray,
    n_folds: int = 10,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    bins: int = 10,
    first: float = 0.5,
    mmd_points: int = 300,
    min_rows: int = 20,
    seed: int = 0,
) -> DriftReport:
    """Train-test and valid-test distances per expanding chronological fold.

    ``rows`` is (T, F) or (T, S, F) in time order; panels are pooled over stocks
    after splitting. Features are standardised with the fold's training moments.
    """
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3:
        raise ValueError(f"expected (T, F) or (T, S, F) rows, got shape {x.shape}")
    F = x.shape[2]
    report = DriftReport()
    rng = np.random.default_rng(seed)
    for fold, end in enumerate(expanding_fold_ends(len(x), n_folds, first)):
        try:
            n_tr, n_va, n_te = split_sizes(end, ratios)
        except ValueError as exc:
            log.warning("skipping fold %d: %s", fold, exc)
            continue
        if min(n_tr, n_va, n_te) < min_rows:
            log.warning("skipping fold %d: a part has fewer than %d timestamps", fold, min_rows)
            continue
        parts = [x[:n_tr], x[n_tr : n_tr + n_va], x[n_tr + n_va : end]]
        tr, va, te = (p.reshape(-1, F) for p in parts)
        mu = tr.mean(axis=0)
        sd = np.where(tr.std(axis=0) > 0, tr.std(axis=0), 1.0)
        tr, va, te = ((p - mu) / sd for p in (tr, va, te))
        te_sub = _subsample(te, mmd_points, rng)
        for pair, base in (("train_test", tr), ("valid_test", va)):
            psis, kss = [], []
            for f in range(F):
                try:
                    v = psi(base[:, f], te[:, f], bins)
                except ValueError:
                    v = 0.0
                psis.append(v)
                kss.append(ks_statistic(base[:, f], te[:, f]))
                report.add(fold, pair, "psi", v, f)
                report.add(fold, pair, "ks", kss[-1], f)
            report.add(fold, pair, "psi", float(np.mean(psis)))
            report.add(fold, pair, "ks", float(np.mean(kss)))
            report.add(fold, pair, "mmd2", mmd2_rbf(_subsample(base, mmd_points, rng), te_sub))
    if not report.rows:
        raise ValueError("every fold was too small")
    return report


# ---------------------------------------------------------------------------
# Stylized facts
# ---------------------------------------------------------------------------


def autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Sample autocorrelations at lags 0..max_lag (lag 0 is exactly 1)."""
    d = np.asarray(x, dtype=np.float64) - np.mean(x)
    denom = float(d @ d)
    if denom == 0:
        raise ValueError("zero-variance series")
    out = np.array([1.0] + [float(d[:-k] @ d[k:]) / denom for k in range(1, max_lag + 1)])
    return np.clip(out, -1.0, 1.0)


def trailing_std(x: np.ndarray, window: int) -> np.ndarray:
    """Population std of x[t-window+1 .. t]; NaN for the first window-1 positions."""
    x = np.asarray(x, dtype=np.float64)
    out = np.full(len(x), np.nan)
    if len(x) >= window:
        out[window - 1 :] = np.lib.stride_tricks.sliding_window_view(x, window).std(axis=1)
    return out


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.std() == 0 or b.std() == 0:
        return 0.0
    return float(np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0))


@dataclass
class StylizedFactsReport:
    acf_returns: np.ndarray
    acf_abs_returns: np.ndarray
    leverage: np.ndarray
    diff_acf_returns: np.ndarray | None = None
    diff_acf_abs_returns: np.ndarray | None = None
    diff_leverage: np.ndarray | None = None

    def rows(self) -> list[dict]:
        out = []
        for k in range(1, len(self.acf_returns)):
            row = {
                "lag": k,
                "acf_r": self.acf_returns[k],
                "acf_abs_r": self.acf_abs_returns[k],
                "leverage": self.leverage[k - 1],
            }
            if self.diff_acf_returns is not None:
                row.update(
                    diff_acf_r=self.diff_acf_returns[k],
                    diff_acf_abs_r=self.diff_acf_abs_returns[k],
                    diff_leverage=self.diff_leverage[k - 1],
                )
            out.append(row)
        return out

    def to_csv(self, path: str | Path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(float(v)) if k != "lag" else v) for k, v in r.items()})


def stylized_facts(returns, max_lag: int = 10, vol_window: int = 20, reference=None) -> StylizedFactsReport:
    """Return and absolute-return autocorrelations plus corr(r_t, sigma_{t+k}) for k = 1..max_lag."""
    r = np.asarray(returns, dtype=np.float64).ravel()
    if max_lag < 1:
        raise ValueError(f"max_lag must be positive, got {max_lag}")
    if len(r) < 10 * max_lag or len(r) < vol_window + max_lag + 2:
        raise ValueError(f"need at least {max(10 * max_lag, vol_window + max_lag + 2)} returns, got {len(r)}")
    if not np.all(np.isfinite(r)):
        raise ValueError("returns must be finite")
    if r.std() == 0:
        raise ValueError("zero-variance returns")
    acf_r = autocorrelation(r, max_lag)
    acf_a = autocorrelation(np.abs(r), max_lag) if np.abs(r).std() > 0 else np.r_[1.0, np.zeros(max_lag)]
    sigma = trailing_std(r, vol_window)
    lev = np.empty(max_lag)
    for k in range(1, max_lag + 1):
        a, b = r[:-k], sigma[k:]
        ok = np.isfinite(b)
        lev[k - 1] = _pearson(a[ok], b[ok])
    rep = StylizedFactsReport(acf_r, acf_a, lev)
    if reference is not None:
        ref = stylized_facts(reference, max_lag, vol_window)
        rep.diff_acf_returns = np.abs(acf_r - ref.acf_returns)
        rep.diff_acf_abs_returns = np.abs(acf_a - ref.acf_abs_returns)
        rep.diff_leverage = np.abs(lev - ref.leverage)
    return rep


# ---------------------------------------------------------------------------
# Discriminative score
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscriminatorConfig:
    hidden: int = 32
    max_epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-2
    patience: int = 3
    train_fraction: float = 0.8
    early_stop_fraction: float = 0.2


@dataclass(frozen=True)
class DiscriminativeResult:
    score: float
    accuracy: float
    epochs: int
    n_test: int


def _stratified_split(n_real: int, n_synth: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    offset = 0
    for n in (n_real, n_synth):
        idx = offset + rng.permutation(n)
        k = int(round(frac * n))
        train.append(idx[:k])
        test.append(idx[k:])
        offset += n
    return np.concatenate(train), np.concatenate(test)


def _logits(model: GRUForecaster, x) -> Tensor:
    out = model.forward(x)
    B = out.shape[0]
    return dc.concat([Tensor(np.zeros((B, 1))), out.reshape(B, 1)], axis=1)


def _accuracy(model: GRUForecaster, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((model.predict(x) > 0).astype(np.int64) == y))


def discriminative_score(real, synth, seed: int = 0, cfg: DiscriminatorConfig = DiscriminatorConfig()) -> DiscriminativeResult:
    """Held-out accuracy of a recurrent real-vs-synthetic classifier, minus one half."""
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if real.ndim == 2:
        real, synth = real[:, :, None], synth[:, :, None]
    if real.ndim != 3 or real.shape[1:] != synth.shape[1:]:
        raise ValueError(f"window sets must share (L, F); got {real.shape} and {synth.shape}")
    n_r, n_s = len(real), len(synth)
    if min(n_r, n_s) < 50:
        raise ValueError(f"need at least 50 windows per class, got {n_r} real and {n_s} synthetic")
    if max(n_r, n_s) > 4 * min(n_r, n_s):
        raise ValueError(f"class imbalance {n_r}:{n_s} exceeds 4:1")
    x = np.concatenate([real, synth])
    y = np.r_[np.zeros(n_r, dtype=np.int64), np.ones(n_s, dtype=np.int64)]
    rng = np.random.default_rng(seed)
    tr, te = _stratified_split(n_r, n_s, cfg.train_fraction, rng)
    tr = rng.permutation(tr)
    n_es = max(1, int(round(cfg.early_stop_fraction * len(tr))))
    es, fit = tr[:n_es], tr[n_es:]
    mu = x[tr].mean(axis=(0, 1))
    sd = np.where(x[tr].std(axis=(0, 1)) > 0, x[tr].std(axis=(0, 1)), 1.0)
    x = (x - mu) / sd
    L, F = x.shape[1:]
    model = GRUForecaster(F, L, hidden=cfg.hidden, feature_width=cfg.hidden, encoder=InputEncoder(raw=True), seed=seed)
    hyper = OptimizerConfig(mode="adam")
    best, best_state, bad, epochs = -1.0, model.params.state_dict(), 0, 0
    for epoch in range(cfg.max_epochs):
        epochs = epoch + 1
        order = rng.permutation(fit)
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            model.params.zero_grad()
            dc.cross_entropy(_logits(model, x[idx]), y[idx]).backward()
            dc.optimizer_step(model.params, cfg.lr, hyper)
        acc = _accuracy(model, x[es], y[es])
        if acc > best:
            best, best_state, bad = acc, model.params.state_dict(), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    model.params.load_state_dict(best_state)
    acc = _accuracy(model, x[te], y[te])
    if not math.isfinite(acc):
        raise RuntimeError("classifier produced non-finite accuracy")
    return DiscriminativeResult(acc - 0.5, acc, epochs, len(te))
