"""Downstream forecasters split into a feature extractor j(.) and a predictor k(.).

``forward(x) == head(features(x))``; the planner reads ``features`` as the
model state. Models take raw OHLCV windows and encode them in-graph, so
gradients with respect to the raw (augmented) inputs are available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import diffcore as dc
from .data import CLOSE, VOLUME, PanelSeries
from .diffcore import OptimizerConfig, ParameterStore, Tensor

FEATURE_WIDTH = 128


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    gamma_risk: float = 0.05

    def __post_init__(self) -> None:
        if self.gamma_risk < 0:
            raise ValueError(f"gamma_risk must be non-negative, got {self.gamma_risk}")


def sharpe_loss(per_sample: Tensor, gamma_risk: float = 0.05) -> Tensor:
    """Mean loss plus ``gamma_risk`` times its population standard deviation."""
    per_sample = Tensor.lift(per_sample)
    if per_sample.data.size == 0:
        raise ValueError("sharpe_loss needs at least one loss value")
    if gamma_risk == 0:
        return per_sample.mean()
    return per_sample.mean() + gamma_risk * dc.std(per_sample)


@dataclass
class InputEncoder:
    """Scale-free view of raw OHLCV windows, fitted on training data only.

    Prices become returns relative to the window's last close divided by the
    training return volatility; volume becomes de-meaned log volume; extra
    indicator columns are standardised with training moments.
    """

    price_scale: float = 1.0
    extra_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    extra_std: np.ndarray = field(default_factory=lambda: np.ones(0))
    raw: bool = False

    @property
    def output_scale(self) -> float:
        """Forecasts are emitted in units of the training return volatility."""
        return 1.0 if self.raw else self.price_scale

    @classmethod
    def fit(cls, train: PanelSeries) -> "InputEncoder":
        c = train.values[:, :, CLOSE]
        rets = np.diff(c, axis=0) / c[:-1]
        n_extra = train.values.shape[2] - VOLUME - 1
        if n_extra == 0:
            return cls(price_scale=float(max(rets.std(), 1e-8)))
        extras = train.values[:, :, VOLUME + 1 :].reshape(-1, n_extra)
        return cls(
            price_scale=float(max(rets.std(), 1e-8)),
            extra_mean=extras.mean(axis=0),
            extra_std=np.maximum(extras.std(axis=0), 1e-8),
        )

    def __call__(self, x: Tensor) -> Tensor:
        x = Tensor.lift(x)
        if self.raw:
            return x
        last_close = x[:, -1:, CLOSE : CLOSE + 1]
        prices = (x[:, :, :VOLUME] / last_close - 1.0) * (1.0 / self.price_scale)
        logv = dc.log(x[:, :, VOLUME : VOLUME + 1] + 1.0)
        vol = logv - logv.mean(axis=1, keepdims=True)
        parts = [prices, vol]
        if x.shape[2] > VOLUME + 1:
            parts.append((x[:, :, VOLUME + 1 :] - self.extra_mean) * (1.0 / self.extra_std))
        return dc.concat(parts, axis=2)


class TaskModel:
    """Base class: subclasses define ``features`` (j) and share the linear head (k)."""

    name = "base"

    def __init__(self, n_features: int, lookback: int, feature_width: int = FEATURE_WIDTH,
                 encoder: InputEncoder | None = None, seed: int = 0):
        self.n_features = n_features
        self.lookback = lookback
        self.feature_width = feature_width
        self.encoder = encoder or InputEncoder(raw=True)
        self.seed = seed
        self.params = ParameterStore()
        self._rng = np.random.default_rng(seed)

    def _dense(self, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        self.params.add(f"{name}.w", dc.glorot(self._rng, fan_in, fan_out))
        if bias:
            self.params.add(f"{name}.b", np.zeros(fan_out))

    def _apply_dense(self, name: str, x: Tensor) -> Tensor:
        out = x @ self.params[f"{name}.w"]
        if f"{name}.b" in self.params:
            out = out + self.params[f"{name}.b"]
        return out

    def _init_head(self) -> None:
        self._dense("head", self.feature_width, 1)

    def _check(self, x) -> Tensor:
        x = Tensor.lift(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[1:] != (self.lookback, self.n_features):
            raise ValueError(
                f"{self.name}: expected windows of shape (B, {self.lookback}, {self.n_features}), got {x.shape}"
            )
        return x

    def features(self, x) -> Tensor:
        raise NotImplementedError

    def head(self, f: Tensor) -> Tensor:
        out = self._apply_dense("head", f).reshape(-1)
        scale = self.encoder.output_scale
        return out if scale == 1.0 else out * scale

    def forward(self, x) -> Tensor:
        return self.head(self.features(x))

    __call__ = forward

    def extract_features(self, window: np.ndarray) -> np.ndarray:
        f = self.features(window).data
        return f[0] if np.ndim(window) == 2 else f

    def predict(self, windows: np.ndarray, chunk: int = 512) -> np.ndarray:
        return np.concatenate([self.forward(windows[k : k + chunk]).data for k in range(0, len(windows), chunk)])

    def clone(self) -> "TaskModel":
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.params = self.params.clone()
        other._rng = np.random.default_rng(self.seed)
        return other


class GRUForecaster(TaskModel):
    """Gated recurrent encoder -> tanh FC (feature_width) -> FC 1."""

    name = "gru"

    def __init__(self, n_features: int, lookback: int, hidden: int = 64, feature_width: int = FEATURE_WIDTH,
                 encoder: InputEncoder | None = None, seed: int = 0):
        super().__init__(n_features, lookback, feature_width, encoder, seed)
        self.hidden = hidden
        for gate in ("r", "z", "n"):
            self._dense(f"gru.x{gate}", n_features, hidden)
        self.params.add("gru.h", np.concatenate([dc.glorot(self._rng, hidden, hidden) for _ in range(3)], axis=1))
        self.params.add("gru.hn_b", np.zeros(hidden))
        self._dense("fc", hidden, feature_width)
        self._init_head()

    def features(self, x) -> Tensor:
        x = self.encoder(self._check(x))
        H = self.hidden
        B = x.shape[0]
        xr = self._apply_dense("gru.xr", x)
        xz = self._apply_dense("gru.xz", x)
        xn = self._apply_dense("gru.xn", x)
        U = self.params["gru.h"]
        bhn = self.params["gru.hn_b"]
        h = Tensor(np.zeros((B, H)))
        for t in range(self.lookback):
            gh = h @ U
            r = dc.sigmoid(xr[:, t] + gh[:, :H])
            z = dc.sigmoid(xz[:, t] + gh[:, H : 2 * H])
            n = dc.tanh(xn[:, t] + r * (gh[:, 2 * H :] + bhn))
            h = n + z * (h - n)
        return dc.tanh(self._apply_dense("fc", h))


def moving_average_matrix(length: int, kernel: int = 5) -> np.ndarray:
    """(L, L) operator for a centred moving average with edge replication."""
    half = kernel // 2
    A = np.zeros((length, length))
    for t in range(length):
        for k in range(t - half, t - half + kernel):
            A[t, min(max(k, 0), length - 1)] += 1.0 / kernel
    return A


class LinearForecaster(TaskModel):
    """Trend/remainder decomposition, flattened -> FC (feature_width) -> FC 1, no nonlinearity."""

    name = "linear"

    def __init__(self, n_features: int, lookback: int, feature_width: int = FEATURE_WIDTH,
                 encoder: InputEncoder | None = None, seed: int = 0, kernel: int = 5):
        super().__init__(n_features, lookback, feature_width, encoder, seed)
        self.avg = moving_average_matrix(lookback, kernel)
        self._dense("fc", 2 * lookback * n_features, feature_width)
        self._init_head()

    def features(self, x) -> Tensor:
        x = self.encoder(self._check(x))
        B = x.shape[0]
        trend = Tensor(self.avg) @ x
        flat = dc.concat([trend.reshape(B, -1), (x - trend).reshape(B, -1)], axis=1)
        return self._apply_dense("fc", flat)


MODELS = {"gru": GRUForecaster, "linear": LinearForecaster}


def build_model(kind: str, n_features: int, lookback: int, encoder: InputEncoder | None = None,
                seed: int = 0, hidden: int = 64, feature_width: int = FEATURE_WIDTH) -> TaskModel:
    if kind == "gru":
        return GRUForecaster(n_features, lookback, hidden, feature_width, encoder, seed)
    if kind == "linear":
        return LinearForecaster(n_features, lookback, feature_width, encoder, seed)
    raise ValueError(f"unknown task model {kind!r}; choose from {sorted(MODELS)}")


class Optimizer:
    def __init__(self, params: ParameterStore, lr: float = 1e-3, hyper: OptimizerConfig = OptimizerConfig()):
        self.params = params
        self.lr = lr
        self.hyper = hyper

    def step(self) -> None:
        dc.optimizer_step(self.params, self.lr, self.hyper)

    def zero_grad(self) -> None:
        self.params.zero_grad()


def per_sample_squared_error(model: TaskModel, windows, targets) -> Tensor:
    return (model.forward(windows) - np.asarray(targets, dtype=np.float64)) ** 2


def train_step(model: TaskModel, windows, targets, loss: LossConfig, opt: Optimizer) -> float:
    opt.zero_grad()
    value = sharpe_loss(per_sample_squared_error(model, windows, targets), loss.gamma_risk)
    v = value.item()
    if not math.isfinite(v):
        raise TrainingError(f"non-finite training loss {v} on a batch of {len(targets)} samples")
    value.backward()
    opt.step()
    return v


def train_epoch(model: TaskModel, batches: Iterable[tuple[np.ndarray, np.ndarray]], loss: LossConfig, opt: Optimizer) -> float:
    losses = [train_step(model, w, y, loss, opt) for w, y in batches]
    if not losses:
        raise ValueError("train_epoch received no batches")
    return float(np.mean(losses))


@dataclass(frozen=True)
class EvalResult:
    mean: float
    per_sample: np.ndarray
    std: float


def evaluate(model: TaskModel, windows: np.ndarray, targets: np.ndarray, loss: LossConfig | None = None) -> EvalResult:
    """Per-sample squared errors with their mean and population standard deviation."""
    if len(targets) == 0:
        raise ValueError("evaluate needs at least one sample")
    err = (model.predict(windows) - np.asarray(targets)) ** 2
    return EvalResult(float(err.mean()), err, float(err.std()))
