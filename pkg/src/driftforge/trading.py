"""Single-asset all-in/all-out trading environment with proportional transaction costs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

ACTIONS = (-1, 0, 1)


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    initial_cash: float = 1e4
    cost: float = 1e-3
    discount: float = 0.99
    lookback: int = 60

    def __post_init__(self) -> None:
        if not 0.0 <= self.cost < 0.1:
            raise ValueError(f"cost must lie in [0, 0.1), got {self.cost}")
        if not self.initial_cash > 0:
            raise ValueError(f"initial_cash must be positive, got {self.initial_cash}")
        if self.lookback < 1:
            raise ValueError(f"lookback must be positive, got {self.lookback}")


@dataclass(frozen=True)
class Observation:
    window: np.ndarray
    position: int
    t: int


@dataclass
class StepRecord:
    t: int
    price: float
    action: int
    position: int
    value: float
    reward: float


class TradingEnv:
    """Trades execute at the close of the current step; the reward covers the following interval.

    ``prices`` is (T,); ``features`` is (T, F) and defaults to the prices themselves.
    """

    def __init__(self, prices, config: EnvConfig = EnvConfig(), features=None):
        self.prices = np.asarray(prices, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.prices)) or np.any(self.prices <= 0):
            raise EnvError("prices must be finite and positive")
        feats = self.prices[:, None] if features is None else np.asarray(features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        if len(feats) != len(self.prices):
            raise EnvError(f"features cover {len(feats)} steps, prices {len(self.prices)}")
        self.features = feats
        self.config = config
        self.t = -1
        self.cash = 0.0
        self.shares = 0.0
        self.position = 0
        self.done = True

    @property
    def value(self) -> float:
        return float(self.cash + self.shares * self.prices[self.t])

    def observe(self) -> Observation:
        L = self.config.lookback
        return Observation(self.features[self.t - L + 1 : self.t + 1].copy(), self.position, self.t)

    def reset(self) -> Observation:
        L = self.config.lookback
        if len(self.prices) < L + 1:
            raise EnvError(f"need at least {L + 1} price steps, got {len(self.prices)}")
        self.t = L - 1
        self.cash = float(self.config.initial_cash)
        self.shares = 0.0
        self.position = 0
        self.done = False
        return self.observe()

    def step(self, action: int) -> tuple[Observation, float, bool]:
        if self.done:
            raise EnvError("step called on a finished episode; call reset()")
        if action not in ACTIONS:
            raise EnvError(f"action must be one of {ACTIONS}, got {action!r}")
        c = self.config.cost
        price = self.prices[self.t]
        before = self.position
        if action == 1 and self.position == 0:
            self.shares = float((1.0 - c) * self.cash / price)
            self.cash = 0.0
            self.position = 1
        elif action == -1 and self.position == 1:
            self.cash = float((1.0 - c) * self.shares * price)
            self.shares = 0.0
            self.position = 0
        self.t += 1
        market = (self.prices[self.t] - price) / price
        reward = self.position * market - c * abs(self.position - before)
        self.done = self.t >= len(self.prices) - 1
        return self.observe(), float(reward), self.done


class Policy(Protocol):
    def __call__(self, obs: Observation) -> int: ...


@dataclass
class RandomPolicy:
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._rng = np.random.default_rng(self.seed)

    def __call__(self, obs: Observation) -> int:
        return int(self._rng.integers(-1, 2))


def buy_and_hold(obs: Observation) -> int:
    return 1


def forecast_policy(predict: Callable[[np.ndarray], float], threshold: float = 0.0) -> Callable[[Observation], int]:
    """Long when the forecast return exceeds ``threshold``, flat otherwise."""

    def act(obs: Observation) -> int:
        return 1 if predict(obs.window) > threshold else -1

    return act


@dataclass(frozen=True)
class EpisodeMetrics:
    total_return: float
    sharpe: float
    n_trades: int
    values: np.ndarray
    degenerate: bool = False


def compute_metrics(values, n_trades: int = 0) -> EpisodeMetrics:
    """Total return from the endpoints; unannualised Sharpe from per-step simple returns (population std)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two portfolio values")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("portfolio values must be finite and positive")
    tr = (v[-1] - v[0]) / v[0]
    r = np.diff(v) / v[:-1]
    sd = r.std()
    if sd == 0:
        return EpisodeMetrics(float(tr), 0.0, n_trades, v, degenerate=True)
    return EpisodeMetrics(float(tr), float(r.mean() / sd), n_trades, v)


def run_episode(env: TradingEnv, policy: Callable[[Observation], int]) -> tuple[list[StepRecord], EpisodeMetrics]:
    obs = env.reset()
    traj = [StepRecord(env.t, float(env.prices[env.t]), 0, env.position, env.value, 0.0)]
    trades = 0
    done = False
    while not done:
        action = policy(obs)
        if action not in ACTIONS:
            raise EnvError(f"policy emitted invalid action {action!r}")
        before = env.position
        obs, reward, done = env.step(int(action))
        trades += int(env.position != before)
        traj.append(StepRecord(env.t, float(env.prices[env.t]), int(action), env.position, env.value, reward))
    return traj, compute_metrics([s.value for s in traj], trades)


def write_trajectory(traj: list[StepRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "price", "action", "position", "value", "reward"])
        for s in traj:
            w.writerow([s.t, repr(float(s.price)), s.action, s.position, repr(float(s.value)), repr(float(s.reward))])
