"""Learned policy over the manipulation module and the overfitting-aware proportion scheduler.

The planner maps (task-model features, data-state features) to the operation
weights ``p`` (softmax head) and strengths ``lam`` (sigmoid head). It is
trained on validation loss through a one-step unrolled copy of the task
model: the augmented batch is the p-weighted sum of all operation variants,
gradients reach ``p`` exactly and reach ``lam`` with the straight-through rule
dM/dlam = 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import SampleSet
from .diffcore import OptimizerConfig, ParameterStore, Tensor
from .manipulation import ManipulationContext, ManipulationPolicy, augment_variants, blend_variants, derive_seed
from .models import LossConfig, TaskModel, per_sample_squared_error, sharpe_loss

log = logging.getLogger(__name__)

N_STATE_STATS = 6


# ---------------------------------------------------------------------------
# Data state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataStateFeatures:
    mean: np.ndarray
    volatility: np.ndarray
    momentum: np.ndarray
    skewness: np.ndarray
    kurtosis: np.ndarray
    trend: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.mean, self.volatility, self.momentum, self.skewness, self.kurtosis, self.trend])


def featurize_data_state(window: np.ndarray) -> DataStateFeatures:
    """Per-feature summary of an (L, F) window; skew and excess kurtosis are 0 for flat features."""
    x = np.asarray(window, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"window needs at least 2 observations, got {n}")
    mean = x.mean(axis=0)
    dev = x - mean
    m2 = (dev**2).mean(axis=0)
    m3 = (dev**3).mean(axis=0)
    m4 = (dev**4).mean(axis=0)
    flat = m2 <= 1e-300
    safe = np.where(flat, 1.0, m2)
    skew = np.where(flat, 0.0, m3 / safe**1.5)
    kurt = np.where(flat, 0.0, m4 / safe**2 - 3.0)
    t = np.arange(n, dtype=np.float64)
    tc = t - t.mean()
    trend = tc @ dev / (tc @ tc)
    return DataStateFeatures(mean, np.sqrt(m2), x[-1] - x[0], skew, kurt, trend)


# ---------------------------------------------------------------------------
# Planner network
# ---------------------------------------------------------------------------


class Planner:
    """Two-layer perceptron with a softmax head for ``p`` and a sigmoid head for ``lam``.

    Output heads start at zero, i.e. at the uniform policy with strength 0.5.
    """

    def __init__(self, model_width: int, data_width: int, policy_shape: tuple[int, int], hidden: int = 64, seed: int = 0):
        self.model_width = model_width
        self.data_width = data_width
        self.policy_shape = tuple(policy_shape)
        n_ops = int(np.prod(policy_shape))
        rng = np.random.default_rng(seed)
        self.params = ParameterStore()
        self.params.add("l1.w", dc.glorot(rng, model_width + data_width, hidden))
        self.params.add("l1.b", np.zeros(hidden))
        for head in ("p", "lam"):
            self.params.add(f"{head}.w", np.zeros((hidden, n_ops)))
            self.params.add(f"{head}.b", np.zeros(n_ops))

    @property
    def input_width(self) -> int:
        return self.model_width + self.data_width

    def forward_graph(self, model_features, data_features) -> tuple[Tensor, Tensor]:
        mf = np.asarray(model_features, dtype=np.float64).reshape(-1)
        df = np.asarray(data_features, dtype=np.float64).reshape(-1)
        if mf.size != self.model_width or df.size != self.data_width:
            raise ValueError(
                f"planner expects {self.model_width} model and {self.data_width} data features, "
                f"got {mf.size} and {df.size}"
            )
        x = Tensor(np.concatenate([mf, df])[None, :])
        h = dc.tanh(x @ self.params["l1.w"] + self.params["l1.b"])
        p = dc.softmax(h @ self.params["p.w"] + self.params["p.b"], axis=-1).reshape(self.policy_shape)
        lam = dc.sigmoid(h @ self.params["lam.w"] + self.params["lam.b"]).reshape(self.policy_shape)
        return p, lam


def planner_forward(planner: Planner, model_features, data_features) -> tuple[np.ndarray, np.ndarray]:
    p, lam = planner.forward_graph(model_features, data_features)
    return p.data.copy(), lam.data.copy()


def batch_state(model: TaskModel, windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch-mean model features and batch-mean data-state features of the encoded windows."""
    feats = model.features(windows).data.mean(axis=0)
    enc = model.encoder(windows).data
    data = np.mean([featurize_data_state(w).vector() for w in enc], axis=0)
    return feats, data


def planner_input_widths(model: TaskModel) -> tuple[int, int]:
    return model.feature_width, N_STATE_STATS * model.n_features


# ---------------------------------------------------------------------------
# Scheduler
# ---------------------------------------------------------------------------


@dataclass
class SchedulerState:
    """Epoch, temperature-like threshold and the two early-stopping counters."""

    epoch: int = 0
    tau: float = 5.0
    c_es: int = 0
    c_les: int = 0


def schedule_alpha(state: SchedulerState) -> float:
    """Proportion of the batch to manipulate; records the current counter as the last one."""
    if state.tau <= 0:
        raise ValueError(f"tau must be positive, got {state.tau}")
    penalty = 1.0 if state.c_es > state.c_les else 0.1
    state.c_les = state.c_es
    return min(math.tanh(state.epoch / state.tau) + 0.01, 1.0) * penalty


def update_counter(state: SchedulerState, val_loss: float, best: float, delta: float) -> bool:
    """Reset the counter on an improvement of more than ``delta`` over ``best``, else increment it."""
    if val_loss < best - delta:
        state.c_es = 0
        return True
    state.c_es += 1
    return False


# ---------------------------------------------------------------------------
# Hypergradients
# ---------------------------------------------------------------------------


def _train_loss(model: TaskModel, x, y, loss: LossConfig) -> Tensor:
    return sharpe_loss(per_sample_squared_error(model, x, y), loss.gamma_risk)


def _val_loss(model: TaskModel, x, y) -> Tensor:
    return per_sample_squared_error(model, x, y).mean()


def _input_grads(model: TaskModel, x: np.ndarray, y: np.ndarray, loss: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    xt = Tensor(x, requires_grad=True)
    yt = Tensor(y, requires_grad=True)
    model.params.zero_grad()
    pred = model.forward(xt)
    sharpe_loss((pred - yt) ** 2, loss.gamma_risk).backward()
    return xt.grad, yt.grad


@dataclass
class Hypergradient:
    val_loss: float
    grad_x: np.ndarray
    grad_y: np.ndarray


def hypergradient(
    model: TaskModel,
    x_aug: np.ndarray,
    y_aug: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    inner_lr: float,
    loss: LossConfig = LossConfig(),
    fd_scale: float = 1e-4,
) -> Hypergradient:
    """Gradient of the validation loss after one inner SGD step with respect to the training inputs.

    With theta' = theta - lr * dL_train/dtheta and v = dL_val/dtheta', the input
    gradient is -lr * d/dx (v . dL_train/dtheta), evaluated as a central
    difference of input gradients at theta +/- eps * v.
    """
    inner = model.clone()
    inner.params.zero_grad()
    _train_loss(inner, x_aug, y_aug, loss).backward()
    for _, t in inner.params.items():
        t.data = t.data - inner_lr * t.grad
    inner.params.zero_grad()
    lv = _val_loss(inner, x_val, y_val)
    val = lv.item()
    if not math.isfinite(val):
        return Hypergradient(val, np.zeros_like(x_aug), np.zeros_like(y_aug))
    lv.backward()
    v = {k: t.grad for k, t in inner.params.items()}
    vnorm = math.sqrt(sum(float((g**2).sum()) for g in v.values()))
    if vnorm == 0.0:
        return Hypergradient(val, np.zeros_like(x_aug), np.zeros_like(y_aug))
    eps = fd_scale / vnorm
    base = model.params.state_dict()
    probe = model.clone()
    grads = []
    for sign in (1.0, -1.0):
        probe.params.load_state_dict({k: base[k] + sign * eps * v[k] for k in base})
        grads.append(_input_grads(probe, x_aug, y_aug, loss))
    (gxp, gyp), (gxm, gym) = grads
    scale = -inner_lr / (2.0 * eps)
    return Hypergradient(val, scale * (gxp - gxm), scale * (gyp - gym))


def policy_gradients(
    p: np.ndarray, vx: np.ndarray, vy: np.ndarray, grad_x: np.ndarray, grad_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """dL/dp through the weighted sum, and dL/dlam with every window entry's dM/dlam set to 1.

    ``vx`` is (B, n, m, L, F), ``vy`` is (B, n, m); the grads are for the blended batch.
    """
    dp = np.einsum("bijlf,blf->ij", vx, grad_x) + np.einsum("bij,b->ij", vy, grad_y)
    dlam = p * grad_x.sum()
    return dp, dlam


@dataclass(frozen=True)
class PlannerUpdateConfig:
    beta: float = 1e-3
    inner_lr: float = 1e-3
    optimizer: str = "adam"
    fd_scale: float = 1e-4
    # hypergradients are tiny (one inner step at a small learning rate); eps must sit far below them
    eps: float = 1e-20


@dataclass
class PlannerStepInfo:
    val_loss: float
    grad_p: np.ndarray
    grad_lam: np.ndarray
    skipped: bool = False


def planner_update(
    planner: Planner,
    model: TaskModel,
    train_batch: SampleSet,
    val_windows: np.ndarray,
    val_targets: np.ndarray,
    ctx: ManipulationContext,
    cfg: PlannerUpdateConfig,
    seed: int,
    loss: LossConfig = LossConfig(),
) -> PlannerStepInfo:
    """One outer step on the planner parameters from validation feedback."""
    mf, df = batch_state(model, train_batch.windows)
    p_t, lam_t = planner.forward_graph(mf, df)
    policy = ManipulationPolicy(p_t.data, lam_t.data, 1.0)
    variants = [augment_variants(s, policy, ctx, derive_seed(seed, int(sid))) for s, sid in zip(train_batch, train_batch.ids)]
    vx = np.stack([v[0] for v in variants])
    vy = np.stack([v[1] for v in variants])
    x_aug, y_aug = blend_variants(policy.p, vx, vy)
    hg = hypergradient(model, x_aug, y_aug, val_windows, val_targets, cfg.inner_lr, loss, cfg.fd_scale)
    if not math.isfinite(hg.val_loss):
        log.warning("skipping planner update: non-finite validation loss")
        return PlannerStepInfo(hg.val_loss, np.zeros(policy.shape), np.zeros(policy.shape), skipped=True)
    dp, dlam = policy_gradients(policy.p, vx, vy, hg.grad_x, hg.grad_y)
    planner.params.zero_grad()
    ((p_t * dp).sum() + (lam_t * dlam).sum()).backward()
    for _, t in planner.params.items():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    dc.optimizer_step(planner.params, cfg.beta, OptimizerConfig(mode=cfg.optimizer, eps=cfg.eps))
    return PlannerStepInfo(hg.val_loss, dp, dlam)
