"""Joint training: schedule alpha, plan (p, lam), manipulate, step the task model, periodically step the planner."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SampleSet
from .diffcore import OptimizerConfig
from .manipulation import ManipulationContext, ManipulationPolicy, ProvenanceRecord, derive_seed, manipulate
from .models import LossConfig, Optimizer, TaskModel, evaluate, per_sample_squared_error, sharpe_loss
from .planner import (
    Planner,
    PlannerUpdateConfig,
    SchedulerState,
    batch_state,
    planner_forward,
    planner_update,
    schedule_alpha,
    update_counter,
)

log = logging.getLogger(__name__)

_SHUFFLE_SALT = 0x5F1
_VALID_SALT = 0x7A1
_PLANNER_SALT = 0x91A

POLICY_MODES = ("planned", "fixed", "none")
HISTORY_COLUMNS = ("epoch", "train_loss", "valid_loss", "valid_std", "alpha", "c_es", "planner_updates", "first_step", "last_step")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainerConfig:
    """Knobs of the joint loop. ``freq`` counts task-model steps between planner updates."""

    freq: float = 10
    beta: float = 1e-3
    start_epoch: int = 5
    master_seed: int = 0
    max_epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 5
    delta: float = 1e-5
    tau: float = 5.0
    gamma_risk: float = 0.05
    policy_mode: str = "planned"
    fixed_lambda: float = 0.5
    planner_batch: int = 16
    valid_batch: int = 64
    planner_optimizer: str = "adam"
    planner_eps: float = 1e-20
    max_bad_epochs: int = 3

    def __post_init__(self) -> None:
        if not self.freq >= 1:
            raise ValueError(f"freq must be at least 1, got {self.freq}")
        if self.policy_mode not in POLICY_MODES:
            raise ValueError(f"policy_mode must be one of {POLICY_MODES}, got {self.policy_mode!r}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if not 0.0 <= self.fixed_lambda <= 1.0:
            raise ValueError(f"fixed_lambda must lie in [0, 1], got {self.fixed_lambda}")


@dataclass
class JointResult:
    model: TaskModel
    planner: Planner | None
    history: list[dict]
    records: list[ProvenanceRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_valid: float = math.inf
    stopped_early: bool = False

    def best_row(self) -> dict:
        return self.history[self.best_epoch]


def _safe_step(model: TaskModel, windows: np.ndarray, targets: np.ndarray, loss: LossConfig, opt: Optimizer) -> float:
    """Like ``train_step`` but reports a non-finite loss instead of raising; no update is applied then."""
    opt.zero_grad()
    value = sharpe_loss(per_sample_squared_error(model, windows, targets), loss.gamma_risk)
    v = value.item()
    if math.isfinite(v):
        value.backward()
        opt.step()
    return v


def _policy(cfg: TrainerConfig, ctx: ManipulationContext, planner: Planner | None, model: TaskModel, batch: SampleSet, alpha: float) -> ManipulationPolicy:
    n, m = ctx.policy_shape
    if cfg.policy_mode == "planned":
        p, lam = planner_forward(planner, *batch_state(model, batch.windows))
        return ManipulationPolicy(p, lam, alpha)
    return ManipulationPolicy.uniform(n, m, alpha, cfg.fixed_lambda)


def joint_train(
    cfg: TrainerConfig,
    train: SampleSet,
    valid: SampleSet,
    model: TaskModel,
    ctx: ManipulationContext,
    planner: Planner | None = None,
) -> JointResult:
    """Run until ``max_epochs`` or ``patience`` epochs without improvement; restores the best task weights."""
    if cfg.policy_mode == "planned" and planner is None:
        raise ValueError("policy_mode 'planned' needs a planner")
    if planner is not None and planner.policy_shape != ctx.policy_shape:
        raise ValueError(f"planner emits {planner.policy_shape} policies, operation set is {ctx.policy_shape}")
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("train and valid sample sets must be non-empty")
    loss = LossConfig(cfg.gamma_risk)
    opt = Optimizer(model.params, cfg.lr)
    pcfg = PlannerUpdateConfig(beta=cfg.beta, inner_lr=cfg.lr, optimizer=cfg.planner_optimizer, eps=cfg.planner_eps)
    sched = SchedulerState(tau=cfg.tau)
    result = JointResult(model, planner, [])
    best_state = model.params.state_dict()
    step = 0
    bad_epochs = 0
    for epoch in range(cfg.max_epochs):
        sched.epoch = epoch
        alpha = 0.0 if cfg.policy_mode == "none" else schedule_alpha(sched)
        order = np.random.default_rng(derive_seed(cfg.master_seed, epoch, _SHUFFLE_SALT)).permutation(len(train))
        losses = []
        updates = 0
        first_step = step
        for start in range(0, len(train), cfg.batch_size):
            batch = train.subset(order[start : start + cfg.batch_size])
            if cfg.policy_mode == "none":
                windows, targets = batch.windows, batch.targets
            else:
                aug, rec = manipulate(batch, _policy(cfg, ctx, planner, model, batch, alpha), ctx, cfg.master_seed, epoch, step)
                result.records.append(rec)
                windows, targets = aug.windows, aug.targets
            losses.append(_safe_step(model, windows, targets, loss, opt))
            step += 1
            if cfg.policy_mode == "planned" and epoch >= cfg.start_epoch and step % cfg.freq == 0:
                prng = np.random.default_rng(derive_seed(cfg.master_seed, step, _VALID_SALT))
                vidx = prng.choice(len(valid), size=min(cfg.valid_batch, len(valid)), replace=False)
                tidx = prng.choice(len(batch), size=min(cfg.planner_batch, len(batch)), replace=False)
                planner_update(
                    planner, model, batch.subset(np.sort(tidx)), valid.windows[vidx], valid.targets[vidx],
                    ctx, pcfg, derive_seed(cfg.master_seed, step, _PLANNER_SALT), loss,
                )
                updates += 1
        train_loss = float(np.mean(losses))
        ev = evaluate(model, valid.windows, valid.targets)
        finite = math.isfinite(train_loss) and math.isfinite(ev.mean)
        improved = finite and update_counter(sched, ev.mean, result.best_valid, cfg.delta)
        if not finite:
            sched.c_es += 1
        if improved:
            result.best_valid = ev.mean
            result.best_epoch = epoch
            best_state = model.params.state_dict()
        result.history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "valid_loss": ev.mean,
                "valid_std": ev.std,
                "alpha": alpha,
                "c_es": sched.c_es,
                "planner_updates": updates,
                "first_step": first_step,
                "last_step": step - 1,
            }
        )
        log.info("epoch %d train %.6g valid %.6g alpha %.4f c_es %d", epoch, train_loss, ev.mean, alpha, sched.c_es)
        bad_epochs = 0 if finite else bad_epochs + 1
        if bad_epochs >= cfg.max_bad_epochs:
            raise DivergenceError(f"non-finite losses for {bad_epochs} consecutive epochs (last epoch {epoch})", result.history)
        if sched.c_es >= cfg.patience:
            result.stopped_early = True
            break
    model.params.load_state_dict(best_state)
    return result


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def read_history(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (float(v) if k in ("train_loss", "valid_loss", "valid_std", "alpha") else int(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


__all__ = [
    "DivergenceError",
    "JointResult",
    "OptimizerConfig",
    "TrainerConfig",
    "joint_train",
    "read_history",
    "write_history",
]
