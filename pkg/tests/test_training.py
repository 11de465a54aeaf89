import math

import numpy as np
import pytest

from driftforge.manipulation import replay
from driftforge.models import InputEncoder, build_model, evaluate
from driftforge.planner import Planner, planner_input_widths
from driftforge.training import DivergenceError, TrainerConfig, joint_train, read_history, write_history


def _setup(split, train_samples, ctx, seed=0):
    m = build_model("linear", 5, train_samples.lookback, InputEncoder.fit(split.train), seed=seed, feature_width=8)
    pl = Planner(*planner_input_widths(m), ctx.policy_shape, hidden=8, seed=seed)
    return m, pl


def _small(train_samples, valid_samples):
    return train_samples.subset(np.arange(0, len(train_samples), 2)), valid_samples


def test_config_validation():
    with pytest.raises(ValueError):
        TrainerConfig(freq=0)
    with pytest.raises(ValueError):
        TrainerConfig(policy_mode="random")
    with pytest.raises(ValueError):
        TrainerConfig(tau=0)
    TrainerConfig(freq=math.inf)


def test_planned_run_history_and_schedule(split, train_samples, valid_samples, ctx):
    tr, va = _small(train_samples, valid_samples)
    m, pl = _setup(split, train_samples, ctx)
    cfg = TrainerConfig(max_epochs=4, start_epoch=1, freq=3, batch_size=32, master_seed=5, planner_batch=4, valid_batch=16)
    res = joint_train(cfg, tr, va, m, ctx, pl)
    h = res.history
    assert [r["epoch"] for r in h] == list(range(len(h)))
    assert h[0]["alpha"] == pytest.approx(0.001)
    assert h[0]["planner_updates"] == 0
    assert sum(r["planner_updates"] for r in h[1:]) > 0
    steps_per_epoch = math.ceil(len(tr) / 32)
    assert h[1]["first_step"] == steps_per_epoch
    assert res.best_valid == min(r["valid_loss"] for r in h)
    assert len(res.records) == steps_per_epoch * len(h)


def test_restores_best_weights(split, train_samples, valid_samples, ctx):
    tr, va = _small(train_samples, valid_samples)
    m, pl = _setup(split, train_samples, ctx)
    res = joint_train(TrainerConfig(max_epochs=3, batch_size=32, policy_mode="none"), tr, va, m, ctx, pl)
    assert evaluate(m, va.windows, va.targets).mean == pytest.approx(res.best_valid, rel=1e-12)
    assert res.records == []
    assert all(r["alpha"] == 0.0 for r in res.history)


def test_runs_are_reproducible_and_replayable(split, train_samples, valid_samples, ctx):
    tr, va = _small(train_samples, valid_samples)
    cfg = TrainerConfig(max_epochs=2, start_epoch=0, freq=2, batch_size=32, master_seed=9, planner_batch=4, valid_batch=8, tau=0.5)
    runs = []
    for _ in range(2):
        m, pl = _setup(split, train_samples, ctx)
        runs.append(joint_train(cfg, tr, va, m, ctx, pl))
    a, b = runs
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]
    assert a.history == b.history
    batches = replay(a.records, tr, ctx)
    assert [x.checksum() for x in batches] == [r.checksum for r in a.records]


def test_early_stopping(split, train_samples, valid_samples, ctx):
    tr, va = _small(train_samples, valid_samples)
    m, _ = _setup(split, train_samples, ctx)
    # a huge delta means no epoch ever counts as an improvement after the first
    res = joint_train(TrainerConfig(max_epochs=20, patience=2, delta=1e9, policy_mode="fixed", batch_size=64), tr, va, m, ctx)
    assert res.stopped_early and len(res.history) == 3 and res.best_epoch == 0


def test_divergence_is_reported(split, train_samples, valid_samples, ctx):
    tr, va = _small(train_samples, valid_samples)
    m, _ = _setup(split, train_samples, ctx)
    m.params["fc.w"].data[:] = np.nan
    with pytest.raises(DivergenceError) as exc:
        joint_train(TrainerConfig(max_epochs=10, policy_mode="none", batch_size=64), tr, va, m, ctx)
    assert len(exc.value.history) == 3


def test_planned_mode_needs_matching_planner(split, train_samples, valid_samples, ctx):
    m, _ = _setup(split, train_samples, ctx)
    with pytest.raises(ValueError):
        joint_train(TrainerConfig(), train_samples, valid_samples, m, ctx, None)
    with pytest.raises(ValueError):
        joint_train(TrainerConfig(), train_samples, valid_samples, m, ctx, Planner(8, 30, (2, 2)))


def test_history_csv_roundtrip(tmp_path):
    h = [{"epoch": 0, "train_loss": 0.1, "valid_loss": 1 / 3, "valid_std": 0.2, "alpha": 0.001, "c_es": 0,
          "planner_updates": 0, "first_step": 0, "last_step": 4}]
    write_history(h, tmp_path / "h.csv")
    assert read_history(tmp_path / "h.csv") == h
