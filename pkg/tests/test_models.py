import numpy as np
import pytest

from driftforge import diffcore as dc
from driftforge.data import CLOSE
from driftforge.diffcore import Tensor, grad_check
from driftforge.models import (
    GRUForecaster,
    InputEncoder,
    LinearForecaster,
    LossConfig,
    Optimizer,
    TrainingError,
    build_model,
    evaluate,
    moving_average_matrix,
    sharpe_loss,
    train_epoch,
    train_step,
)


def test_sharpe_loss_closed_form(rng):
    e = rng.random(20)
    t = Tensor(e, requires_grad=True)
    out = sharpe_loss(t, 0.3)
    assert out.item() == pytest.approx(e.mean() + 0.3 * e.std())
    out.backward()
    ref = 1 / 20 + 0.3 * (e - e.mean()) / (20 * e.std())
    np.testing.assert_allclose(t.grad, ref, rtol=1e-12)
    assert sharpe_loss(Tensor(e), 0.0).item() == pytest.approx(e.mean())
    with pytest.raises(ValueError):
        LossConfig(-1.0)


def test_moving_average_rows_sum_to_one():
    A = moving_average_matrix(9, 5)
    np.testing.assert_allclose(A.sum(axis=1), 1.0)
    x = np.arange(9.0)
    # interior rows are a plain centred mean
    assert (A @ x)[4] == pytest.approx(x[2:7].mean())
    # edges replicate the first value
    assert (A @ x)[0] == pytest.approx((0 + 0 + 0 + 1 + 2) / 5)


def test_gru_matches_torch(rng):
    torch = pytest.importorskip("torch")
    F, L, H = 3, 7, 5
    m = GRUForecaster(F, L, hidden=H, feature_width=4, seed=3)
    x = rng.standard_normal((2, L, F))
    gru = torch.nn.GRU(F, H, batch_first=True, dtype=torch.float64)
    P = m.params
    with torch.no_grad():
        # torch stacks gates as (r, z, n) rows
        gru.weight_ih_l0.copy_(torch.tensor(np.concatenate([P[f"gru.x{g}.w"].data.T for g in "rzn"])))
        gru.bias_ih_l0.copy_(torch.tensor(np.concatenate([P[f"gru.x{g}.b"].data for g in "rzn"])))
        gru.weight_hh_l0.copy_(torch.tensor(P["gru.h"].data.T))
        gru.bias_hh_l0.copy_(torch.tensor(np.concatenate([np.zeros(2 * H), P["gru.hn_b"].data])))
    _, h = gru(torch.tensor(x))
    ref = np.tanh(h[0].detach().numpy() @ P["fc.w"].data + P["fc.b"].data)
    np.testing.assert_allclose(m.features(x).data, ref, rtol=1e-10, atol=1e-12)


def test_linear_forward_by_hand(rng):
    F, L = 2, 6
    m = LinearForecaster(F, L, feature_width=3, seed=1)
    x = rng.standard_normal((4, L, F))
    A = moving_average_matrix(L)
    trend = A @ x
    flat = np.concatenate([trend.reshape(4, -1), (x - trend).reshape(4, -1)], axis=1)
    P = m.params
    ref = (flat @ P["fc.w"].data + P["fc.b"].data) @ P["head.w"].data + P["head.b"].data
    np.testing.assert_allclose(m.forward(x).data, ref[:, 0], rtol=1e-12)


def _ohlcv(rng, B, L):
    c = 100 * np.exp(np.cumsum(0.01 * rng.standard_normal((B, L)), axis=1))
    o = c * (1 + 0.002 * rng.standard_normal((B, L)))
    return np.stack([o, np.maximum(o, c) * 1.01, np.minimum(o, c) * 0.99, c, np.exp(10 + rng.standard_normal((B, L)))], axis=2)


def test_encoder_is_scale_free(split, rng):
    enc = InputEncoder.fit(split.train)
    c = split.train.values[:, :, CLOSE]
    assert enc.price_scale == pytest.approx((np.diff(c, axis=0) / c[:-1]).std())
    assert enc.output_scale == enc.price_scale
    x = _ohlcv(rng, 3, 10)
    scaled = x.copy()
    scaled[..., :4] *= 7.0
    np.testing.assert_allclose(enc(x).data, enc(scaled).data, atol=1e-12)
    assert np.all(enc(x).data[:, -1, CLOSE] == 0.0)
    assert InputEncoder(raw=True).output_scale == 1.0


def test_encoder_standardises_extra_columns(panel):
    extra = np.arange(panel.n_timestamps * panel.n_stocks, dtype=float).reshape(panel.n_timestamps, panel.n_stocks, 1)
    wide = type(panel)(np.concatenate([panel.values, extra], axis=2), panel.timestamps, panel.stock_ids, panel.feature_ids + ("idx",))
    enc = InputEncoder.fit(wide)
    assert enc.extra_mean[0] == pytest.approx(extra.mean())
    assert enc.extra_std[0] == pytest.approx(extra.std())


@pytest.mark.parametrize("kind", ["gru", "linear"])
def test_model_gradients_pass_finite_differences(kind, split, rng):
    enc = InputEncoder.fit(split.train)
    m = build_model(kind, 5, 6, enc, seed=2, hidden=4, feature_width=5)
    x = _ohlcv(rng, 4, 6)
    y = 0.01 * rng.standard_normal(4)
    fn = lambda: sharpe_loss((m.forward(x) - y) ** 2, 0.05)
    assert grad_check(fn, m.params, max_entries=12, rng=rng) < 1e-4


def test_shape_check_and_unknown_kind():
    m = build_model("linear", 5, 8)
    with pytest.raises(ValueError, match="expected windows"):
        m.forward(np.zeros((2, 7, 5)))
    assert m.forward(np.zeros((8, 5))).shape == (1,)
    with pytest.raises(ValueError):
        build_model("transformer", 5, 8)


def test_predict_chunks_agree(rng):
    m = build_model("gru", 5, 4, hidden=3, feature_width=4)
    x = rng.standard_normal((11, 4, 5))
    np.testing.assert_allclose(m.predict(x, chunk=3), m.forward(x).data, rtol=1e-12)


def test_clone_is_independent():
    m = build_model("linear", 5, 4, seed=0)
    c = m.clone()
    c.params["fc.w"].data += 1.0
    assert not np.array_equal(c.params["fc.w"].data, m.params["fc.w"].data)


def test_training_reduces_loss_on_learnable_target(rng):
    m = build_model("linear", 1, 5, seed=0, feature_width=8)
    x = rng.standard_normal((256, 5, 1))
    y = x[:, -1, 0] - 0.5 * x[:, -2, 0]
    opt = Optimizer(m.params, 1e-2)
    before = evaluate(m, x, y).mean
    for _ in range(20):
        train_epoch(m, [(x[k : k + 32], y[k : k + 32]) for k in range(0, 256, 32)], LossConfig(0.05), opt)
    after = evaluate(m, x, y)
    assert after.mean < 0.05 * before
    assert after.std == pytest.approx(after.per_sample.std())


def test_nonfinite_loss_raises(rng):
    m = build_model("linear", 1, 3)
    with pytest.raises(TrainingError):
        train_step(m, np.full((2, 3, 1), np.inf), np.zeros(2), LossConfig(), Optimizer(m.params))
