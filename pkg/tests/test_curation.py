import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import entropy

from driftforge.curation import (
    PRICE_FLOOR,
    BinaryMixConfig,
    binary_mix,
    binary_mix_weight,
    curate,
    denormalize_at,
    enforce_kline_consistency,
    estimate_mutual_information,
    normalize_at,
    rolling_denormalize,
    rolling_normalize,
)
from driftforge.data import kline_violations


def test_kline_repair_by_hand():
    bar = np.array([[10.0, 9.0, 11.0, 10.5, 100.0]])
    out = enforce_kline_consistency(bar)
    assert out.tolist() == [[10.0, 11.0, 9.0, 10.5, 100.0]]


@given(arrays(np.float64, (30, 5), elements=st.floats(-50, 50, allow_nan=False)))
@settings(max_examples=60)
def test_curate_postconditions(w):
    out = curate(w)
    assert not kline_violations(out).any()
    assert np.all(out[:, :4] >= PRICE_FLOOR)
    assert np.all(out[:, 4] >= 0)
    # open and close only move when they were below the floor
    keep = w[:, [0, 3]] >= PRICE_FLOOR
    np.testing.assert_array_equal(out[:, [0, 3]][keep], w[:, [0, 3]][keep])


def test_curate_rejects_nan():
    w = np.ones((3, 5))
    w[1, 2] = np.nan
    with pytest.raises(ValueError):
        curate(w)


@given(arrays(np.float64, (12, 3), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_normalisation_roundtrip(w):
    rng = np.random.default_rng(0)
    mean = rng.standard_normal(w.shape)
    std = np.abs(rng.standard_normal(w.shape)) + 0.1
    back = rolling_denormalize(rolling_normalize(w, mean, std), mean, std)
    np.testing.assert_allclose(back, w, rtol=1e-12, atol=1e-9)


def test_normalize_uses_window_statistics(split, stats):
    w = split.train.values[10:30, 1]
    z = normalize_at(w, stats, 1, 29)
    np.testing.assert_allclose(z, (w - stats.mean[10:30, 1]) / stats.std[10:30, 1])
    np.testing.assert_allclose(denormalize_at(z, stats, 1, 29), w, rtol=1e-12)


def test_missing_statistics_raise():
    with pytest.raises(ValueError):
        rolling_normalize(np.ones((3, 2)), None, None)
    with pytest.raises(ValueError):
        rolling_normalize(np.ones((3, 2)), np.zeros((2, 2)), np.ones((2, 2)))


def _mi_oracle(x, y, bins):
    joint, _, _ = np.histogram2d(x, y, bins=bins)
    pxy = joint.ravel() / joint.sum()
    return entropy(joint.sum(axis=1)) + entropy(joint.sum(axis=0)) - entropy(pxy)


def test_mutual_information_matches_entropy_identity(rng):
    x = rng.standard_normal(500)
    y = 0.6 * x + 0.8 * rng.standard_normal(500)
    est = estimate_mutual_information(x, y, bins=12)
    assert est.mi_xy == pytest.approx(_mi_oracle(x, y, 12), rel=1e-10)
    assert est.mi_xx == pytest.approx(_mi_oracle(x, x, 12), rel=1e-10)
    assert 0 < est.mi_xy < est.mi_xx


def test_binary_mix_weight_extremes(rng):
    x = rng.standard_normal((64, 1))
    cfg = BinaryMixConfig(b_max=0.5, bins=8)
    # identical windows share all information: no compensation
    b, _ = binary_mix_weight(x, x.copy(), cfg, rng)
    assert b == 0.0
    # unrelated windows pull hard toward the original
    b, est = binary_mix_weight(x, rng.standard_normal((64, 1)), cfg, rng)
    assert b == pytest.approx(0.5 - 0.5 * est.mi_xy / est.mi_xx)
    assert 0.3 < b <= 0.5


def test_binary_mix_output_between_inputs(rng):
    x = rng.standard_normal((40, 2))
    y = rng.standard_normal((40, 2))
    out = binary_mix(x, y, BinaryMixConfig(), rng)
    t = (out - y) / (x - y)
    assert np.allclose(t, t.flat[0]) and 0.0 <= t.flat[0] <= 0.5


def test_binary_mix_config_validation():
    with pytest.raises(ValueError):
        BinaryMixConfig(b_max=1.5)
    with pytest.raises(ValueError):
        BinaryMixConfig(bins=1)
    with pytest.raises(ValueError):
        binary_mix_weight(np.ones((20, 2)), np.ones((20, 2)), BinaryMixConfig(), np.random.default_rng(0))
