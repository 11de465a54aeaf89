import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from statsmodels.tsa.stattools import coint

from driftforge.mixups import (
    CointMatrix,
    MixKind,
    amplitude_mix,
    apply_mixup,
    cut_mix,
    engle_granger_pvalue,
    linear_mix,
    mix_target_distribution,
    sample_mix_target,
    schwert_lag,
    tailored_mix,
)


def _pair(seed, n=300, linked=True):
    rng = np.random.default_rng(seed)
    b = np.cumsum(rng.standard_normal(n))
    a = 0.8 * b + rng.standard_normal(n) if linked else np.cumsum(rng.standard_normal(n))
    return a, b


def test_schwert_lag_by_hand():
    # 12 * (n / 100) ** 0.25, floored
    assert schwert_lag(100) == 12
    assert schwert_lag(300) == 15
    assert schwert_lag(16) == 7


@pytest.mark.parametrize("seed,linked", [(0, True), (1, False), (2, True), (3, False)])
def test_engle_granger_matches_statsmodels(seed, linked):
    a, b = _pair(seed, linked=linked)
    lag = schwert_lag(len(a))
    _, ref, _ = coint(a, b, trend="c", maxlag=lag, autolag=None)
    assert engle_granger_pvalue(a, b) == pytest.approx(ref, abs=1e-10)


def test_engle_granger_separates_linked_from_independent():
    assert engle_granger_pvalue(*_pair(10, linked=True)) < 0.05
    assert engle_granger_pvalue(*_pair(11, linked=False)) > 0.05


def test_engle_granger_input_errors():
    a, b = _pair(0)
    with pytest.raises(ValueError):
        engle_granger_pvalue(a[:10], b[:10])
    with pytest.raises(ValueError):
        engle_granger_pvalue(a, np.ones_like(a))
    with pytest.raises(ValueError):
        engle_granger_pvalue(a, b[:-1])


def _matrix():
    pv = np.array(
        [
            [np.nan, 0.01, 0.20, 0.60, np.nan],
            [0.01, np.nan, 0.3, 0.3, 0.3],
            [0.2, 0.3, np.nan, 0.3, 0.3],
            [0.6, 0.3, 0.3, np.nan, 0.3],
            [0.5, 0.3, 0.3, 0.3, np.nan],
        ]
    )
    return CointMatrix(pv, tuple("ABCDE"))


def test_target_distribution_by_hand():
    cm = _matrix()
    # lam <= 0.5: score -p**(1-lam); top-k then softmax
    idx, q = mix_target_distribution(0, 0.25, cm, 3)
    s = -np.array([0.01, 0.20, 0.60]) ** 0.75
    e = np.exp(s - s.max())
    assert idx.tolist() == [1, 2, 3]
    np.testing.assert_allclose(q, e / e.sum(), rtol=1e-12)
    # lam > 0.5: score p**(1/lam), weakly linked partners first
    idx, q = mix_target_distribution(0, 0.75, cm, 2)
    s = np.array([0.60, 0.20]) ** (1 / 0.75)
    e = np.exp(s - s.max())
    assert idx.tolist() == [3, 2]
    np.testing.assert_allclose(q, e / e.sum(), rtol=1e-12)


def test_nan_entries_are_not_candidates():
    idx, _ = mix_target_distribution(0, 0.5, _matrix(), 10)
    assert 4 not in idx.tolist() and len(idx) == 3


def test_k_one_endpoints_are_deterministic(rng):
    cm = _matrix()
    assert {sample_mix_target(0, 0.0, cm, 1, rng) for _ in range(50)} == {1}
    assert {sample_mix_target(0, 1.0, cm, 1, rng) for _ in range(50)} == {3}


def test_no_partner_raises():
    cm = CointMatrix(np.array([[np.nan, np.nan], [np.nan, np.nan]]), ("A", "B"))
    with pytest.raises(ValueError):
        mix_target_distribution(0, 0.5, cm, 2)


def test_coint_csv_roundtrip(tmp_path):
    cm = _matrix()
    cm.to_csv(tmp_path / "c.csv")
    back = CointMatrix.from_csv(tmp_path / "c.csv")
    np.testing.assert_array_equal(np.isnan(back.pvalues), np.isnan(cm.pvalues))
    np.testing.assert_array_equal(np.nan_to_num(back.pvalues), np.nan_to_num(cm.pvalues))
    assert back.stock_ids == cm.stock_ids


def _windows(rng, L=32, F=3):
    return rng.standard_normal((L, F)), rng.standard_normal((L, F))


@pytest.mark.parametrize("kind", list(MixKind))
def test_zero_strength_is_identity(kind, rng):
    xs, xt = _windows(rng)
    out, y = apply_mixup(kind, 0.0, (xs, 0.3), (xt, -1.0), rng)
    np.testing.assert_allclose(out, xs, atol=1e-12)
    assert y == pytest.approx(0.3, abs=1e-15)


def test_cut_mix_replaces_one_contiguous_span(rng):
    xs, xt = _windows(rng, L=20)
    out, w = cut_mix(xs, xt, 0.3, rng)
    replaced = np.all(out == xt, axis=1) & ~np.all(out == xs, axis=1)
    rows = np.flatnonzero(replaced)
    assert len(rows) == 6 and np.all(np.diff(rows) == 1)
    assert w == 6 / 20


def test_linear_mix_labels(rng):
    xs, xt = _windows(rng)
    out, y = apply_mixup(MixKind.LINEAR_MIX, 0.25, (xs, 1.0), (xt, 5.0), rng)
    np.testing.assert_allclose(out, 0.75 * xs + 0.25 * xt)
    assert y == 2.0


def test_amplitude_mix_blends_magnitudes_keeps_phase(rng):
    xs, xt = _windows(rng)
    out, _ = amplitude_mix(xs, xt, 0.4)
    fo, fs, ft = (np.fft.rfft(a, axis=0) for a in (out, xs, xt))
    # the Nyquist and DC bins are real, so their phase can flip sign; compare interior bins
    inner = slice(1, -1)
    np.testing.assert_allclose(np.abs(fo[inner]), 0.6 * np.abs(fs[inner]) + 0.4 * np.abs(ft[inner]), rtol=1e-9)
    np.testing.assert_allclose(np.angle(fo[inner] / fs[inner]), 0.0, atol=1e-9)


def test_tailored_mix_touches_only_dominant_bins(rng):
    xs, xt = _windows(rng, L=32, F=1)
    lam = 0.5
    out, _ = tailored_mix(xs, xt, lam)
    fo, fs, ft = (np.fft.rfft(a, axis=0)[:, 0] for a in (out, xs, xt))
    q = round(lam * 32 / 4)
    top = set(np.argsort(-np.abs(ft), kind="stable")[:q].tolist())
    untouched = [k for k in range(len(fs)) if k not in top]
    np.testing.assert_allclose(fo[untouched], fs[untouched], atol=1e-9)
    for k in top:
        assert abs(abs(fo[k]) - (0.5 * abs(fs[k]) + 0.5 * abs(ft[k]))) < 1e-9


def test_tailored_mix_full_strength_takes_target_at_dominant_bins(rng):
    xs, xt = _windows(rng, L=16, F=1)
    out, _ = tailored_mix(xs, xt, 1.0)
    fo, ft = np.fft.rfft(out[:, 0]), np.fft.rfft(xt[:, 0])
    top = np.argsort(-np.abs(ft), kind="stable")[:4]
    np.testing.assert_allclose(fo[top], ft[top], atol=1e-9)


@given(st.floats(0.0, 1.0), st.sampled_from(list(MixKind)), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_label_is_convex_combination(lam, kind, seed):
    rng = np.random.default_rng(seed)
    xs, xt = _windows(rng, L=12, F=2)
    out, y = apply_mixup(kind, lam, (xs, -1.0), (xt, 3.0), rng)
    assert -1.0 - 1e-12 <= y <= 3.0 + 1e-12
    assert out.shape == xs.shape and np.all(np.isfinite(out))


def test_shape_mismatch_rejected(rng):
    with pytest.raises(ValueError):
        apply_mixup(MixKind.LINEAR_MIX, 0.5, (np.zeros((4, 2)), 0.0), (np.zeros((5, 2)), 0.0), rng)
