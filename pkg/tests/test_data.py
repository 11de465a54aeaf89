import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftforge.data import (
    CLOSE,
    ConfigurationError,
    CsvSchema,
    DataError,
    KlineBar,
    PanelSeries,
    chronological_split,
    fit_rolling_stats,
    kline_violations,
    load_panel_csv,
    make_windows,
    parse_timestamp,
    split_sizes,
    write_panel_csv,
)


def _write(path, text):
    path.write_text(text)
    return path


def test_parse_timestamp_normalises_offsets_to_utc():
    # 09:30 at +02:00 is 07:30 UTC; epoch seconds parse directly
    assert parse_timestamp("2021-03-04T09:30:00+02:00") == np.datetime64("2021-03-04T07:30:00")
    assert parse_timestamp("2021-03-04T07:30:00Z") == np.datetime64("2021-03-04T07:30:00")
    assert parse_timestamp("86400") == np.datetime64("1970-01-02T00:00:00")


def test_load_wide_files_forward_then_back_fills(tmp_path):
    a = _write(
        tmp_path / "AAA.csv",
        "timestamp,open,high,low,close,volume\n"
        "2021-01-01,,2,1,1.5,10\n"
        "2021-01-02,1.6,2.1,1.2,,11\n"
        "2021-01-03,1.7,2.2,1.3,1.8,12\n",
    )
    b = _write(
        tmp_path / "BBB.csv",
        "timestamp,open,high,low,close,volume\n"
        "2021-01-01,5,6,4,5.5,1\n"
        "2021-01-02,5,6,4,5.5,1\n"
        "2021-01-03,5,6,4,5.5,NA\n",
    )
    panel = load_panel_csv([b, a])
    assert panel.stock_ids == ("AAA", "BBB")
    assert panel.shape == (3, 2, 5)
    # leading gap back-filled from the next observation, interior gap forward-filled
    assert panel.values[0, 0, 0] == 1.6
    assert panel.values[1, 0, CLOSE] == 1.5
    assert panel.values[2, 1, 4] == 1.0


def test_load_long_format_and_roundtrip(tmp_path, panel):
    path = tmp_path / "long.csv"
    write_panel_csv(panel, path)
    back = load_panel_csv([path], CsvSchema(stock="stock"))
    np.testing.assert_array_equal(back.values, panel.values)
    np.testing.assert_array_equal(back.timestamps, panel.timestamps)
    assert back.stock_ids == panel.stock_ids


def test_misaligned_timestamps_rejected(tmp_path):
    a = _write(tmp_path / "A.csv", "timestamp,open,high,low,close,volume\n2021-01-01,1,1,1,1,1\n2021-01-02,1,1,1,1,1\n")
    b = _write(tmp_path / "B.csv", "timestamp,open,high,low,close,volume\n2021-01-01,1,1,1,1,1\n2021-01-03,1,1,1,1,1\n")
    with pytest.raises(DataError, match="align"):
        load_panel_csv([a, b])


def test_missing_column_and_bad_cells(tmp_path):
    a = _write(tmp_path / "A.csv", "timestamp,open,high,low,close\n2021-01-01,1,1,1,1\n")
    with pytest.raises(DataError, match="missing columns"):
        load_panel_csv([a])
    b = _write(tmp_path / "B.csv", "timestamp,open,high,low,close,volume\n2021-01-01,1,x,1,1,1\n")
    with pytest.raises(DataError, match="non-numeric"):
        load_panel_csv([b])


def test_single_stock_rejected_when_mixups_need_partners(tmp_path):
    a = _write(tmp_path / "A.csv", "timestamp,open,high,low,close,volume\n2021-01-01,1,1,1,1,1\n")
    with pytest.raises(ConfigurationError):
        load_panel_csv([a], require_multi_stock=True)


def test_kline_bar_validation():
    KlineBar(1.0, 2.0, 0.5, 1.5, 0.0)
    with pytest.raises(DataError):
        KlineBar(1.0, 1.2, 0.5, 1.5, 0.0)
    with pytest.raises(DataError):
        KlineBar(1.0, 2.0, 0.5, 1.5, -1.0)


def test_kline_violations_mask():
    rows = np.array([[1.0, 2.0, 0.5, 1.5], [1.0, 1.2, 0.5, 1.5], [1.0, 2.0, 1.1, 1.5]])
    assert kline_violations(rows).tolist() == [False, True, True]


def test_panel_is_read_only(panel):
    with pytest.raises(ValueError):
        panel.values[0, 0, 0] = 1.0


def test_panel_rejects_nonmonotone_time():
    ts = np.array(["2021-01-02", "2021-01-01"], dtype="datetime64[s]")
    with pytest.raises(DataError, match="increasing"):
        PanelSeries(np.ones((2, 1, 5)), ts, ("A",))


def test_split_sizes_by_hand():
    assert split_sizes(10, (0.6, 0.2, 0.2)) == (6, 2, 2)
    assert split_sizes(101, (0.6, 0.2, 0.2)) == (60, 20, 21)
    with pytest.raises(ConfigurationError):
        split_sizes(10, (0.6, 0.3, 0.2))
    with pytest.raises(ConfigurationError, match="empty"):
        split_sizes(3, (0.8, 0.1, 0.1))


@given(st.integers(min_value=10, max_value=5000))
def test_split_covers_panel_without_overlap(n):
    a, b, c = split_sizes(n, (0.6, 0.2, 0.2))
    assert a + b + c == n and min(a, b, c) > 0


def test_chronological_split_bounds(panel):
    sp = chronological_split(panel)
    assert sp.bounds == (120, 160)
    np.testing.assert_array_equal(sp.valid.values, panel.values[120:160])
    assert sp.test.timestamps[0] > sp.valid.timestamps[-1] > sp.train.timestamps[-1]


def test_rolling_stats_match_direct_slices(split):
    stats = fit_rolling_stats(split.train, window=7)
    v = split.train.values
    for t in (0, 3, 6, 50, len(v) - 1):
        chunk = v[max(0, t - 6) : t + 1]
        np.testing.assert_allclose(stats.mean[t], chunk.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(stats.std[t], np.maximum(chunk.std(axis=0), 1e-8), rtol=1e-12)


def test_rolling_stats_configuration_errors(split):
    with pytest.raises(ConfigurationError):
        fit_rolling_stats(split.train, window=1)
    with pytest.raises(ConfigurationError):
        fit_rolling_stats(split.train, window=len(split.train) + 1)
    stats = fit_rolling_stats(split.train, window=5)
    with pytest.raises(DataError):
        stats.at(0, 3, 5)


def test_make_windows_targets_are_next_close_returns(split):
    s = make_windows(split.train, 5)
    T, S = len(split.train), split.train.n_stocks
    assert len(s) == S * (T - 5)
    c = split.train.values[:, :, CLOSE]
    k = 17
    t, st_ = s.end[k], s.stock[k]
    assert s.targets[k] == (c[t + 1, st_] - c[t, st_]) / c[t, st_]
    np.testing.assert_array_equal(s.windows[k], split.train.values[t - 4 : t + 1, st_])
    sub = s.subset(np.array([3, 1]))
    assert sub.ids.tolist() == [3, 1]
    with pytest.raises(DataError):
        make_windows(split.train, len(split.train))


def test_valid_windows_keep_origin(split):
    s = make_windows(split.valid, 4, origin=split.bounds[0])
    assert s.origin == 120
    assert all(math.isfinite(x) for x in s.targets)
