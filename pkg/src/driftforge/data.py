"""OHLCV panels, chronological splits, forecasting windows and rolling statistics.

A panel is a dense ``(timestamps, stocks, features)`` array whose first five
features are open, high, low, close and volume. Everything downstream indexes
price columns through :data:`OHLCV`, so loaders must keep that order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

OHLCV = ("open", "high", "low", "close", "volume")
OPEN, HIGH, LOW, CLOSE, VOLUME = range(5)
STD_FLOOR = 1e-8


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class ConfigurationError(ValueError):
    """Raised when the data cannot support the requested configuration."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class KlineBar:
    open: float
    high: float
    low: float
    close: float
    volume: float

    def __post_init__(self) -> None:
        if min(self.open, self.high, self.low, self.close) <= 0:
            raise DataError(f"non-positive price in {self}")
        if self.volume < 0:
            raise DataError(f"negative volume in {self}")
        if not (self.low <= min(self.open, self.close) and max(self.open, self.close) <= self.high):
            raise DataError(f"inconsistent bar {self}")


def kline_violations(values: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Boolean mask over rows of ``values[..., :4]`` that break L <= min(O,C) <= max(O,C) <= H."""
    o, h, lo, c = (values[..., i] for i in (OPEN, HIGH, LOW, CLOSE))
    return (lo > np.minimum(o, c) + tol) | (np.maximum(o, c) > h + tol) | (lo > h + tol)


@dataclass(frozen=True)
class PanelSeries:
    values: np.ndarray
    timestamps: np.ndarray
    stock_ids: tuple[str, ...]
    feature_ids: tuple[str, ...] = OHLCV

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise DataError(f"panel values must be 3-D, got shape {values.shape}")
        t, s, f = values.shape
        if len(self.timestamps) != t or len(self.stock_ids) != s or len(self.feature_ids) != f:
            raise DataError(
                f"axis labels do not match values shape {values.shape}: "
                f"{len(self.timestamps)} timestamps, {len(self.stock_ids)} stocks, "
                f"{len(self.feature_ids)} features"
            )
        if not np.all(np.isfinite(values)):
            raise DataError("panel contains missing or non-finite values")
        ts = np.asarray(self.timestamps)
        if t > 1 and not np.all(ts[1:] > ts[:-1]):
            raise DataError("timestamps must be strictly increasing")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "timestamps", _readonly(ts))
        object.__setattr__(self, "stock_ids", tuple(self.stock_ids))
        object.__setattr__(self, "feature_ids", tuple(self.feature_ids))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def n_timestamps(self) -> int:
        return self.values.shape[0]

    @property
    def n_stocks(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def closes(self) -> np.ndarray:
        return self.values[:, :, CLOSE]

    def slice(self, start: int, stop: int) -> "PanelSeries":
        return PanelSeries(self.values[start:stop], self.timestamps[start:stop], self.stock_ids, self.feature_ids)

    def with_values(self, values: np.ndarray) -> "PanelSeries":
        return PanelSeries(values, self.timestamps, self.stock_ids, self.feature_ids)


@dataclass(frozen=True)
class CsvSchema:
    """Column names in the source files. ``stock`` set means long format."""

    timestamp: str = "timestamp"
    open: str = "open"
    high: str = "high"
    low: str = "low"
    close: str = "close"
    volume: str = "volume"
    indicators: tuple[str, ...] = ()
    stock: str | None = None

    @property
    def feature_columns(self) -> tuple[str, ...]:
        return (self.open, self.high, self.low, self.close, self.volume, *self.indicators)


_MISSING = {"", "na", "nan", "null", "none"}


def parse_timestamp(text: str) -> np.datetime64:
    """RFC 3339 / ISO 8601 text or epoch seconds, normalised to UTC seconds."""
    text = text.strip()
    try:
        return np.datetime64(int(float(text)), "s")
    except ValueError:
        pass
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def _read_rows(path: Path, schema: CsvSchema) -> dict[str, list[tuple[np.datetime64, list[float]]]]:
    out: dict[str, list[tuple[np.datetime64, list[float]]]] = {}
    cols = schema.feature_columns
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [schema.timestamp, *cols] + ([schema.stock] if schema.stock else [])
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for row in reader:
            line = reader.line_num
            try:
                ts = parse_timestamp(row[schema.timestamp])
            except ValueError as exc:
                raise DataError(f"{path}:{line}: bad timestamp {row[schema.timestamp]!r}") from exc
            feats = []
            for c in cols:
                cell = (row[c] or "").strip()
                if cell.lower() in _MISSING:
                    feats.append(math.nan)
                    continue
                try:
                    feats.append(float(cell))
                except ValueError as exc:
                    raise DataError(f"{path}:{line}: non-numeric value {cell!r} in column {c!r}") from exc
            stock = row[schema.stock] if schema.stock else path.stem
            out.setdefault(stock, []).append((ts, feats))
    return out


def _fill_gaps(a: np.ndarray) -> np.ndarray:
    """Forward-fill then back-fill NaNs along axis 0 of a (T, F) array."""
    a = a.copy()
    for j in range(a.shape[1]):
        col = a[:, j]
        mask = np.isnan(col)
        if not mask.any():
            continue
        if mask.all():
            raise DataError(f"feature column {j} has no observations")
        idx = np.where(~mask, np.arange(len(col)), 0)
        np.maximum.accumulate(idx, out=idx)
        col = col[idx]
        first = np.argmax(~np.isnan(col))
        col[:first] = col[first]
        a[:, j] = col
    return a


def load_panel_csv(
    paths: Sequence[str | Path],
    schema: CsvSchema | None = None,
    require_multi_stock: bool = False,
) -> PanelSeries:
    """Load one-file-per-stock or long-format CSVs into an aligned panel.

    Missing cells are forward-filled, then back-filled. All stocks must share
    exactly the same timestamps.
    """
    schema = schema or CsvSchema()
    per_stock: dict[str, list[tuple[np.datetime64, list[float]]]] = {}
    for p in paths:
        for stock, rows in _read_rows(Path(p), schema).items():
            if stock in per_stock:
                raise DataError(f"stock {stock!r} appears in more than one source")
            per_stock[stock] = rows
    if not per_stock:
        raise DataError("no rows loaded")
    if require_multi_stock and len(per_stock) < 2:
        raise ConfigurationError("mix-up operations need at least 2 stocks")

    stock_ids = tuple(sorted(per_stock))
    grids = {}
    arrays = []
    for s in stock_ids:
        rows = sorted(per_stock[s], key=lambda r: r[0])
        ts = np.array([r[0] for r in rows], dtype="datetime64[s]")
        if len(ts) > 1 and not np.all(ts[1:] > ts[:-1]):
            raise DataError(f"stock {s!r} has duplicate timestamps")
        grids[s] = ts
        arrays.append(_fill_gaps(np.array([r[1] for r in rows], dtype=np.float64)))
    ref = grids[stock_ids[0]]
    for s in stock_ids[1:]:
        if len(grids[s]) != len(ref) or not np.array_equal(grids[s], ref):
            raise DataError(f"stock {s!r} timestamps do not align with {stock_ids[0]!r}")
    values = np.stack(arrays, axis=1)
    if np.any(values[:, :, VOLUME] < 0):
        raise DataError("negative volume")
    feature_ids = OHLCV + tuple(schema.indicators)
    return PanelSeries(values, ref, stock_ids, feature_ids)


def write_panel_csv(panel: PanelSeries, path: str | Path) -> None:
    """Long-format export (timestamp, stock, features...) with full float precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "stock", *panel.feature_ids])
        for t, ts in enumerate(panel.timestamps):
            stamp = str(np.datetime_as_string(ts, unit="s")) + "Z"
            for s, sid in enumerate(panel.stock_ids):
                w.writerow([stamp, sid, *(repr(float(v)) for v in panel.values[t, s])])


@dataclass(frozen=True)
class SplitDataset:
    train: PanelSeries
    valid: PanelSeries
    test: PanelSeries
    ratios: tuple[float, float, float]
    bounds: tuple[int, int] = (0, 0)


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigurationError(f"ratios must be three positive fractions, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must sum to 1, got {sum(ratios)!r}")
    b1 = math.floor(n * ratios[0] + 1e-9)
    b2 = math.floor(n * (ratios[0] + ratios[1]) + 1e-9)
    sizes = (b1, b2 - b1, n - b2)
    if min(sizes) <= 0:
        raise ConfigurationError(f"split of {n} timestamps by {tuple(ratios)} leaves an empty part: {sizes}")
    return sizes


def chronological_split(panel: PanelSeries, ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> SplitDataset:
    n_train, n_valid, _ = split_sizes(len(panel), ratios)
    b1, b2 = n_train, n_train + n_valid
    return SplitDataset(
        train=panel.slice(0, b1),
        valid=panel.slice(b1, b2),
        test=panel.slice(b2, len(panel)),
        ratios=tuple(float(r) for r in ratios),  # type: ignore[arg-type]
        bounds=(b1, b2),
    )


@dataclass(frozen=True)
class RollingStats:
    """Trailing mean/std per (timestamp, stock, feature) over the training range.

    The first ``window - 1`` positions use the expanding prefix.
    """

    mean: np.ndarray
    std: np.ndarray
    window: int
    eps: float = STD_FLOOR

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _readonly(self.mean))
        object.__setattr__(self, "std", _readonly(self.std))

    @property
    def n_timestamps(self) -> int:
        return self.mean.shape[0]

    def at(self, stock: int, end: int, length: int) -> tuple[np.ndarray, np.ndarray]:
        start = end - length + 1
        if start < 0 or end >= self.n_timestamps or not 0 <= stock < self.mean.shape[1]:
            raise DataError(
                f"no rolling statistics for stock {stock}, positions {start}..{end} "
                f"(available 0..{self.n_timestamps - 1})"
            )
        return self.mean[start : end + 1, stock], self.std[start : end + 1, stock]


def fit_rolling_stats(train: PanelSeries, window: int = 60, eps: float = STD_FLOOR) -> RollingStats:
    if window <= 1:
        raise ConfigurationError(f"rolling window must exceed 1, got {window}")
    if window > len(train):
        raise ConfigurationError(f"rolling window {window} exceeds training length {len(train)}")
    v = train.values
    mean = np.empty_like(v)
    std = np.empty_like(v)
    for t in range(v.shape[0]):
        chunk = v[max(0, t - window + 1) : t + 1]
        m = chunk.mean(axis=0)
        mean[t] = m
        std[t] = np.sqrt(((chunk - m) ** 2).mean(axis=0))
    np.maximum(std, eps, out=std)
    return RollingStats(mean, std, window, eps)


@dataclass(frozen=True)
class ForecastSample:
    window: np.ndarray
    target: float
    stock: int
    end: int


@dataclass
class SampleSet:
    """Column-wise store of forecasting samples from one split.

    ``end`` indexes the split; ``origin`` is the split's first row in the panel.
    """

    windows: np.ndarray
    targets: np.ndarray
    stock: np.ndarray
    end: np.ndarray
    origin: int = 0
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.ids is None:
            self.ids = np.arange(len(self.targets))

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, i: int) -> ForecastSample:
        return ForecastSample(self.windows[i], float(self.targets[i]), int(self.stock[i]), int(self.end[i]))

    def __iter__(self) -> Iterator[ForecastSample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx: np.ndarray) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.windows[idx], self.targets[idx], self.stock[idx], self.end[idx], self.origin, self.ids[idx])

    @property
    def lookback(self) -> int:
        return self.windows.shape[1]


def close_to_close_return(closes: np.ndarray, t: int) -> float:
    return float((closes[t + 1] - closes[t]) / closes[t])


def make_windows(split: PanelSeries, lookback: int = 60, origin: int = 0) -> SampleSet:
    """One sample per (stock, end time t) for t in [L-1, T-2]; targets from raw closes."""
    T = len(split)
    if lookback < 1 or T < lookback + 1:
        raise DataError(f"split of length {T} is too short for lookback {lookback}")
    ends = np.arange(lookback - 1, T - 1)
    v = split.values
    closes = v[:, :, CLOSE]
    windows, targets, stock, end = [], [], [], []
    for s in range(split.n_stocks):
        for t in ends:
            windows.append(v[t - lookback + 1 : t + 1, s])
            targets.append((closes[t + 1, s] - closes[t, s]) / closes[t, s])
            stock.append(s)
            end.append(t)
    return SampleSet(
        np.array(windows, dtype=np.float64),
        np.array(targets, dtype=np.float64),
        np.array(stock, dtype=np.int64),
        np.array(end, dtype=np.int64),
        origin,
    )
