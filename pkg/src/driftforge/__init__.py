"""Drift-aware, policy-driven augmentation of OHLCV panels for forecasting under concept drift."""

from .data import (
    ConfigurationError,
    DataError,
    PanelSeries,
    SampleSet,
    chronological_split,
    fit_rolling_stats,
    load_panel_csv,
    make_windows,
)
from .manipulation import ManipulationContext, ManipulationPolicy, manipulate, replay
from .mixups import MixKind, build_coint_matrix
from .transforms import TransformKind

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DataError",
    "ManipulationContext",
    "ManipulationPolicy",
    "MixKind",
    "PanelSeries",
    "SampleSet",
    "TransformKind",
    "build_coint_matrix",
    "chronological_split",
    "fit_rolling_stats",
    "load_panel_csv",
    "make_windows",
    "manipulate",
    "replay",
]
