"""Weekly load profiles and the two-column samples fed to the contrastive encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from .data import HOURS_PER_WEEK, MeterSeries, week_hour_of

VIEW_A = (0, 120)    # Monday 00:00 .. Friday 24:00
VIEW_B = (96, 168)   # Friday 00:00 .. Sunday 24:00
OVERLAP = (96, 120)  # Friday
STD_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class WeeklyProfile:
    meter_id: str
    values: np.ndarray  # 168 mean values, index 0 = Monday 00:00 local

    def __post_init__(self):
        if np.shape(self.values) != (HOURS_PER_WEEK,):
            raise ValueError("a weekly profile has exactly 168 values")


@dataclass(frozen=True, eq=False)
class ProfileSample:
    meter_id: str
    window_index: int
    tensor: np.ndarray  # (168, 2): global profile, windowed profile


@dataclass(frozen=True, eq=False)
class CropPair:
    view_a: np.ndarray
    view_b: np.ndarray
    hours_a: np.ndarray
    hours_b: np.ndarray

    @property
    def overlap(self) -> tuple[int, int]:
        lo = max(self.hours_a[0], self.hours_b[0])
        hi = min(self.hours_a[-1], self.hours_b[-1]) + 1
        return int(lo), int(hi)

    def overlap_slices(self) -> tuple[slice, slice]:
        lo, hi = self.overlap
        a0, b0 = int(self.hours_a[0]), int(self.hours_b[0])
        return slice(lo - a0, hi - a0), slice(lo - b0, hi - b0)


def _span(meter: MeterSeries, span) -> range:
    if span is None:
        return range(0, len(meter))
    if isinstance(span, slice):
        return range(*span.indices(len(meter)))
    if isinstance(span, tuple):
        return range(*span)
    return span


def weekly_profile(meter: MeterSeries, span=None, utc_offset_hours: int = 0) -> WeeklyProfile:
    """Mean consumption for each of the 168 week-hours over ``span``."""
    r = _span(meter, span)
    if len(r) < HOURS_PER_WEEK:
        raise ValueError(f"span of {len(r)} h is shorter than one week")
    vals = np.asarray(meter.values[r.start:r.stop])
    if np.isnan(vals).any():
        raise ValueError(f"meter {meter.meter_id} has gaps in the profile span")
    wh0 = (week_hour_of(meter.start, utc_offset_hours) + r.start) % HOURS_PER_WEEK
    wh = (wh0 + np.arange(len(vals))) % HOURS_PER_WEEK
    sums = np.bincount(wh, weights=vals, minlength=HOURS_PER_WEEK)
    counts = np.bincount(wh, minlength=HOURS_PER_WEEK)
    return WeeklyProfile(meter.meter_id, sums / counts)


def window_starts(span_hours: int, window_weeks: int = 12, stride_weeks: int = 4) -> list[int]:
    w, s = window_weeks * HOURS_PER_WEEK, stride_weeks * HOURS_PER_WEEK
    if span_hours < w:
        raise ValueError(f"span of {span_hours} h is shorter than a {window_weeks}-week window")
    return list(range(0, span_hours - w + 1, s))


def windowed_profiles(meter: MeterSeries, window_weeks: int = 12, stride_weeks: int = 4,
                      span=None, utc_offset_hours: int = 0) -> list[WeeklyProfile]:
    r = _span(meter, span)
    w = window_weeks * HOURS_PER_WEEK
    return [weekly_profile(meter, range(r.start + s, r.start + s + w), utc_offset_hours)
            for s in window_starts(len(r), window_weeks, stride_weeks)]


def normalize_columns(global_profile: np.ndarray, windowed: np.ndarray) -> np.ndarray:
    """Stack and z-score both columns with the global profile's statistics."""
    mu, sd = global_profile.mean(), max(global_profile.std(), STD_FLOOR)
    return (np.column_stack([global_profile, windowed]) - mu) / sd


def build_sample(meter: MeterSeries, window_index: int, norm: str = "zscore_per_meter",
                 span=None, window_weeks: int = 12, stride_weeks: int = 4,
                 utc_offset_hours: int = 0) -> ProfileSample:
    if norm != "zscore_per_meter":
        raise ValueError(f"unknown normalization {norm!r}")
    g = weekly_profile(meter, span, utc_offset_hours).values
    wins = windowed_profiles(meter, window_weeks, stride_weeks, span, utc_offset_hours)
    if not 0 <= window_index < len(wins):
        raise IndexError(f"window {window_index} out of range (meter has {len(wins)})")
    return ProfileSample(meter.meter_id, window_index, normalize_columns(g, wins[window_index].values))


def crop_views(sample: ProfileSample | np.ndarray) -> CropPair:
    x = sample.tensor if isinstance(sample, ProfileSample) else np.asarray(sample)
    return CropPair(x[VIEW_A[0]:VIEW_A[1]], x[VIEW_B[0]:VIEW_B[1]],
                    np.arange(*VIEW_A), np.arange(*VIEW_B))


class ProfileSampler(TransformerMixin, BaseEstimator):
    """Turn meters into an array of contrastive samples.

    ``transform`` returns shape ``(n_meters, n_windows, 168, 2)``; column 0
    is the global weekly profile over ``span``, column 1 the profile of one
    12-week window, both z-scored with the global profile's mean and std.

    Parameters
    ----------
    span : tuple of int or None
        Hour range ``(start, stop)`` profiles are computed over; None uses
        the whole series.
    window_weeks, stride_weeks : int
        Length and stride of the windowed profiles.
    utc_offset_hours : int
        Local-time offset used for week-hour alignment.
    """

    def __init__(self, span=None, window_weeks=12, stride_weeks=4, utc_offset_hours=0):
        self.span = span
        self.window_weeks = window_weeks
        self.stride_weeks = stride_weeks
        self.utc_offset_hours = utc_offset_hours

    def fit(self, X, y=None):
        meters = list(X)
        if not meters:
            raise ValueError("no meters")
        r = _span(meters[0], self.span)
        self.window_starts_ = window_starts(len(r), self.window_weeks, self.stride_weeks)
        self.n_windows_ = len(self.window_starts_)
        return self

    def transform(self, X):
        if not hasattr(self, "n_windows_"):
            self.fit(X)
        out = []
        for m in X:
            g = weekly_profile(m, self.span, self.utc_offset_hours).values
            wins = windowed_profiles(m, self.window_weeks, self.stride_weeks, self.span,
                                     self.utc_offset_hours)
            out.append([normalize_columns(g, w.values) for w in wins])
        return np.asarray(out, dtype=float)

    def samples(self, X) -> list[ProfileSample]:
        meters = list(X)
        arr = self.fit(meters).transform(meters)
        return [ProfileSample(m.meter_id, j, arr[i, j])
                for i, m in enumerate(meters) for j in range(arr.shape[1])]


def profiles_frame(meters, span=None, utc_offset_hours: int = 0) -> pd.DataFrame:
    """Global weekly profiles, one column per meter, 168 rows (for CSV dumps)."""
    data = {m.meter_id: weekly_profile(m, span, utc_offset_hours).values for m in meters}
    frame = pd.DataFrame(data)
    frame.index.name = "week_hour"
    return frame
