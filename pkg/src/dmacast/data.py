"""Domain types, CSV ingestion, gap handling, DMA aggregation and splitting.

All series live on an hourly UTC grid. Week-hour indices are computed in
local time (``utc_offset_hours``) with Monday 00:00 as week-hour 0.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

HOURS_PER_WEEK = 168
HOUR = pd.Timedelta(hours=1)

METER_COLUMNS = {
    "meter_id": "meter_id",
    "timestamp": "timestamp_iso8601",
    "consumption": "consumption_m3h",
}
WEATHER_COLUMNS = {
    "timestamp": "timestamp_iso8601",
    "temperature_max": "temp_max_c",
    "humidity": "humidity_pct",
}


class DataError(ValueError):
    """Base class for ingestion and alignment problems."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConflictError(DataError):
    pass


class UnfillableGapError(DataError):
    pass


class AlignmentError(DataError):
    pass


class GapPolicy(str, Enum):
    INTERPOLATE_SHORT = "interpolate_short"
    ZERO_FILL = "zero_fill"
    DROP_METER = "drop_meter"


def _as_utc(ts) -> pd.Timestamp:
    ts = pd.Timestamp(ts)
    if ts.tzinfo is None:
        return ts.tz_localize("UTC")
    return ts.tz_convert("UTC")


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MeterSeries:
    """Hourly consumption of one smart meter in m³/h; NaN marks a missing hour."""

    meter_id: str
    start: pd.Timestamp
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "start", _as_utc(self.start))
        object.__setattr__(self, "values", _frozen(self.values))
        if self.values.ndim != 1:
            raise ValueError("values must be one-dimensional")
        if np.any(self.values[~np.isnan(self.values)] < 0):
            raise ValueError(f"meter {self.meter_id}: negative consumption")

    def __len__(self):
        return len(self.values)

    @property
    def index(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=len(self.values), freq="h")

    @property
    def has_gaps(self) -> bool:
        return bool(np.isnan(self.values).any())

    def __eq__(self, other):
        if not isinstance(other, MeterSeries):
            return NotImplemented
        return (
            self.meter_id == other.meter_id
            and self.start == other.start
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


@dataclass(frozen=True, eq=False)
class DemandSeries:
    label: str
    start: pd.Timestamp
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "start", _as_utc(self.start))
        object.__setattr__(self, "values", _frozen(self.values))

    def __len__(self):
        return len(self.values)

    @property
    def index(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=len(self.values), freq="h")

    def to_series(self) -> pd.Series:
        return pd.Series(np.asarray(self.values), index=self.index, name=self.label)


@dataclass(frozen=True, eq=False)
class WeatherSeries:
    start: pd.Timestamp
    temperature_max: np.ndarray
    humidity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "start", _as_utc(self.start))
        object.__setattr__(self, "temperature_max", _frozen(self.temperature_max))
        object.__setattr__(self, "humidity", _frozen(self.humidity))
        if self.temperature_max.shape != self.humidity.shape:
            raise ValueError("temperature and humidity lengths differ")
        h = self.humidity[~np.isnan(self.humidity)]
        if np.any((h < 0) | (h > 100)):
            raise ValueError("humidity outside [0, 100]")

    def __len__(self):
        return len(self.temperature_max)

    @property
    def index(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=len(self), freq="h")


@dataclass(frozen=True)
class HolidayCalendar:
    dates: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "dates", frozenset(pd.Timestamp(d).date() for d in self.dates))

    def __contains__(self, day) -> bool:
        return pd.Timestamp(day).date() in self.dates

    def mask(self, local_index: pd.DatetimeIndex) -> np.ndarray:
        """Boolean holiday flag for each timestamp of a (local-time) index."""
        days = np.array([d.date() for d in local_index.normalize()], dtype=object)
        return np.array([d in self.dates for d in days], dtype=bool)


class Split(NamedTuple):
    """Disjoint, contiguous hour-index ranges with train < val < test."""

    train: range
    val: range
    test: range


@dataclass(frozen=True, eq=False)
class DmaDataset:
    meters: tuple
    weather: WeatherSeries
    holidays: HolidayCalendar = field(default_factory=HolidayCalendar)
    split: tuple | None = None  # (train_end, val_end, test_end) timestamps, exclusive
    utc_offset_hours: int = 0

    def __post_init__(self):
        object.__setattr__(self, "meters", tuple(self.meters))
        if not self.meters:
            raise ValueError("dataset needs at least one meter")
        check_same_grid(self.meters)
        first = self.meters[0]
        if self.weather.start != first.start or len(self.weather) != len(first):
            raise AlignmentError("weather series is not on the meter grid")
        if self.split is not None:
            object.__setattr__(self, "split", tuple(_as_utc(t) for t in self.split))
            train_end, val_end, test_end = self.split
            if not train_end <= val_end <= test_end:
                raise ValueError("split boundaries out of order")

    @property
    def start(self) -> pd.Timestamp:
        return self.meters[0].start

    @property
    def n_hours(self) -> int:
        return len(self.meters[0])

    @property
    def index(self) -> pd.DatetimeIndex:
        return self.meters[0].index

    @property
    def meter_ids(self) -> list[str]:
        return [m.meter_id for m in self.meters]

    def with_split(self, test_weeks: int = 26, val_fraction: float = 0.10) -> "DmaDataset":
        s = chronological_split(self.n_hours, test_weeks, val_fraction)
        bounds = tuple(self.start + HOUR * r.stop for r in s)
        return replace(self, split=bounds)

    def split_ranges(self) -> Split:
        if self.split is None:
            raise ValueError("dataset has no split; call with_split() first")
        stops = [int((t - self.start) / HOUR) for t in self.split]
        return Split(range(0, stops[0]), range(stops[0], stops[1]), range(stops[1], stops[2]))

    def local_index(self) -> pd.DatetimeIndex:
        return local_time(self.index, self.utc_offset_hours)


# --------------------------------------------------------------------------- ingestion


def _read_table(path, columns: dict, required: Sequence[str]) -> pd.DataFrame:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [columns[k] for k in required if columns[k] not in df.columns]
    if missing:
        raise ParseError(f"{path}: missing columns {missing}")
    return df


def _parse_timestamps(raw: pd.Series) -> pd.Series:
    ts = pd.to_datetime(raw, utc=True, errors="coerce", format="ISO8601")
    bad = ts.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(f"unparseable timestamp {raw.iloc[row]!r}", line=row + 2)
    return ts


def _parse_numbers(raw: pd.Series, what: str, allow_empty: bool = True) -> np.ndarray:
    stripped = raw.str.strip()
    empty = stripped == ""
    num = pd.to_numeric(stripped.where(~empty, "nan"), errors="coerce").to_numpy(float)
    bad = np.isnan(num) & ~(empty.to_numpy() & allow_empty)
    # literal "nan" strings count as missing rather than malformed
    bad &= stripped.str.lower().ne("nan").to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(f"unparseable {what} {raw.iloc[row]!r}", line=row + 2)
    return num


def load_meter_csv(path, schema: dict | None = None) -> list[MeterSeries]:
    """Read a long-format meter CSV into one gapped hourly MeterSeries per meter.

    Timestamps are floored to the hour. Hours without a reading become NaN.
    Negative readings are clipped to zero with a warning.
    """
    cols = {**METER_COLUMNS, **(schema or {})}
    df = _read_table(path, cols, ["meter_id", "timestamp", "consumption"])
    ts = _parse_timestamps(df[cols["timestamp"]]).dt.floor("h")
    values = _parse_numbers(df[cols["consumption"]], "consumption")
    ids = df[cols["meter_id"]].str.strip()
    if (ids == "").any():
        row = int(np.flatnonzero((ids == "").to_numpy())[0])
        raise ParseError("empty meter_id", line=row + 2)

    neg = values < 0
    if neg.any():
        logger.warning("%s: clipped %d negative readings to 0", path, int(neg.sum()))
        values = np.where(neg, 0.0, values)

    table = pd.DataFrame({"meter_id": ids.to_numpy(), "ts": ts.to_numpy(), "v": values})
    dup = table.duplicated(["meter_id", "ts"], keep="first")
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise ConflictError(
            f"line {row + 2}: duplicate reading for meter {table.meter_id.iloc[row]} "
            f"at {table.ts.iloc[row]}"
        )

    out = []
    for meter_id, grp in table.groupby("meter_id", sort=True):
        grp = grp.sort_values("ts")
        start, stop = grp.ts.iloc[0], grp.ts.iloc[-1]
        n = int((stop - start) / HOUR) + 1
        vals = np.full(n, np.nan)
        pos = ((grp.ts - start) / HOUR).to_numpy().astype(int)
        vals[pos] = grp.v.to_numpy()
        out.append(MeterSeries(str(meter_id), start, vals))
    return out


def load_weather_csv(path, schema: dict | None = None) -> WeatherSeries:
    cols = {**WEATHER_COLUMNS, **(schema or {})}
    df = _read_table(path, cols, ["timestamp", "temperature_max", "humidity"])
    ts = _parse_timestamps(df[cols["timestamp"]]).dt.floor("h")
    temp = _parse_numbers(df[cols["temperature_max"]], "temperature")
    hum = _parse_numbers(df[cols["humidity"]], "humidity")
    order = np.argsort(ts.to_numpy(), kind="stable")
    ts = ts.iloc[order].reset_index(drop=True)
    if ts.duplicated().any():
        raise ConflictError(f"{path}: duplicate weather timestamps")
    start = ts.iloc[0]
    n = int((ts.iloc[-1] - start) / HOUR) + 1
    pos = ((ts - start) / HOUR).to_numpy().astype(int)
    t_full, h_full = np.full(n, np.nan), np.full(n, np.nan)
    t_full[pos], h_full[pos] = temp[order], hum[order]
    # weather gaps are always interpolated; it is an exogenous input, not a target
    t_full = pd.Series(t_full).interpolate(limit_direction="both").to_numpy()
    h_full = pd.Series(h_full).interpolate(limit_direction="both").to_numpy()
    return WeatherSeries(start, t_full, np.clip(h_full, 0, 100))


def load_holidays(path) -> HolidayCalendar:
    dates = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            dates.append(dt.date.fromisoformat(line))
        except ValueError:
            raise ParseError(f"bad holiday date {line!r}", line=lineno) from None
    return HolidayCalendar(frozenset(dates))


def write_meter_csv(path, meters: Iterable[MeterSeries]) -> None:
    frames = []
    for m in meters:
        frames.append(pd.DataFrame({
            METER_COLUMNS["meter_id"]: m.meter_id,
            METER_COLUMNS["timestamp"]: m.index.strftime("%Y-%m-%dT%H:%M:%SZ"),
            METER_COLUMNS["consumption"]: np.asarray(m.values),
        }))
    pd.concat(frames).to_csv(path, index=False, float_format="%.6f")


def write_weather_csv(path, weather: WeatherSeries) -> None:
    pd.DataFrame({
        WEATHER_COLUMNS["timestamp"]: weather.index.strftime("%Y-%m-%dT%H:%M:%SZ"),
        WEATHER_COLUMNS["temperature_max"]: np.asarray(weather.temperature_max),
        WEATHER_COLUMNS["humidity"]: np.asarray(weather.humidity),
    }).to_csv(path, index=False, float_format="%.4f")


def write_holidays(path, holidays: HolidayCalendar) -> None:
    Path(path).write_text("".join(f"{d.isoformat()}\n" for d in sorted(holidays.dates)))


def write_demand_csv(path, series: Iterable[DemandSeries]) -> None:
    """Demand series in the meter CSV schema (label in the meter_id column)."""
    write_meter_csv(path, [MeterSeries(s.label, s.start, s.values) for s in series])


# --------------------------------------------------------------------------- gap handling


def _nan_runs(values: np.ndarray) -> list[tuple[int, int]]:
    """Half-open (start, stop) index runs of NaN."""
    isnan = np.isnan(values).astype(np.int8)
    edges = np.diff(np.concatenate([[0], isnan, [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def resample_hourly(series: MeterSeries, gap_policy="interpolate_short",
                    max_gap_hours: int = 6) -> MeterSeries | None:
    """Fill missing hours. Returns None when ``drop_meter`` rejects the meter.

    Gaps up to ``max_gap_hours`` are filled linearly (``interpolate_short``,
    ``drop_meter``) or with zeros (``zero_fill``). Leading/trailing gaps take
    the nearest observation. Longer gaps raise UnfillableGapError, except
    under ``drop_meter`` where the meter is dropped.
    """
    policy = GapPolicy(gap_policy)
    vals = np.array(series.values, dtype=float)
    runs = _nan_runs(vals)
    if not runs:
        return series
    if len(runs) == 1 and runs[0] == (0, len(vals)):
        raise UnfillableGapError(f"meter {series.meter_id} has no observations")
    longest = max(stop - start for start, stop in runs)
    if longest > max_gap_hours:
        if policy is GapPolicy.DROP_METER:
            logger.info("dropping meter %s: %d-hour gap", series.meter_id, longest)
            return None
        raise UnfillableGapError(
            f"meter {series.meter_id}: gap of {longest} h exceeds max_gap_hours={max_gap_hours}"
        )
    if policy is GapPolicy.ZERO_FILL:
        vals[np.isnan(vals)] = 0.0
    else:
        vals = pd.Series(vals).interpolate(method="linear", limit_direction="both").to_numpy()
    return MeterSeries(series.meter_id, series.start, vals)


def align_meters(meters: Sequence[MeterSeries], start=None, end=None) -> list[MeterSeries]:
    """Reindex meters onto a common hourly grid [start, end); new hours are NaN."""
    start = _as_utc(start) if start is not None else min(m.start for m in meters)
    end = _as_utc(end) if end is not None else max(m.start + HOUR * len(m) for m in meters)
    n = int((end - start) / HOUR)
    out = []
    for m in meters:
        vals = np.full(n, np.nan)
        offset = int((m.start - start) / HOUR)
        lo, hi = max(offset, 0), min(offset + len(m), n)
        if hi > lo:
            vals[lo:hi] = m.values[lo - offset:hi - offset]
        out.append(MeterSeries(m.meter_id, start, vals))
    return out


# --------------------------------------------------------------------------- aggregation


def check_same_grid(meters: Sequence) -> None:
    first = meters[0]
    for m in meters[1:]:
        if m.start != first.start or len(m) != len(first):
            label = getattr(m, "meter_id", getattr(m, "label", "?"))
            raise AlignmentError(f"series {label} is not on the common hourly grid")


def aggregate_dma(meters: Sequence[MeterSeries], label: str = "DMA-total",
                  skipna: bool = False) -> DemandSeries:
    """Element-wise sum of meter consumption at each hour."""
    if not meters:
        raise ValueError("no meters to aggregate")
    check_same_grid(meters)
    stack = np.vstack([m.values for m in meters])
    if np.isnan(stack).any():
        if not skipna:
            raise DataError("aggregate_dma requires gap-free meters (or skipna=True)")
        stack = np.nan_to_num(stack, nan=0.0)
    return DemandSeries(label, meters[0].start, stack.sum(axis=0))


def prepare_meters(meters: Sequence[MeterSeries], gap_policy="interpolate_short",
                   max_gap_hours: int = 6) -> tuple[list[MeterSeries], list[MeterSeries]]:
    """Split raw aligned meters into (clean meters, all meters for aggregation).

    Meters rejected by the gap policy are left out of the clean list, but
    their observed hours remain in the aggregation list (NaN treated as 0).
    """
    clean, total = [], []
    for m in meters:
        filled = resample_hourly(m, gap_policy, max_gap_hours)
        if filled is None:
            total.append(MeterSeries(m.meter_id, m.start, np.nan_to_num(m.values, nan=0.0)))
        else:
            clean.append(filled)
            total.append(filled)
    return clean, total


# --------------------------------------------------------------------------- splitting and calendar


def chronological_split(dataset_or_hours, test_weeks: int = 26,
                        val_fraction: float = 0.10) -> Split:
    """Train/val/test hour ranges: test is the final ``test_weeks`` weeks,
    val the final ``val_fraction`` of what remains."""
    n = dataset_or_hours if isinstance(dataset_or_hours, (int, np.integer)) else dataset_or_hours.n_hours
    if test_weeks < 0 or not 0 <= val_fraction < 1:
        raise ValueError("test_weeks must be >= 0 and val_fraction in [0, 1)")
    n_test = test_weeks * HOURS_PER_WEEK
    if n < n_test + HOURS_PER_WEEK:
        raise ValueError(
            f"insufficient history: {n} h < {n_test} h test span + {HOURS_PER_WEEK} h context"
        )
    n_pre = n - n_test
    n_val = int(n_pre * val_fraction)
    n_train = n_pre - n_val
    return Split(range(0, n_train), range(n_train, n_pre), range(n_pre, n))


def local_time(index: pd.DatetimeIndex, utc_offset_hours: int = 0) -> pd.DatetimeIndex:
    return index.tz_convert("UTC").tz_localize(None) + pd.Timedelta(hours=utc_offset_hours)


def week_hours(index: pd.DatetimeIndex, utc_offset_hours: int = 0) -> np.ndarray:
    """Week-hour (0..167, Monday 00:00 local = 0) of each timestamp."""
    loc = local_time(index, utc_offset_hours)
    return (loc.dayofweek * 24 + loc.hour).to_numpy()


def week_hour_of(start, utc_offset_hours: int = 0) -> int:
    return int(week_hours(pd.DatetimeIndex([_as_utc(start)]), utc_offset_hours)[0])


def demand_frame(dataset: DmaDataset, cluster_demands: Sequence[DemandSeries] | None = None,
                 total: DemandSeries | None = None) -> pd.DataFrame:
    """Hourly frame with the total DMA demand, cluster demands, weather and calendar.

    Columns: ``total``, ``cluster_<i>``, ``temp_max``, ``humidity``,
    ``holiday``, ``weekday`` (1 Mon-Fri non-holiday), ``dow``, ``hour``,
    ``week_hour``. The frame carries ``attrs['split']`` when the dataset has one.
    """
    if total is None:
        total = aggregate_dma(dataset.meters, skipna=True)
    loc = dataset.local_index()
    holiday = dataset.holidays.mask(loc)
    cols = {"total": np.asarray(total.values)}
    for i, c in enumerate(cluster_demands or []):
        if c.start != dataset.start or len(c) != dataset.n_hours:
            raise AlignmentError(f"cluster demand {c.label} is not on the dataset grid")
        cols[f"cluster_{i}"] = np.asarray(c.values)
    cols["temp_max"] = np.asarray(dataset.weather.temperature_max)
    cols["humidity"] = np.asarray(dataset.weather.humidity)
    cols["holiday"] = holiday.astype(float)
    cols["weekday"] = ((loc.dayofweek < 5) & ~holiday).astype(float)
    cols["dow"] = loc.dayofweek.to_numpy()
    cols["hour"] = loc.hour.to_numpy()
    cols["week_hour"] = (loc.dayofweek * 24 + loc.hour).to_numpy()
    frame = pd.DataFrame(cols, index=dataset.index)
    if dataset.split is not None:
        frame.attrs["split"] = tuple(dataset.split_ranges())
    return frame


def cluster_columns(frame: pd.DataFrame) -> list[str]:
    return [c for c in frame.columns if c.startswith("cluster_")]
