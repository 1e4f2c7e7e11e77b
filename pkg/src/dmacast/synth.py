"""Synthetic DMAs with planted consumer archetypes.

Waveforms are fixed by the constants below so that tests on the generated
data are stable. Every generator is a pure function of its arguments.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd
from dateutil.easter import easter

from .data import HOURS_PER_WEEK, DmaDataset, HolidayCalendar, MeterSeries, WeatherSeries

logger = logging.getLogger(__name__)

SYNTH_START = pd.Timestamp("2018-01-01 00:00", tz="UTC")  # a Monday

# Relative waveform levels; a meter's consumption is base_level * shape * meter_scale.
RESIDENTIAL = dict(night=0.25, day=0.55, morning_peak=(7.0, 1.3, 1.2), evening_peak=(19.0, 1.8, 0.9),
                   weekend_morning_peak=(9.5, 2.0, 1.1))
COMMERCIAL = dict(closed=0.3, open_hours=(9, 20), open_level=1.4, lunch_peak=(12.5, 1.0, 0.5))
CORPORATE = dict(plateau=1.0, office_hours=(8, 17), weekday_night=0.15, weekend=0.005)
POULTRY = dict(cycle_days=(42, 56), cleanout_days=3, growth=(0.3, 1.0), cleanout_level=0.02,
               light_hours=(5, 22), lights_on=1.0, lights_off=0.55)
IRRIGATION = dict(threshold_c=14.0, slope_per_c=0.12, windows=((4, 7), (20, 23)), idle=0.02)
METER_SCALE_SIGMA = 0.2  # log-normal spread of meter magnitude within an archetype
TEMPERATURE = dict(mean=8.0, amplitude=10.0, coldest_doy=20, daily_amplitude=3.0,
                   ar_phi=0.95, ar_sigma=0.5)
HUMIDITY = dict(mean=78.0, per_degree=-1.6, noise=4.0, lo=20.0, hi=100.0)


class Archetype(str, Enum):
    RESIDENTIAL = "residential"
    COMMERCIAL = "commercial"
    CORPORATE = "corporate"
    POULTRY_FARM = "poultry_farm"
    IRRIGATION = "irrigation"


DEFAULT_BASE_LEVEL = {
    Archetype.RESIDENTIAL: 0.05,
    Archetype.COMMERCIAL: 0.2,
    Archetype.CORPORATE: 0.4,
    Archetype.POULTRY_FARM: 1.0,
    Archetype.IRRIGATION: 0.3,
}


@dataclass(frozen=True)
class ArchetypeSpec:
    kind: Archetype
    count: int
    base_level: float | None = None
    noise_std: float = 0.0
    seed: int = 0
    noise_fraction: float | None = None  # alternative to noise_std: fraction of base_level

    def __post_init__(self):
        object.__setattr__(self, "kind", Archetype(self.kind))
        if self.base_level is None:
            object.__setattr__(self, "base_level", DEFAULT_BASE_LEVEL[self.kind])
        if self.noise_fraction is not None:
            object.__setattr__(self, "noise_std", self.noise_fraction * self.base_level)
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.noise_std < 0 or self.base_level <= 0:
            raise ValueError("noise_std must be >= 0 and base_level > 0")


@dataclass(frozen=True, eq=False)
class SynthDma:
    dataset: DmaDataset
    labels: dict
    single_class: bool = False
    separation: dict = field(default_factory=dict)

    def label_array(self) -> np.ndarray:
        return np.array([self.labels[m] for m in self.dataset.meter_ids])


def _bump(hours: np.ndarray, center: float, width: float, height: float) -> np.ndarray:
    d = (hours - center + 12) % 24 - 12
    return height * np.exp(-0.5 * (d / width) ** 2)


def weekly_shape(kind: Archetype | str) -> np.ndarray | None:
    """168-value shape for the weekly-periodic archetypes (None otherwise)."""
    kind = Archetype(kind)
    wh = np.arange(HOURS_PER_WEEK)
    dow, hour = wh // 24, (wh % 24).astype(float)
    if kind is Archetype.RESIDENTIAL:
        c = RESIDENTIAL
        daytime = np.where((hour >= 6) & (hour < 23), c["day"], c["night"])
        weekday = _bump(hour, *c["morning_peak"]) + _bump(hour, *c["evening_peak"])
        weekend = _bump(hour, *c["weekend_morning_peak"]) + _bump(hour, *c["evening_peak"])
        return daytime + np.where(dow < 5, weekday, weekend)
    if kind is Archetype.COMMERCIAL:
        c = COMMERCIAL
        open_ = (dow < 6) & (hour >= c["open_hours"][0]) & (hour < c["open_hours"][1])
        return np.where(open_, c["open_level"] + _bump(hour, *c["lunch_peak"]), c["closed"])
    if kind is Archetype.CORPORATE:
        return corporate_shape(wh)
    return None


def corporate_shape(week_hour: np.ndarray, holiday: np.ndarray | None = None) -> np.ndarray:
    c = CORPORATE
    dow, hour = week_hour // 24, week_hour % 24
    office = (dow < 5) & (hour >= c["office_hours"][0]) & (hour < c["office_hours"][1])
    # near zero from Friday 18:00 to Monday 07:00
    weekend = (week_hour >= 4 * 24 + 18) | (week_hour < 7)
    out = np.where(office, c["plateau"], np.where(weekend, c["weekend"], c["weekday_night"]))
    if holiday is not None:
        out = np.where(holiday, c["weekend"], out)
    return out


def poultry_envelope(hours: np.ndarray, cycle_days: float, phase_days: float) -> np.ndarray:
    """Linear growth over the flock cycle, then a near-zero cleanout."""
    c = POULTRY
    t = ((hours / 24.0 + phase_days) % cycle_days)
    growth_days = cycle_days - c["cleanout_days"]
    lo, hi = c["growth"]
    rising = lo + (hi - lo) * t / growth_days
    return np.where(t < growth_days, rising, c["cleanout_level"])


def _holiday_mask(start: pd.Timestamp, n: int, holidays: HolidayCalendar | None) -> np.ndarray:
    if holidays is None or not holidays.dates:
        return np.zeros(n, dtype=bool)
    idx = pd.date_range(start.tz_localize(None), periods=n, freq="h")
    return holidays.mask(idx)


def generate_archetype(spec: ArchetypeSpec, weeks: int, weather: WeatherSeries,
                       holidays: HolidayCalendar | None = None, start=SYNTH_START,
                       rng: np.random.Generator | None = None,
                       id_prefix: str | None = None) -> list[MeterSeries]:
    """Meters of one archetype on an hourly grid starting at ``start`` (a Monday).

    Holidays are treated like Sundays by the weekly-periodic archetypes.
    """
    if weeks < 16:
        raise ValueError("weeks must be >= 16")
    n = weeks * HOURS_PER_WEEK
    if len(weather) < n:
        raise ValueError("weather series shorter than the requested span")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    start = pd.Timestamp(start)
    hours = np.arange(n)
    wh = hours % HOURS_PER_WEEK  # grid starts on Monday 00:00
    holiday = _holiday_mask(start, n, holidays)
    sunday = 6 * 24 + hours % 24
    temp = np.asarray(weather.temperature_max[:n])
    kind = spec.kind
    prefix = id_prefix or kind.value

    meters = []
    for i in range(spec.count):
        scale = float(np.exp(rng.normal(0.0, METER_SCALE_SIGMA)))
        if kind in (Archetype.RESIDENTIAL, Archetype.COMMERCIAL):
            shape = weekly_shape(kind)
            x = shape[np.where(holiday, sunday, wh)]
        elif kind is Archetype.CORPORATE:
            x = corporate_shape(wh, holiday)
        elif kind is Archetype.POULTRY_FARM:
            c = POULTRY
            cycle = float(rng.uniform(*c["cycle_days"]))
            phase = float(rng.uniform(0, cycle))
            h = hours % 24
            lights = np.where((h >= c["light_hours"][0]) & (h < c["light_hours"][1]),
                              c["lights_on"], c["lights_off"])
            x = poultry_envelope(hours.astype(float), cycle, phase) * lights
        else:  # irrigation
            c = IRRIGATION
            h = hours % 24
            on = np.zeros(n, dtype=bool)
            for lo, hi in c["windows"]:
                on |= (h >= lo) & (h < hi)
            drive = np.maximum(temp - c["threshold_c"], 0.0) * c["slope_per_c"]
            x = c["idle"] + np.where(on, drive * 4.0, 0.0)
        x = spec.base_level * scale * x
        if spec.noise_std > 0:
            x = x + rng.normal(0.0, spec.noise_std, size=n)
        meters.append(MeterSeries(f"{prefix}_{i:03d}", start, np.maximum(x, 0.0)))
    return meters


def generate_weather(weeks: int, seed: int, start=SYNTH_START) -> WeatherSeries:
    """Annual + daily temperature cycles with AR(1) noise; humidity anti-correlated."""
    if weeks < 1:
        raise ValueError("weeks must be >= 1")
    rng = np.random.default_rng(seed)
    n = weeks * HOURS_PER_WEEK
    idx = pd.date_range(pd.Timestamp(start), periods=n, freq="h")
    c = TEMPERATURE
    doy = idx.dayofyear.to_numpy() + idx.hour.to_numpy() / 24.0
    annual = c["mean"] - c["amplitude"] * np.cos(2 * np.pi * (doy - c["coldest_doy"]) / 365.25)
    daily = c["daily_amplitude"] * np.sin(2 * np.pi * (idx.hour.to_numpy() - 9) / 24.0)
    eps = rng.normal(0.0, c["ar_sigma"], size=n)
    ar = np.empty(n)
    ar[0] = eps[0] / np.sqrt(1 - c["ar_phi"] ** 2)
    for t in range(1, n):
        ar[t] = c["ar_phi"] * ar[t - 1] + eps[t]
    temp = annual + daily + ar
    h = HUMIDITY
    hum = h["mean"] + h["per_degree"] * (temp - c["mean"]) + rng.normal(0.0, h["noise"], size=n)
    return WeatherSeries(idx[0], temp, np.clip(hum, h["lo"], h["hi"]))


def danish_holidays(years) -> HolidayCalendar:
    days = set()
    for y in years:
        e = easter(y)
        days |= {dt.date(y, 1, 1), dt.date(y, 6, 5), dt.date(y, 12, 24), dt.date(y, 12, 25),
                 dt.date(y, 12, 26), dt.date(y, 12, 31)}
        days |= {e + dt.timedelta(days=k) for k in (-3, -2, 1, 39, 50)}
    return HolidayCalendar(frozenset(days))


def _zscore(p: np.ndarray) -> np.ndarray:
    return (p - p.mean()) / max(p.std(), 1e-12)


def profile_separation(meters, labels: dict) -> dict:
    """RMS distance between z-scored mean weekly profiles of each pair of kinds."""
    by_kind: dict = {}
    for m in meters:
        v = np.asarray(m.values)
        n = len(v) // HOURS_PER_WEEK * HOURS_PER_WEEK
        by_kind.setdefault(labels[m.meter_id], []).append(v[:n].reshape(-1, HOURS_PER_WEEK).mean(0))
    means = {k: _zscore(np.mean(v, axis=0)) for k, v in by_kind.items()}
    kinds = sorted(means)
    out = {}
    for i, a in enumerate(kinds):
        for b in kinds[i + 1:]:
            out[(a, b)] = float(np.sqrt(np.mean((means[a] - means[b]) ** 2)))
    return out


def generate_dma(specs, weeks: int, seed: int, start=SYNTH_START,
                 utc_offset_hours: int = 0) -> SynthDma:
    """Union of archetype meters on one grid, with weather, holidays and labels."""
    specs = [s if isinstance(s, ArchetypeSpec) else ArchetypeSpec(**s) for s in specs]
    if not specs:
        raise ValueError("need at least one archetype spec")
    weather = generate_weather(weeks, seed, start)
    start = weather.start
    end = start + pd.Timedelta(hours=weeks * HOURS_PER_WEEK)
    holidays = danish_holidays(range(start.year, end.year + 1))
    root = np.random.SeedSequence(seed)
    meters, labels = [], {}
    counts: dict = {}
    for spec, child in zip(specs, root.spawn(len(specs))):
        rng = np.random.default_rng([*child.generate_state(2), spec.seed])
        nth = counts.get(spec.kind, 0)
        counts[spec.kind] = nth + 1
        prefix = spec.kind.value if nth == 0 else f"{spec.kind.value}{nth}"
        group = generate_archetype(spec, weeks, weather, holidays, start, rng, prefix)
        meters.extend(group)
        labels.update({m.meter_id: spec.kind.value for m in group})
    kinds = {s.kind for s in specs}
    separation = profile_separation(meters, labels) if len(kinds) > 1 else {}
    weak = {k: v for k, v in separation.items() if v < 0.5}
    if weak:
        logger.warning("archetype profiles poorly separated: %s", weak)
    dataset = DmaDataset(tuple(meters), weather, holidays, utc_offset_hours=utc_offset_hours)
    return SynthDma(dataset, labels, single_class=len(kinds) == 1, separation=separation)


BUNDLED_SPECS = (
    dict(kind="residential", count=40, noise_fraction=0.05),
    dict(kind="corporate", count=2, noise_fraction=0.05),
    dict(kind="poultry_farm", count=2, noise_fraction=0.05),
)
CONTROL_SPECS = (dict(kind="residential", count=44, noise_fraction=0.05),)


def bundled_dma(seed: int = 0, weeks: int = 80) -> SynthDma:
    """The heterogeneous reference DMA: 40 residential, 2 corporate, 2 poultry farms."""
    return generate_dma(BUNDLED_SPECS, weeks, seed)


def control_dma(seed: int = 0, weeks: int = 80) -> SynthDma:
    """Homogeneous residential-only DMA."""
    return generate_dma(CONTROL_SPECS, weeks, seed)


def write_labels_csv(path, labels: dict) -> None:
    pd.DataFrame({"meter_id": list(labels), "archetype": list(labels.values())}).to_csv(path, index=False)
