"""Forecast metrics, rolling-origin evaluation and model comparison tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .forecaster import HORIZON, frame_split, origins_in

MAPE_EPSILON = 1e-6
ABLATION_NAME = "wavelet_cnn"


class UndefinedMetricError(ValueError):
    pass


def _pair(actual, forecast):
    a = np.asarray(actual, dtype=float).ravel()
    f = np.asarray(forecast, dtype=float).ravel()
    if a.shape != f.shape:
        raise ValueError(f"length mismatch: {a.size} actual vs {f.size} forecast values")
    return a, f


def mape_details(actual, forecast, epsilon: float = MAPE_EPSILON) -> tuple[float, int]:
    """Return (MAPE in percent, number of excluded hours with actual <= epsilon)."""
    a, f = _pair(actual, forecast)
    keep = a > epsilon
    if not keep.any():
        raise UndefinedMetricError("every hour has a near-zero actual; MAPE is undefined")
    return float(100.0 * np.mean(np.abs(a[keep] - f[keep]) / a[keep])), int((~keep).sum())


def mape(actual, forecast, epsilon: float = MAPE_EPSILON) -> float:
    return mape_details(actual, forecast, epsilon)[0]


def mae_lh(actual, forecast) -> float:
    """Mean absolute error in litres per hour for inputs in m³/h."""
    a, f = _pair(actual, forecast)
    return float(1000.0 * np.mean(np.abs(a - f)))


@dataclass(frozen=True, eq=False)
class ForecastRecord:
    origin: pd.Timestamp
    forecast: np.ndarray
    actual: np.ndarray | None = None

    @property
    def mape(self) -> float | None:
        if self.actual is None:
            return None
        try:
            return mape(self.actual, self.forecast)
        except UndefinedMetricError:
            return None

    @property
    def mae_lh(self) -> float | None:
        return None if self.actual is None else mae_lh(self.actual, self.forecast)


@dataclass(frozen=True, eq=False)
class MetricReport:
    model: str
    mape: float
    mae_lh: float
    records: tuple
    span: tuple  # (first origin, last target hour) timestamps
    excluded_hours: int = 0
    pooling: str = "hours"
    meta: dict = field(default_factory=dict)

    @property
    def n_origins(self) -> int:
        return len(self.records)

    @property
    def n_hours(self) -> int:
        return sum(len(r.forecast) for r in self.records)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "mape_pct": round(self.mape, 6),
            "mae_lh": round(self.mae_lh, 6),
            "n_origins": self.n_origins,
            "n_hours": self.n_hours,
            "excluded_hours": self.excluded_hours,
            "pooling": self.pooling,
            "span": [str(self.span[0]), str(self.span[1])],
            **self.meta,
        }


def test_origins(frame: pd.DataFrame, stride: int = 24, hour: int | None = 0) -> np.ndarray:
    """Forecast origins in the test range: every ``stride`` hours, aligned to local ``hour``."""
    _, _, test = frame_split(frame)
    if len(test) == 0:
        raise ValueError("frame has no test range")
    origins = origins_in(test, 1, HORIZON, aligned_hour=hour, hours=frame["hour"].to_numpy()) \
        if hour is not None else origins_in(test, 1, HORIZON)
    if hour is not None:
        # stride counts hours, so keep every (stride / 24)-th aligned origin
        step = max(stride // 24, 1)
        return origins[::step]
    return origins[::stride]


def metric_report(model_name: str, records, pooling: str = "hours", meta: dict | None = None) -> MetricReport:
    records = tuple(records)
    a = np.concatenate([r.actual for r in records])
    f = np.concatenate([r.forecast for r in records])
    if pooling == "hours":
        value, excluded = mape_details(a, f)
    elif pooling == "days":
        per, excluded = [], 0
        for r in records:
            try:
                m, e = mape_details(r.actual, r.forecast)
                per.append(m)
                excluded += e
            except UndefinedMetricError:
                excluded += len(r.actual)
        if not per:
            raise UndefinedMetricError("no origin has a defined MAPE")
        value = float(np.mean(per))
    else:
        raise ValueError("pooling must be 'hours' or 'days'")
    span = (records[0].origin, records[-1].origin + pd.Timedelta(hours=len(records[-1].forecast) - 1))
    return MetricReport(model_name, value, mae_lh(a, f), records, span, excluded, pooling, meta or {})


def forecast_records(model, frame: pd.DataFrame, origins) -> list[ForecastRecord]:
    origins = np.atleast_1d(np.asarray(origins, dtype=int))
    preds = np.asarray(model.predict(frame, origins), dtype=float)
    total = frame["total"].to_numpy(float)
    out = []
    for t, p in zip(origins, preds):
        actual = total[t:t + len(p)] if t + len(p) <= len(total) else None
        out.append(ForecastRecord(frame.index[t], p, actual))
    return out


def rolling_evaluate(model, frame: pd.DataFrame, stride: int = 24, hour: int | None = 0,
                     pooling: str = "hours", name: str | None = None, meta: dict | None = None) -> MetricReport:
    """Day-ahead forecasts at every stride-aligned origin of the test range."""
    origins = test_origins(frame, stride, hour)
    records = forecast_records(model, frame, origins)
    return metric_report(name or getattr(model, "name", type(model).__name__), records, pooling, meta)


def compare_models(reports, baseline: str = ABLATION_NAME) -> pd.DataFrame:
    """Rows = models (sorted by name), columns = MAPE, MAE and the gain over ``baseline``.

    ``mape_gain_pts`` is the baseline MAPE minus the model's MAPE, in
    percentage points; ``mape_gain_rel_pct`` is that gain relative to the
    baseline MAPE.
    """
    reports = list(reports)
    spans = {(str(r.span[0]), str(r.span[1])) for r in reports}
    if len(spans) > 1:
        raise ValueError(f"reports cover different spans: {sorted(spans)}")
    rows = sorted(((r.model, r.mape, r.mae_lh) for r in reports), key=lambda row: row[0])
    table = pd.DataFrame(rows, columns=["model", "mape_pct", "mae_lh"]).set_index("model")
    if baseline in table.index:
        ref = table.loc[baseline, "mape_pct"]
        table["mape_gain_pts"] = ref - table["mape_pct"]
        table["mape_gain_rel_pct"] = 100.0 * table["mape_gain_pts"] / ref
    else:
        table["mape_gain_pts"] = np.nan
        table["mape_gain_rel_pct"] = np.nan
    return table


def format_table(table: pd.DataFrame) -> str:
    return table.to_string(float_format=lambda v: f"{v:.4f}")


def write_forecast_csv(path, report: MetricReport) -> None:
    rows = []
    for r in report.records:
        for step, f in enumerate(r.forecast):
            a = r.actual[step] if r.actual is not None else np.nan
            rows.append((r.origin.strftime("%Y-%m-%dT%H:%M:%SZ"), step, f, a))
    pd.DataFrame(rows, columns=["origin", "step", "forecast_m3h", "actual_m3h"]).to_csv(
        path, index=False, float_format="%.10g")


def read_forecast_csv(path) -> list[ForecastRecord]:
    df = pd.read_csv(path)
    out = []
    for origin, grp in df.groupby("origin", sort=True):
        grp = grp.sort_values("step")
        actual = grp.actual_m3h.to_numpy(float)
        out.append(ForecastRecord(pd.Timestamp(origin), grp.forecast_m3h.to_numpy(float),
                                  None if np.isnan(actual).all() else actual))
    return out


def write_report_json(path, report: MetricReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
