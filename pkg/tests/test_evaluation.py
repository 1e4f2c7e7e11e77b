import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from dmacast.data import chronological_split
from dmacast.evaluation import (ForecastRecord, MetricReport, UndefinedMetricError, compare_models,
                                forecast_records, format_table, mae_lh, mape, mape_details, metric_report,
                                read_forecast_csv, rolling_evaluate, test_origins as eval_origins,
                                write_forecast_csv, write_report_json)

T0 = pd.Timestamp("2018-01-01 00:00", tz="UTC")


def _frame(weeks=80, seed=0):
    n = weeks * 168
    idx = pd.date_range(T0, periods=n, freq="h")
    rng = np.random.default_rng(seed)
    total = 2.0 + np.sin(2 * np.pi * np.arange(n) / 24) + 0.1 * rng.random(n)
    frame = pd.DataFrame({"total": total, "hour": idx.hour}, index=idx)
    frame.attrs["split"] = chronological_split(n, 26, 0.10)
    return frame


class Oracle:
    """Forecasts the actual values, optionally scaled."""

    name = "oracle"

    def __init__(self, factor=1.0):
        self.factor = factor

    def predict(self, frame, origins):
        x = frame["total"].to_numpy()
        return np.stack([self.factor * x[t:t + 24] for t in origins])


# --------------------------------------------------------------------------- metrics


def test_mape_hand_case():
    assert mape([100, 200], [110, 180]) == pytest.approx(10.0, abs=1e-12)


def test_mape_identity():
    assert mape([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0


def test_mape_excludes_zero_hours():
    value, excluded = mape_details([0.0, 100.0, 200.0], [5.0, 110.0, 180.0])
    assert excluded == 1
    assert value == pytest.approx(10.0)


def test_mape_all_excluded_is_error():
    with pytest.raises(UndefinedMetricError):
        mape([0.0, 0.0], [1.0, 1.0])


def test_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        mape([1.0, 2.0], [1.0])
    with pytest.raises(ValueError, match="length"):
        mae_lh([1.0, 2.0], [1.0])


def test_mae_unit_conversion():
    assert mae_lh([1.0], [0.9]) == pytest.approx(100.0, abs=1e-9)
    assert mae_lh([1.0, 2.0], [1.0, 2.0]) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=30), st.floats(0.1, 10))
def test_mae_homogeneous_and_mape_scale_free(values, c):
    a = np.array(values)
    f = a * 1.1 + 0.05
    assert mae_lh(c * a, c * f) == pytest.approx(c * mae_lh(a, f), rel=1e-9)
    assert mape(c * a, c * f) == pytest.approx(mape(a, f), rel=1e-9)
    assert mape(a, f) >= 0 and mae_lh(a, f) >= 0


# --------------------------------------------------------------------------- rolling evaluation


def test_daily_origins_cover_test_span():
    frame = _frame()
    origins = eval_origins(frame)
    assert len(origins) == 182
    assert (frame["hour"].to_numpy()[origins] == 0).all()
    report = rolling_evaluate(Oracle(), frame)
    assert report.n_origins == 182 and report.n_hours == 4368
    _, _, test = frame.attrs["split"]
    assert origins[0] == test.start and origins[-1] + 24 == test.stop


def test_weekly_stride():
    assert len(eval_origins(_frame(), stride=168)) == 26


def test_perfect_model_scores_zero():
    report = rolling_evaluate(Oracle(), _frame())
    assert report.mape == 0.0 and report.mae_lh == 0.0 and report.excluded_hours == 0


def test_scaled_model_mape():
    report = rolling_evaluate(Oracle(1.05), _frame())
    assert report.mape == pytest.approx(5.0, rel=1e-9)


def test_day_pooling_equals_mean_of_daily_mapes():
    frame = _frame()
    rng = np.random.default_rng(1)
    records = [ForecastRecord(frame.index[t], frame.total.to_numpy()[t:t + 24] * (1 + 0.1 * rng.random(24)),
                              frame.total.to_numpy()[t:t + 24]) for t in eval_origins(frame)[:10]]
    by_day = metric_report("m", records, pooling="days")
    assert by_day.mape == pytest.approx(np.mean([r.mape for r in records]))
    with pytest.raises(ValueError):
        metric_report("m", records, pooling="weeks")


def test_report_dict_carries_counts_and_meta():
    report = rolling_evaluate(Oracle(), _frame(), meta={"config_hash": "abc", "seed": 3})
    d = report.to_dict()
    assert d["n_origins"] == 182 and d["excluded_hours"] == 0
    assert d["config_hash"] == "abc" and d["seed"] == 3


# --------------------------------------------------------------------------- comparison


def _report(name, value, span=("a", "b")):
    return MetricReport(name, value, 10 * value, (), span)


def test_compare_paper_headline_delta():
    table = compare_models([_report("cross_attention", 21.86), _report("wavelet_cnn", 26.76)])
    assert table.loc["cross_attention", "mape_gain_pts"] == pytest.approx(4.90, abs=1e-9)
    assert table.loc["wavelet_cnn", "mape_gain_pts"] == 0.0


def test_compare_identical_reports():
    table = compare_models([_report("wavelet_cnn", 5.0), _report("cross_attention", 5.0)])
    assert (table["mape_gain_pts"] == 0.0).all()


def test_compare_is_order_invariant():
    reports = [_report("cross_attention", 21.86), _report("wavelet_cnn", 26.76), _report("lstm", 30.1)]
    ref = compare_models(reports)
    for perm in ([2, 0, 1], [1, 2, 0]):
        pd.testing.assert_frame_equal(compare_models([reports[i] for i in perm]), ref)
    assert "cross_attention" in format_table(ref)


def test_compare_span_mismatch():
    with pytest.raises(ValueError, match="spans"):
        compare_models([_report("a", 1.0, ("x", "y")), _report("b", 1.0, ("x", "z"))])


def test_compare_without_baseline_has_nan_gain():
    table = compare_models([_report("a", 1.0)])
    assert np.isnan(table.loc["a", "mape_gain_pts"])


# --------------------------------------------------------------------------- export round trip


def test_csv_round_trip_recomputes_metrics(tmp_path):
    frame = _frame()
    report = rolling_evaluate(Oracle(1.07), frame)
    path = tmp_path / "f.csv"
    write_forecast_csv(path, report)
    again = metric_report(report.model, read_forecast_csv(path))
    assert again.mape == pytest.approx(report.mape, rel=1e-9)
    assert again.mae_lh == pytest.approx(report.mae_lh, rel=1e-9)
    assert again.n_origins == report.n_origins
    assert pd.read_csv(path).columns.tolist() == ["origin", "step", "forecast_m3h", "actual_m3h"]


def test_report_json_sorted_and_stable(tmp_path):
    report = rolling_evaluate(Oracle(), _frame(), meta={"seed": 0})
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    write_report_json(a, report)
    write_report_json(b, report)
    assert a.read_bytes() == b.read_bytes()
    d = json.loads(a.read_text())
    assert list(d) == sorted(d)


def test_forecast_records_without_future_actuals():
    frame = _frame()
    records = forecast_records(Oracle(), frame, [len(frame) - 24])
    assert records[0].actual is not None
    tail = frame.iloc[:-10]

    class Flat:
        def predict(self, frame, origins):
            return np.ones((len(origins), 24))

    rec = forecast_records(Flat(), tail, [len(tail) - 20])[0]
    assert rec.actual is None and rec.mape is None and rec.mae_lh is None
