import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from dmacast.data import (AlignmentError, ConflictError, DataError, DemandSeries, DmaDataset, HolidayCalendar,
                          MeterSeries, ParseError, UnfillableGapError, WeatherSeries, aggregate_dma, align_meters,
                          chronological_split, demand_frame, load_holidays, load_meter_csv, load_weather_csv,
                          prepare_meters, resample_hourly, week_hours, write_meter_csv, write_weather_csv)

T0 = pd.Timestamp("2021-03-01 00:00", tz="UTC")  # Monday


def _write(tmp_path, rows, name="m.csv"):
    path = tmp_path / name
    lines = ["meter_id,timestamp_iso8601,consumption_m3h"] + [",".join(map(str, r)) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _rows(meter, n, start=T0, f=lambda i: i * 0.1):
    return [(meter, (start + pd.Timedelta(hours=i)).isoformat(), f(i)) for i in range(n)]


def test_load_two_meters(tmp_path):
    path = _write(tmp_path, _rows("a", 48) + _rows("b", 48))
    meters = load_meter_csv(path)
    assert [m.meter_id for m in meters] == ["a", "b"]
    assert all(len(m) == 48 and not m.has_gaps for m in meters)
    assert meters[0].values[5] == pytest.approx(0.5)


def test_shuffled_rows_give_sorted_series(tmp_path):
    rows = _rows("a", 30) + _rows("b", 30)
    shuffled = [rows[i] for i in np.random.default_rng(0).permutation(len(rows))]
    ref = load_meter_csv(_write(tmp_path, rows, "sorted.csv"))
    got = load_meter_csv(_write(tmp_path, shuffled, "shuffled.csv"))
    assert ref == got


def test_unparseable_timestamp_names_line(tmp_path):
    rows = _rows("a", 5)
    rows[3] = ("a", "not-a-time", 1.0)
    with pytest.raises(ParseError, match="line 5") as err:
        load_meter_csv(_write(tmp_path, rows))
    assert err.value.line == 5


def test_bad_number_names_line(tmp_path):
    rows = _rows("a", 5)
    rows[1] = ("a", rows[1][1], "abc")
    with pytest.raises(ParseError) as err:
        load_meter_csv(_write(tmp_path, rows))
    assert err.value.line == 3


def test_missing_column(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("meter_id,timestamp_iso8601\na,2021-01-01T00:00Z\n")
    with pytest.raises(ParseError, match="missing columns"):
        load_meter_csv(p)


def test_duplicate_reading_conflicts(tmp_path):
    rows = _rows("a", 5) + [_rows("a", 5)[2]]
    with pytest.raises(ConflictError):
        load_meter_csv(_write(tmp_path, rows))


def test_negative_clipped_with_warning(tmp_path, caplog):
    rows = _rows("a", 4)
    rows[2] = ("a", rows[2][1], -0.5)
    m = load_meter_csv(_write(tmp_path, rows))[0]
    assert m.values[2] == 0.0
    assert "negative" in caplog.text


def test_missing_hours_become_nan(tmp_path):
    rows = [r for i, r in enumerate(_rows("a", 10)) if i not in (3, 4)]
    m = load_meter_csv(_write(tmp_path, rows))[0]
    assert len(m) == 10 and np.isnan(m.values[[3, 4]]).all()


def test_subhour_timestamps_floor(tmp_path):
    rows = [("a", "2021-03-01T00:20:00Z", 1.0), ("a", "2021-03-01T01:59:00Z", 2.0)]
    m = load_meter_csv(_write(tmp_path, rows))[0]
    assert m.start == T0 and list(m.values) == [1.0, 2.0]


def test_meter_series_rejects_negative():
    with pytest.raises(ValueError):
        MeterSeries("a", T0, [1.0, -1.0])


def test_round_trip_csv(tmp_path):
    m = MeterSeries("x", T0, np.round(np.random.default_rng(0).random(30), 6))
    write_meter_csv(tmp_path / "o.csv", [m])
    assert load_meter_csv(tmp_path / "o.csv")[0] == m


def test_weather_round_trip_and_humidity_range(tmp_path):
    w = WeatherSeries(T0, np.arange(5.0), np.array([10, 20, 30, 40, 50.0]))
    write_weather_csv(tmp_path / "w.csv", w)
    back = load_weather_csv(tmp_path / "w.csv")
    np.testing.assert_allclose(back.humidity, w.humidity)
    with pytest.raises(ValueError):
        WeatherSeries(T0, [1.0], [101.0])


def test_holiday_file(tmp_path):
    p = tmp_path / "h.txt"
    p.write_text("# comment\n2021-12-25\n\n2021-12-26\n")
    cal = load_holidays(p)
    assert pd.Timestamp("2021-12-25") in cal and len(cal.dates) == 2
    p.write_text("2021-13-01\n")
    with pytest.raises(ParseError):
        load_holidays(p)


# ---------------------------------------------------------------- gaps


def test_gapless_unchanged():
    m = MeterSeries("a", T0, [1.0, 2.0, 3.0])
    assert resample_hourly(m) == m


def test_two_hour_gap_linear():
    m = MeterSeries("a", T0, [1.0, np.nan, np.nan, 3.0])
    np.testing.assert_allclose(resample_hourly(m).values, [1.0, 5 / 3, 7 / 3, 3.0], atol=1e-9)


def test_zero_fill():
    m = MeterSeries("a", T0, [1.0, np.nan, 3.0])
    assert list(resample_hourly(m, "zero_fill").values) == [1.0, 0.0, 3.0]


def test_long_gap():
    vals = np.r_[1.0, np.full(30, np.nan), 2.0]
    m = MeterSeries("a", T0, vals)
    with pytest.raises(UnfillableGapError):
        resample_hourly(m, "interpolate_short", max_gap_hours=24)
    assert resample_hourly(m, "drop_meter", max_gap_hours=24) is None


def test_all_missing():
    with pytest.raises(UnfillableGapError):
        resample_hourly(MeterSeries("a", T0, [np.nan, np.nan]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(0, 100)), min_size=2, max_size=40))
def test_resample_idempotent(raw):
    vals = np.array([np.nan if v is None else v for v in raw])
    if np.isnan(vals).all():
        return
    m = MeterSeries("a", T0, vals)
    try:
        once = resample_hourly(m, max_gap_hours=40)
    except UnfillableGapError:
        return
    assert resample_hourly(once, max_gap_hours=40) == once
    assert not once.has_gaps and (once.values >= 0).all()


def test_prepare_keeps_dropped_meter_in_total():
    good = MeterSeries("g", T0, [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    bad = MeterSeries("b", T0, [2.0, np.nan, np.nan, np.nan, np.nan, np.nan, np.nan, np.nan])
    clean, total = prepare_meters([good, bad], "drop_meter", max_gap_hours=3)
    assert [m.meter_id for m in clean] == ["g"]
    assert aggregate_dma(total).values[0] == 3.0 and aggregate_dma(total).values[1] == 1.0


def test_align_meters_pads_with_nan():
    a = MeterSeries("a", T0, [1.0, 2.0])
    b = MeterSeries("b", T0 + pd.Timedelta(hours=1), [5.0, 6.0])
    al = align_meters([a, b])
    assert all(len(m) == 3 for m in al)
    assert np.isnan(al[0].values[2]) and np.isnan(al[1].values[0])


# ---------------------------------------------------------------- aggregation


def test_aggregate_constants_and_identity():
    ms = [MeterSeries(str(c), T0, np.full(10, c)) for c in (1.0, 2.0, 3.0)]
    assert np.all(aggregate_dma(ms).values == 6.0)
    assert np.array_equal(aggregate_dma(ms[:1]).values, ms[0].values)


def test_aggregate_matches_per_hour_oracle():
    rng = np.random.default_rng(0)
    ms = [MeterSeries(str(i), T0, rng.random(200)) for i in range(50)]
    got = aggregate_dma(ms).values
    for h in range(200):
        s = 0.0
        for m in ms:
            s += m.values[h]
        assert got[h] == pytest.approx(s, rel=1e-12)


def test_aggregate_linear_union():
    rng = np.random.default_rng(1)
    A = [MeterSeries(f"a{i}", T0, rng.random(24)) for i in range(5)]
    B = [MeterSeries(f"b{i}", T0, rng.random(24)) for i in range(7)]
    np.testing.assert_allclose(aggregate_dma(A + B).values, aggregate_dma(A).values + aggregate_dma(B).values,
                               rtol=1e-12)


def test_aggregate_grid_mismatch():
    with pytest.raises(AlignmentError):
        aggregate_dma([MeterSeries("a", T0, [1.0, 2.0]), MeterSeries("b", T0, [1.0])])
    with pytest.raises(DataError):
        aggregate_dma([MeterSeries("a", T0, [1.0, np.nan])])


# ---------------------------------------------------------------- split / calendar


def test_split_100_weeks():
    s = chronological_split(100 * 168)
    assert s.test == range(74 * 168, 100 * 168)
    n_val = int(74 * 168 * 0.1)
    assert s.val == range(74 * 168 - n_val, 74 * 168)
    assert s.train == range(0, 74 * 168 - n_val)


def test_split_no_test_and_too_short():
    s = chronological_split(1000, test_weeks=0)
    assert len(s.test) == 0 and s.val.stop == 1000
    with pytest.raises(ValueError, match="insufficient"):
        chronological_split(26 * 168 + 100)


@settings(max_examples=50, deadline=None)
@given(st.integers(27 * 168, 120 * 168), st.floats(0.0, 0.5))
def test_split_partitions_without_leakage(n, frac):
    tr, va, te = chronological_split(n, 26, frac)
    assert tr.start == 0 and tr.stop == va.start and va.stop == te.start and te.stop == n
    assert len(te) == 26 * 168
    if len(va) and len(tr):
        assert max(tr) < min(va) < min(te)


def test_week_hours_local_offset():
    idx = pd.date_range(T0, periods=3, freq="h")
    assert list(week_hours(idx)) == [0, 1, 2]
    # UTC Monday 00:00 is Sunday 23:00 one hour west (offset -1)
    assert list(week_hours(idx, -1)) == [167, 0, 1]


def _dataset(n_weeks=30):
    n = n_weeks * 168
    ms = [MeterSeries(f"m{i}", T0, np.full(n, float(i + 1))) for i in range(3)]
    w = WeatherSeries(T0, np.zeros(n), np.full(n, 50.0))
    cal = HolidayCalendar(frozenset([pd.Timestamp("2021-03-03").date()]))
    return DmaDataset(tuple(ms), w, cal).with_split()


def test_dataset_split_and_frame():
    ds = _dataset()
    s = ds.split_ranges()
    assert len(s.test) == 26 * 168 and s.train.start == 0
    demands = [DemandSeries("cluster-0", T0, np.full(ds.n_hours, 1.0)),
               DemandSeries("cluster-1", T0, np.full(ds.n_hours, 5.0))]
    fr = demand_frame(ds, demands)
    assert list(fr.columns[:3]) == ["total", "cluster_0", "cluster_1"]
    assert fr.attrs["split"] == tuple(s)
    assert (fr.total == 6.0).all()
    # Wednesday is a holiday, so not a working weekday
    wed = fr.index[(fr.index.day == 3) & (fr.index.month == 3)]
    assert (fr.loc[wed, "holiday"] == 1).all() and (fr.loc[wed, "weekday"] == 0).all()
    assert fr.week_hour.iloc[0] == 0 and fr.week_hour.iloc[167] == 167


def test_dataset_weather_grid_mismatch():
    ms = [MeterSeries("a", T0, np.ones(10))]
    with pytest.raises(AlignmentError):
        DmaDataset(tuple(ms), WeatherSeries(T0, np.zeros(9), np.zeros(9)), HolidayCalendar())
