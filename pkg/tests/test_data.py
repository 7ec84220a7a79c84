"""CSV ingestion diagnostics, windowing, and synthetic-fixture ground truth."""

from datetime import datetime

import numpy as np
import pytest

from scengen.data import (CsvSchema, DataError, SiteSeries, SynthParams,
                          load_csv, load_fleet, persistence_forecast,
                          synth_fleet, window_dataset, write_fleet)


def _write(path, rows, header="timestamp,power_mw"):
    path.write_text("\n".join([header] + rows) + "\n")


def _schema(**caps):
    return CsvSchema(capacities=caps or {"s": 100.0}, step_minutes=60)


def test_load_two_row_file(tmp_path):
    _write(tmp_path / "s.csv", ["2024-01-01T00:00:00,10.0",
                                "2024-01-01T01:00:00,20.0"])
    series = load_csv([tmp_path / "s.csv"], _schema())
    assert len(series) == 1 and len(series[0]) == 2
    assert series[0].values_mw[1] == 20.0


def test_load_duplicate_timestamp_names_line(tmp_path):
    _write(tmp_path / "s.csv", ["2024-01-01T00:00:00,1.0",
                                "2024-01-01T00:00:00,2.0"])
    with pytest.raises(DataError, match="line 3"):
        load_csv([tmp_path / "s.csv"], _schema())


def test_load_value_exceeding_capacity(tmp_path):
    _write(tmp_path / "s.csv", ["2024-01-01T00:00:00,105.0",
                                "2024-01-01T01:00:00,1.0"])
    with pytest.raises(DataError, match="exceeds capacity"):
        load_csv([tmp_path / "s.csv"], _schema())


def test_load_missing_value_rejected_with_line(tmp_path):
    _write(tmp_path / "s.csv", ["2024-01-01T00:00:00,1.0",
                                "2024-01-01T01:00:00,",
                                "2024-01-01T02:00:00,2.0"])
    with pytest.raises(DataError, match="line 3: missing value"):
        load_csv([tmp_path / "s.csv"], _schema())


def test_load_gap_detected(tmp_path):
    _write(tmp_path / "s.csv", ["2024-01-01T00:00:00,1.0",
                                "2024-01-01T03:00:00,2.0"])
    with pytest.raises(DataError, match="gap or mixed step"):
        load_csv([tmp_path / "s.csv"], _schema())


def test_load_non_monotone(tmp_path):
    _write(tmp_path / "s.csv", ["2024-01-01T02:00:00,1.0",
                                "2024-01-01T01:00:00,2.0"])
    with pytest.raises(DataError, match="non-monotone"):
        load_csv([tmp_path / "s.csv"], _schema())


def test_load_negative_value(tmp_path):
    _write(tmp_path / "s.csv", ["2024-01-01T00:00:00,-4.0",
                                "2024-01-01T01:00:00,2.0"])
    with pytest.raises(DataError, match="negative"):
        load_csv([tmp_path / "s.csv"], _schema())


def test_load_bad_header(tmp_path):
    _write(tmp_path / "s.csv", ["2024-01-01T00:00:00,1.0"], header="when,mw")
    with pytest.raises(DataError, match="header"):
        load_csv([tmp_path / "s.csv"], _schema())


# -- windowing ------------------------------------------------------------


def _flat_series(n, sites=1, value=None, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(sites):
        vals = np.full(n, value) if value is not None else rng.random(n) * 90.0
        out.append(SiteSeries(f"s{i}", 100.0, 60,
                              datetime(2024, 1, 1), vals))
    return out


def test_window_counts():
    ds = window_dataset(_flat_series(100), horizon=24, stride=24)
    assert ds.windows.shape == (4, 1, 24)


def test_window_split_sizes():
    series = _flat_series(2400)
    ds = window_dataset(series, horizon=24, train_fraction=0.8, seed=1)
    assert ds.windows.shape[0] == 100
    assert len(ds.train_idx) == 80 and len(ds.val_idx) == 20


def test_window_split_is_partition():
    ds = window_dataset(_flat_series(2400), horizon=24, seed=3)
    together = np.concatenate([ds.train_idx, ds.val_idx])
    assert sorted(together.tolist()) == list(range(ds.windows.shape[0]))


def test_window_split_seeded():
    a = window_dataset(_flat_series(2400), horizon=24, seed=9)
    b = window_dataset(_flat_series(2400), horizon=24, seed=9)
    c = window_dataset(_flat_series(2400), horizon=24, seed=10)
    assert np.array_equal(a.train_idx, b.train_idx)
    assert not np.array_equal(a.train_idx, c.train_idx)


def test_window_requires_alignment():
    s1 = _flat_series(100)[0]
    s2 = SiteSeries("other", 100.0, 60, datetime(2024, 2, 1), np.ones(100))
    with pytest.raises(DataError, match="grid"):
        window_dataset([s1, s2], horizon=24)


def test_window_insufficient_data():
    with pytest.raises(DataError, match="insufficient"):
        window_dataset(_flat_series(30), horizon=24)


def test_per_unit_scaling_invertible():
    series = _flat_series(50, seed=4)[0]
    back = series.per_unit() * series.capacity_mw
    assert np.max(np.abs(back - series.values_mw)) < 1e-12


def test_fleet_round_trip_bit_exact(tmp_path):
    fleet = synth_fleet("wind", sites=3, steps=200, seed=2)
    write_fleet(fleet.series, tmp_path / "fleet", truth=fleet.truth)
    loaded = load_fleet(tmp_path / "fleet")
    ds_a = window_dataset(fleet.series, horizon=24, seed=0)
    ds_b = window_dataset(loaded, horizon=24, seed=0)
    assert np.array_equal(ds_a.windows, ds_b.windows)
    assert np.array_equal(ds_a.train_idx, ds_b.train_idx)


# -- synthetic fleets -------------------------------------------------------


def test_solar_zero_at_night():
    fleet = synth_fleet("solar", sites=2, steps=96, seed=5)
    night = fleet.truth["night_hours"]
    for s in fleet.series:
        hours = np.arange(len(s)) % 24
        assert np.all(s.values_mw[np.isin(hours, night)] == 0.0)
        assert s.values_mw.max() > 0.0


def test_wind_independent_sites_when_rho_zero():
    fleet = synth_fleet("wind", sites=3, steps=10_000, seed=6,
                        params=SynthParams(rho=0.0))
    pooled = np.stack([s.per_unit() for s in fleet.series])
    corr = np.corrcoef(pooled)
    off = corr[~np.eye(3, dtype=bool)]
    assert np.max(np.abs(off)) < 0.05


def test_wind_correlated_fleet_matches_ground_truth():
    fleet = synth_fleet("wind", sites=4, steps=10_000, seed=7,
                        params=SynthParams(rho=0.9))
    pooled = np.stack([s.per_unit() for s in fleet.series])
    corr = np.corrcoef(pooled)
    truth = np.array(fleet.truth["correlation"])
    assert np.max(np.abs(corr - truth)) < 0.05


def test_wind_values_in_unit_interval():
    fleet = synth_fleet("wind", sites=2, steps=5000, seed=8)
    for s in fleet.series:
        pu = s.per_unit()
        assert pu.min() >= 0.0 and pu.max() <= 1.0


def test_synth_rejects_bad_kind():
    with pytest.raises(ValueError):
        synth_fleet("tidal", sites=1, steps=10)


# -- persistence baseline ----------------------------------------------------


def test_persistence_constant_series():
    series = _flat_series(48, value=37.0)
    pf = persistence_forecast(series, horizon=24, method="last")
    assert np.allclose(pf.values, 0.37)


def test_persistence_diurnal_replays_yesterday():
    fleet = synth_fleet("solar", sites=2, steps=72, seed=9)
    pf = persistence_forecast(fleet.series, horizon=24, method="diurnal")
    for i, s in enumerate(fleet.series):
        assert np.allclose(pf.values[i], s.per_unit()[-24:])


def test_persistence_shape(tiny_arch):
    series = _flat_series(48, sites=3)
    pf = persistence_forecast(series, horizon=24)
    assert pf.values.shape == (3, 24)
    assert pf.step_minutes == 60


def test_persistence_needs_history():
    series = _flat_series(6)
    with pytest.raises(DataError):
        persistence_forecast(series, horizon=24, method="diurnal")
