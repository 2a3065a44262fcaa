import json
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from cpvdiag import device as d
from cpvdiag.energy_yield import JANUARY_13H_CHANNELS_C
from cpvdiag.errors import ConfigurationError, InputDataError, OutOfValidityError
from cpvdiag.spectral import am15d_reference
from cpvdiag.thermal import (
    TemperatureMap,
    WeatherRecord,
    average_cell_temp,
    effective_cell_temps,
    load_channel_map,
    offset_temperature,
    read_weather_log,
    weather_log_text,
)

# centre 3x3 block of the row-major 5x5 layout
CENTRE = [6, 7, 8, 11, 12, 13, 16, 17, 18]
EDGE = [c for c in range(25) if c not in CENTRE]


class TestOffset:
    @pytest.mark.parametrize("dni, expected", [(600.0, 0.40), (1000.0, 12.0)])
    def test_values(self, dni, expected):
        assert offset_temperature(dni) == pytest.approx(expected, abs=1e-9)

    def test_below_validity(self):
        with pytest.raises(OutOfValidityError):
            offset_temperature(586.2)
        assert offset_temperature(586.2, allow_below=True) == 0.0

    @given(st.floats(600.0, 1500.0), st.floats(600.0, 1500.0))
    @settings(max_examples=50)
    def test_affine(self, a, b):
        assert offset_temperature(a) - offset_temperature(b) == pytest.approx(
            0.029 * (a - b), abs=1e-9)


class TestChannelMap:
    def test_bundled_covers_every_cell_once(self):
        m = load_channel_map()
        assert len(m) == 13
        cells = sorted(c for v in m.values() for c in v)
        assert cells == list(range(25))

    def test_unmapped_cell(self):
        m = dict(load_channel_map())
        del m[12]
        with pytest.raises(ConfigurationError, match="not mapped"):
            TemperatureMap({ch: 60.0 for ch in m}, m)

    def test_double_mapped_cell(self):
        m = dict(load_channel_map())
        m[11] = (20, 24)
        with pytest.raises(ConfigurationError):
            TemperatureMap({ch: 60.0 for ch in m}, m)

    def test_missing_reading(self):
        readings = {ch: 60.0 for ch in range(1, 13)}
        with pytest.raises(ConfigurationError, match="no reading"):
            TemperatureMap(readings)

    def test_reading_out_of_range(self):
        readings = {ch: 60.0 for ch in range(1, 14)}
        readings[3] = 150.0
        with pytest.raises(OutOfValidityError):
            TemperatureMap(readings)

    def test_file(self, tmp_path):
        p = tmp_path / "map.json"
        p.write_text(json.dumps({"channel_to_cells": {"1": list(range(25))}}))
        m = load_channel_map(p)
        assert TemperatureMap({1: 50.0}, m).sensor_temps().tolist() == [50.0] * 25

    def test_malformed_file(self, tmp_path):
        p = tmp_path / "map.json"
        p.write_text("{}")
        with pytest.raises(ConfigurationError):
            load_channel_map(p)


class TestEffectiveTemps:
    def test_uniform(self):
        t = effective_cell_temps(TemperatureMap.uniform(70.0), 1000.0)
        assert_allclose(t, 82.0)
        assert average_cell_temp(TemperatureMap.uniform(70.0), 1000.0) == pytest.approx(82.0)

    def test_centre_hotter(self):
        t = effective_cell_temps(TemperatureMap(JANUARY_13H_CHANNELS_C), 960.0)
        assert t[CENTRE].mean() > t[EDGE].mean()

    def test_zero_offset_passthrough(self):
        tmap = TemperatureMap(JANUARY_13H_CHANNELS_C)
        assert_allclose(effective_cell_temps(tmap, 500.0, allow_below=True), tmap.sensor_temps())
        with pytest.raises(OutOfValidityError):
            effective_cell_temps(tmap, 500.0)

    @given(st.integers(1, 13), st.floats(0.1, 20.0))
    @settings(max_examples=30)
    def test_order_preserving(self, ch, bump):
        base = dict(JANUARY_13H_CHANNELS_C)
        hot = dict(base)
        hot[ch] = base[ch] + bump
        a = effective_cell_temps(TemperatureMap(base), 900.0)
        b = effective_cell_temps(TemperatureMap(hot), 900.0)
        cells = list(load_channel_map()[ch])
        assert np.all(b[cells] > a[cells])
        others = [c for c in range(25) if c not in cells]
        assert_allclose(b[others], a[others])

    def test_offset_lowers_voc(self, ref_module):
        tmap = TemperatureMap(JANUARY_13H_CHANNELS_C)
        il = d.module_photocurrents(ref_module, am15d_reference(900.0))
        raw = d.module_iv(ref_module, il, tmap.sensor_temps()).metrics.voc_v
        eff = d.module_iv(ref_module, il, effective_cell_temps(tmap, 900.0)).metrics.voc_v
        assert eff < raw


def _record(minute, dni=900.0, **kw):
    return WeatherRecord(datetime(2014, 1, 7, 7, minute, tzinfo=timezone.utc), dni, 25.0,
                         40.0, 910.0, 1.5, {ch: 60.0 + ch for ch in range(1, 14)}, **kw)


class TestWeatherLog:
    def test_round_trip(self, tmp_path):
        recs = [_record(0), _record(10, pw_cm=2.01), _record(20, power_w=150.5)]
        p = tmp_path / "w.csv"
        p.write_text(weather_log_text(recs))
        assert read_weather_log(p) == recs

    def test_naive_timestamps_take_default_zone(self, tmp_path):
        p = tmp_path / "w.csv"
        p.write_text("timestamp,dni_w_m2,ambient_c,rh_pct,pressure_mb,wind_mps,ch1_c\n"
                     "2014-01-07T12:00:00,900,25,40,910,1,60\n")
        ist = timezone(timedelta(hours=5.5))
        (rec,) = read_weather_log(p, ist)
        assert rec.timestamp.utcoffset() == timedelta(hours=5.5)

    @pytest.mark.parametrize("row, line", [
        ("2014-01-07T12:00:00,900,25,40,910,1\n", 2),
        ("2014-01-07T12:00:00,abc,25,40,910,1,60\n", 2),
        ("2014-01-07T12:00:00,-5,25,40,910,1,60\n", 2),
        ("2014-01-07T12:00:00,900,25,40,910,1,nan\n", 2),
        ("2014-01-07T12:00:00,900,25,40,910,1,60\n2014-01-07T11:00:00,900,25,40,910,1,60\n", 3),
    ])
    def test_errors_carry_line(self, tmp_path, row, line):
        p = tmp_path / "w.csv"
        p.write_text("timestamp,dni_w_m2,ambient_c,rh_pct,pressure_mb,wind_mps,ch1_c\n" + row)
        with pytest.raises(InputDataError) as err:
            read_weather_log(p)
        assert err.value.line == line

    def test_bad_header(self, tmp_path):
        p = tmp_path / "w.csv"
        p.write_text("timestamp,dni,ambient_c\n")
        with pytest.raises(InputDataError) as err:
            read_weather_log(p)
        assert err.value.line == 1

    def test_unknown_column(self, tmp_path):
        p = tmp_path / "w.csv"
        p.write_text("timestamp,dni_w_m2,ambient_c,rh_pct,pressure_mb,wind_mps,foo\n")
        with pytest.raises(InputDataError):
            read_weather_log(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputDataError):
            read_weather_log(tmp_path / "absent.csv")

    def test_empty(self, tmp_path):
        p = tmp_path / "w.csv"
        p.write_text("")
        assert read_weather_log(p) == []
