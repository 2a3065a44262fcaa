from datetime import datetime, timedelta, timezone
import math

import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from cpvdiag.errors import ParameterDomainError
from cpvdiag.geometry import (
    Site,
    SolarGeometry,
    earth_sun_distance_factor,
    kasten_young_airmass,
    solar_zenith,
    zenith_from_airmass,
)


class TestAirmass:
    def test_overhead_sun(self):
        assert kasten_young_airmass(0.0) == pytest.approx(1.0, abs=1e-3)

    def test_am15_zenith(self):
        # plane-parallel secant gives 48.19 deg; curvature adds a few hundredths
        z = zenith_from_airmass(1.5)
        assert 0.0 < z - math.degrees(math.acos(1 / 1.5)) < 0.1

    def test_below_horizon(self):
        assert math.isinf(kasten_young_airmass(90.0))

    @given(st.floats(1.0, 30.0))
    @settings(max_examples=60, deadline=None)
    def test_inverse_round_trip(self, am):
        z = zenith_from_airmass(am)
        assert_allclose(kasten_young_airmass(z), am, rtol=1e-9)

    @given(st.floats(0.0, 89.0), st.floats(0.0, 89.0))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert kasten_young_airmass(lo) <= kasten_young_airmass(hi)

    def test_rejects_airmass_below_one(self):
        with pytest.raises(ParameterDomainError):
            zenith_from_airmass(0.9)


class TestSolarPosition:
    def test_equinox_noon_on_equator(self):
        # March equinox 2014 near 16:57 UTC; solar noon at lon 0 is ~12:07 UTC
        when = datetime(2014, 3, 20, 12, 7, tzinfo=timezone.utc)
        assert solar_zenith(when, 0.0, 0.0) < 1.0

    def test_bangalore_january_noon(self):
        site = Site()
        noon = min((site.geometry(datetime(2014, 1, 7, 11, 0) + timedelta(minutes=m))
                    for m in range(0, 180, 2)), key=lambda g: g.zenith_deg)
        # declination about -22.4 degrees at latitude 13.0 N
        assert_allclose(noon.zenith_deg, 13.02 + 22.4, atol=0.3)

    def test_naive_times_use_site_zone(self):
        site = Site()
        naive = site.geometry(datetime(2014, 1, 7, 13, 0))
        aware = site.geometry(datetime(2014, 1, 7, 7, 30, tzinfo=timezone.utc))
        assert naive.zenith_deg == pytest.approx(aware.zenith_deg, abs=1e-12)

    def test_distance_factor_range(self):
        f = [earth_sun_distance_factor(d) for d in range(1, 366)]
        assert 0.965 < min(f) < 0.97 and 1.03 < max(f) < 1.036

    def test_geometry_consistency(self):
        g = SolarGeometry.from_zenith(60.0)
        assert g.airmass == pytest.approx(kasten_young_airmass(60.0))
        assert g.sun_up
        assert not SolarGeometry.from_zenith(95.0).sun_up


class TestSite:
    @pytest.mark.parametrize("kw", [{"latitude_deg": 91}, {"longitude_deg": -181},
                                    {"utc_offset_h": 15}])
    def test_rejects_bad_location(self, kw):
        with pytest.raises(ParameterDomainError):
            Site(**kw)

    def test_timezone(self):
        assert Site().tz.utcoffset(None) == timedelta(hours=5, minutes=30)
