"""Solar position and relative air mass."""
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
import math

from .errors import ParameterDomainError


def kasten_young_airmass(zenith_deg):
    """Relative optical air mass (Kasten & Young 1989), floored at 1."""
    if zenith_deg >= 90.0:
        return math.inf
    z = math.radians(zenith_deg)
    am = 1.0 / (math.cos(z) + 0.50572 * (96.07995 - zenith_deg) ** -1.6364)
    return max(am, 1.0)


def zenith_from_airmass(airmass):
    """Invert :func:`kasten_young_airmass` by bisection on ``[0, 90)``."""
    if airmass < 1.0:
        raise ParameterDomainError(f"airmass must be >= 1, got {airmass}")
    lo, hi = 0.0, 89.999
    if airmass <= kasten_young_airmass(lo):
        return 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if kasten_young_airmass(mid) < airmass:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def solar_zenith(when, latitude_deg, longitude_deg):
    """Solar zenith angle in degrees for a UTC instant.

    NOAA low-precision algorithm (fractional-year Fourier series for the
    declination and equation of time); good to ~0.1 deg, ample for air mass.
    """
    if when.tzinfo is None:
        when = when.replace(tzinfo=timezone.utc)
    when = when.astimezone(timezone.utc)
    doy = when.timetuple().tm_yday
    hour = when.hour + when.minute / 60.0 + when.second / 3600.0
    g = 2.0 * math.pi / 365.0 * (doy - 1 + (hour - 12.0) / 24.0)
    eqtime = 229.18 * (0.000075 + 0.001868 * math.cos(g) - 0.032077 * math.sin(g)
                       - 0.014615 * math.cos(2 * g) - 0.040849 * math.sin(2 * g))
    decl = (0.006918 - 0.399912 * math.cos(g) + 0.070257 * math.sin(g)
            - 0.006758 * math.cos(2 * g) + 0.000907 * math.sin(2 * g)
            - 0.002697 * math.cos(3 * g) + 0.00148 * math.sin(3 * g))
    true_solar_min = hour * 60.0 + eqtime + 4.0 * longitude_deg
    hour_angle = math.radians(true_solar_min / 4.0 - 180.0)
    lat = math.radians(latitude_deg)
    cos_z = (math.sin(lat) * math.sin(decl)
             + math.cos(lat) * math.cos(decl) * math.cos(hour_angle))
    return math.degrees(math.acos(max(-1.0, min(1.0, cos_z))))


def earth_sun_distance_factor(day_of_year):
    """Spencer (1971) eccentricity correction (R0/R)^2."""
    b = 2.0 * math.pi * (day_of_year - 1) / 365.0
    return (1.00011 + 0.034221 * math.cos(b) + 0.00128 * math.sin(b)
            + 0.000719 * math.cos(2 * b) + 0.000077 * math.sin(2 * b))


@dataclass(frozen=True)
class SolarGeometry:
    """Sun position for one instant.

    ``airmass`` must be consistent with ``zenith_deg`` under the Kasten-Young
    formula; use the ``from_*`` constructors rather than building by hand.
    """

    zenith_deg: float
    airmass: float
    timestamp: datetime | None = None

    def __post_init__(self):
        if self.zenith_deg < 90.0 and self.airmass < 1.0:
            raise ParameterDomainError(f"airmass must be >= 1, got {self.airmass}")

    @classmethod
    def from_zenith(cls, zenith_deg, timestamp=None):
        return cls(zenith_deg, kasten_young_airmass(zenith_deg), timestamp)

    @classmethod
    def from_airmass(cls, airmass, timestamp=None):
        return cls(zenith_from_airmass(airmass), float(airmass), timestamp)

    @classmethod
    def from_site(cls, when, latitude_deg, longitude_deg):
        return cls.from_zenith(solar_zenith(when, latitude_deg, longitude_deg), when)

    @property
    def sun_up(self):
        return self.zenith_deg < 90.0

    @property
    def day_of_year(self):
        if self.timestamp is None:
            return None
        return self.timestamp.timetuple().tm_yday


@dataclass(frozen=True)
class Site:
    """Test-site location.  ``utc_offset_h`` is the local civil time zone,
    used for naive timestamps and for grouping samples into local days."""

    latitude_deg: float = 13.02
    longitude_deg: float = 77.57
    elevation_m: float = 920.0
    utc_offset_h: float = 5.5

    def __post_init__(self):
        if not -90.0 <= self.latitude_deg <= 90.0:
            raise ParameterDomainError(f"latitude {self.latitude_deg} outside -90..90")
        if not -180.0 <= self.longitude_deg <= 180.0:
            raise ParameterDomainError(f"longitude {self.longitude_deg} outside -180..180")
        if not -14.0 <= self.utc_offset_h <= 14.0:
            raise ParameterDomainError(f"UTC offset {self.utc_offset_h} h outside -14..14")

    @property
    def tz(self):
        return timezone(timedelta(hours=self.utc_offset_h))

    def geometry(self, when):
        if when.tzinfo is None:
            when = when.replace(tzinfo=self.tz)
        return SolarGeometry.from_site(when, self.latitude_deg, self.longitude_deg)
