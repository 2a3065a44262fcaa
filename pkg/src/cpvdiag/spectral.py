"""Clear-sky direct-beam spectral irradiance and its inversion.

The forward model is the Bird & Riordan parameterised-transmittance model
restricted to the direct beam: the extraterrestrial spectrum multiplied by
Rayleigh, aerosol, water-vapour, ozone and mixed-gas transmittances on the
model's native 122-point grid (300-4000 nm).

Two inverse problems are solved on top of it: precipitable water from the
depth of the near-infrared water band, and aerosol optical depth from the
broadband DNI.  Cloudy conditions are handled by scaling a clear-sky
spectrum to the measured DNI.
"""
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
import csv
import io
import math

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import brentq, minimize_scalar

from .errors import (
    CoverageError,
    InputDataError,
    ParameterDomainError,
    UnfittableDNIError,
)
from .geometry import SolarGeometry, earth_sun_distance_factor

STANDARD_PRESSURE_MB = 1013.25
OZONE_LAYER_HEIGHT_KM = 22.0
EARTH_RADIUS_KM = 6370.0

WATER_BAND_NM = (880.0, 980.0)
PW_BOUNDS_CM = (0.1, 8.0)
AOD_BOUNDS = (0.0, 5.0)


@lru_cache(maxsize=1)
def _coefficients():
    text = resources.files("cpvdiag.data").joinpath(
        "et_absorption_coefficients.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    cols = {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}
    for arr in cols.values():
        arr.setflags(write=False)
    return cols


def native_grid():
    """Wavelength grid (nm) of the bundled extraterrestrial table."""
    return _coefficients()["wavelength_nm"]


def extraterrestrial_spectrum():
    """Mean-distance extraterrestrial spectrum on the native grid."""
    c = _coefficients()
    return Spectrum(c["wavelength_nm"], c["et_irradiance_w_m2_nm"])


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Direct-normal spectral irradiance sampled on a wavelength grid.

    Attributes
    ----------
    wavelengths_nm : ndarray
        Strictly increasing wavelengths [nm].
    irradiance_w_m2_nm : ndarray
        Non-negative spectral irradiance [W m^-2 nm^-1].
    """

    wavelengths_nm: np.ndarray
    irradiance_w_m2_nm: np.ndarray

    def __post_init__(self):
        wl = np.array(self.wavelengths_nm, dtype=float)
        e = np.array(self.irradiance_w_m2_nm, dtype=float)
        if wl.ndim != 1 or wl.shape != e.shape or wl.size < 2:
            raise ParameterDomainError("spectrum needs matching 1-D arrays of length >= 2")
        if np.any(np.diff(wl) <= 0):
            raise ParameterDomainError("wavelengths must be strictly increasing")
        if np.any(~np.isfinite(e)) or np.any(e < 0):
            raise ParameterDomainError("spectral irradiance must be finite and >= 0")
        wl.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "wavelengths_nm", wl)
        object.__setattr__(self, "irradiance_w_m2_nm", e)

    @property
    def dni(self):
        """Broadband irradiance [W m^-2], trapezoidal over the grid."""
        return float(trapezoid(self.irradiance_w_m2_nm, self.wavelengths_nm))

    def covers(self, lo_nm, hi_nm):
        return self.wavelengths_nm[0] <= lo_nm and self.wavelengths_nm[-1] >= hi_nm

    def require(self, lo_nm, hi_nm, what="operation"):
        if not self.covers(lo_nm, hi_nm):
            raise CoverageError(
                f"{what} needs {lo_nm:g}-{hi_nm:g} nm, spectrum covers "
                f"{self.wavelengths_nm[0]:g}-{self.wavelengths_nm[-1]:g} nm")

    def at(self, wavelengths_nm):
        """Linearly interpolated irradiance at arbitrary wavelengths."""
        return np.interp(wavelengths_nm, self.wavelengths_nm, self.irradiance_w_m2_nm)

    def resample(self, wavelengths_nm):
        wl = np.asarray(wavelengths_nm, dtype=float)
        self.require(wl[0], wl[-1], "resampling")
        return Spectrum(wl, self.at(wl))

    def scaled(self, factor):
        return Spectrum(self.wavelengths_nm, self.irradiance_w_m2_nm * factor)

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["wavelength_nm", "irradiance_w_m2_nm"])
        for x, y in zip(self.wavelengths_nm, self.irradiance_w_m2_nm):
            w.writerow([f"{x:.4f}", f"{y:.8g}"])
        return buf.getvalue()

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    @classmethod
    def from_csv(cls, path):
        """Read a ``wavelength_nm,irradiance_w_m2_nm`` file.

        Raises :class:`InputDataError` naming the first offending line.
        """
        wl, e = [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader, [])]
            if header[:2] != ["wavelength_nm", "irradiance_w_m2_nm"]:
                raise InputDataError(f"unexpected header {header!r}", line=1)
            for lineno, row in enumerate(reader, start=2):
                if not row or not "".join(row).strip():
                    continue
                try:
                    x, y = float(row[0]), float(row[1])
                except (ValueError, IndexError):
                    raise InputDataError(f"cannot parse {row!r}", line=lineno) from None
                if wl and x <= wl[-1]:
                    raise InputDataError(
                        f"wavelength {x:g} nm is not above previous {wl[-1]:g} nm",
                        line=lineno)
                if y < 0 or not math.isfinite(y):
                    raise InputDataError(f"invalid irradiance {y!r}", line=lineno)
                wl.append(x)
                e.append(y)
        if len(wl) < 2:
            raise InputDataError("spectrum file holds fewer than two samples")
        return cls(np.array(wl), np.array(e))


@dataclass(frozen=True)
class AtmosphericState:
    """Atmospheric inputs of the transmittance model.

    ``alpha_rh_table`` optionally maps relative humidity (%) to an Angstrom
    exponent; when given it overrides ``angstrom_alpha`` through linear
    interpolation at ``relative_humidity_pct``.
    """

    aod500: float = 0.084
    pw_cm: float = 1.42
    angstrom_alpha: float = 1.14
    ozone_atm_cm: float = 0.30
    pressure_mb: float = STANDARD_PRESSURE_MB
    ambient_temp_c: float = 25.0
    relative_humidity_pct: float = 50.0
    alpha_rh_table: tuple = field(default=None)

    def __post_init__(self):
        if not self.aod500 >= 0:
            raise ParameterDomainError(f"aod500 must be >= 0, got {self.aod500}")
        if not self.pw_cm > 0:
            raise ParameterDomainError(f"precipitable water must be > 0, got {self.pw_cm}")
        if not 0 <= self.relative_humidity_pct <= 100:
            raise ParameterDomainError(
                f"relative humidity must lie in [0, 100], got {self.relative_humidity_pct}")
        if self.ozone_atm_cm < 0 or self.pressure_mb < 0:
            raise ParameterDomainError("ozone column and pressure must be >= 0")

    @property
    def alpha(self):
        if self.alpha_rh_table:
            rh, a = zip(*sorted(self.alpha_rh_table))
            return float(np.interp(self.relative_humidity_pct, rh, a))
        return self.angstrom_alpha

    def with_(self, **changes):
        return replace(self, **changes)


def transmittances(atm, geom):
    """Per-wavelength transmittances on the native grid.

    Returns a dict with keys ``rayleigh``, ``aerosol``, ``water``, ``ozone``,
    ``mixed``.
    """
    if not geom.airmass >= 1.0 or not math.isfinite(geom.airmass):
        raise ParameterDomainError(f"airmass must be finite and >= 1, got {geom.airmass}")
    if not atm.pw_cm > 0:
        raise ParameterDomainError(f"precipitable water must be > 0, got {atm.pw_cm}")
    c = _coefficients()
    lam_um = c["wavelength_nm"] / 1000.0
    m = geom.airmass
    m_p = m * atm.pressure_mb / STANDARD_PRESSURE_MB

    rayleigh = np.exp(-m_p / (lam_um ** 4 * (115.6406 - 1.335 / lam_um ** 2)))

    tau_a = atm.aod500 * (lam_um / 0.5) ** (-atm.alpha)
    aerosol = np.exp(-tau_a * m)

    aw = c["water_vapor_coeff"] * atm.pw_cm * m
    water = np.exp(-0.2385 * aw / (1.0 + 20.07 * aw) ** 0.45)

    h = OZONE_LAYER_HEIGHT_KM / EARTH_RADIUS_KM
    cos_z = math.cos(math.radians(geom.zenith_deg))
    m_oz = (1.0 + h) / math.sqrt(cos_z ** 2 + 2.0 * h)
    ozone = np.exp(-c["ozone_coeff"] * atm.ozone_atm_cm * m_oz)

    au = c["mixed_gas_coeff"] * m_p
    mixed = np.exp(-1.41 * au / (1.0 + 118.93 * au) ** 0.45)

    return {"rayleigh": rayleigh, "aerosol": aerosol, "water": water,
            "ozone": ozone, "mixed": mixed}


def direct_beam_spectrum(atm, geom):
    """Clear-sky direct-normal spectrum for the given atmosphere and sun position.

    The extraterrestrial table is corrected for the Earth-Sun distance when
    ``geom`` carries a timestamp.

    Raises
    ------
    ParameterDomainError
        airmass below 1 or non-positive precipitable water.
    """
    t = transmittances(atm, geom)
    c = _coefficients()
    doy = geom.day_of_year
    dist = earth_sun_distance_factor(doy) if doy is not None else 1.0
    e = c["et_irradiance_w_m2_nm"] * dist
    for v in t.values():
        e = e * v
    return Spectrum(c["wavelength_nm"], e)


def fit_precipitable_water(measured, atm_prior, geom, window_nm=WATER_BAND_NM,
                           bounds_cm=PW_BOUNDS_CM, tol=1e-5):
    """Precipitable water that best reproduces the near-infrared water band.

    Minimises the sum of squared differences between measured and modelled
    irradiance over the measured samples inside ``window_nm``.  Everything
    else in ``atm_prior`` is held fixed.
    """
    lo, hi = window_nm
    measured.require(lo, hi, "water-band fit")
    mask = (measured.wavelengths_nm >= lo) & (measured.wavelengths_nm <= hi)
    wl = measured.wavelengths_nm[mask]
    target = measured.irradiance_w_m2_nm[mask]
    if wl.size < 3:
        raise CoverageError(f"fewer than 3 measured samples inside {lo:g}-{hi:g} nm")

    def sse(pw):
        model = direct_beam_spectrum(atm_prior.with_(pw_cm=pw), geom)
        return float(np.sum((model.at(wl) - target) ** 2))

    res = minimize_scalar(sse, bounds=bounds_cm, method="bounded", options={"xatol": tol})
    # the bounded search never lands exactly on a bound, so test the ends too
    return float(min((res.x, *bounds_cm), key=sse))


def fit_aod(measured_dni_w_m2, atm_prior, geom, bounds=AOD_BOUNDS, rtol=1e-10):
    """Aerosol optical depth at 500 nm whose spectrum integrates to the DNI.

    Integrated DNI falls strictly with AOD, so the root on ``bounds`` is
    unique.

    Raises
    ------
    UnfittableDNIError
        DNI above the aerosol-free ceiling or below the ``bounds[1]`` floor.
    """
    if not measured_dni_w_m2 > 0:
        raise ParameterDomainError(f"measured DNI must be > 0, got {measured_dni_w_m2}")

    def excess(aod):
        return direct_beam_spectrum(atm_prior.with_(aod500=aod), geom).dni - measured_dni_w_m2

    top = excess(bounds[0])
    if top == 0.0:
        return float(bounds[0])
    if top < 0:
        raise UnfittableDNIError(
            f"DNI {measured_dni_w_m2:.1f} W/m2 exceeds the aerosol-free ceiling "
            f"{top + measured_dni_w_m2:.1f} W/m2")
    bottom = excess(bounds[1])
    if bottom > 0:
        raise UnfittableDNIError(
            f"DNI {measured_dni_w_m2:.1f} W/m2 is below the floor "
            f"{bottom + measured_dni_w_m2:.1f} W/m2 at aod500={bounds[1]:g}")
    return float(brentq(excess, bounds[0], bounds[1], xtol=1e-12, rtol=rtol))


def fit_atmosphere(measured, measured_dni_w_m2, atm_prior, geom, iterations=6,
                   window_nm=WATER_BAND_NM):
    """Alternate the water-band and DNI fits until both settle.

    The water-band fit sees the aerosol level through the continuum, and the
    DNI fit sees the water through the broadband integral, so a few passes
    remove the dependence on the prior.
    """
    atm = atm_prior
    for _ in range(iterations):
        pw = fit_precipitable_water(measured, atm, geom, window_nm=window_nm)
        aod = fit_aod(measured_dni_w_m2, atm.with_(pw_cm=pw), geom)
        done = abs(pw - atm.pw_cm) < 1e-4 and abs(aod - atm.aod500) < 1e-5
        atm = atm.with_(pw_cm=pw, aod500=aod)
        if done:
            break
    return atm


def scale_for_clouds(spectrum, measured_dni_w_m2):
    """Scale a clear-sky spectrum so it integrates to the measured DNI."""
    if not measured_dni_w_m2 > 0:
        raise ParameterDomainError(f"measured DNI must be > 0, got {measured_dni_w_m2}")
    total = spectrum.dni
    if not total > 0:
        raise ParameterDomainError("spectrum integrates to zero; cannot rescale")
    return spectrum.scaled(measured_dni_w_m2 / total)


def am15d_reference(dni_w_m2=1000.0):
    """Reference direct spectrum at air mass 1.5 with the standard AM1.5D
    atmosphere (AOD500 0.084, PW 1.42 cm), scaled to ``dni_w_m2``."""
    s = direct_beam_spectrum(AtmosphericState(), SolarGeometry.from_airmass(1.5))
    return scale_for_clouds(s, dni_w_m2)


# --------------------------------------------------------------------------
# atmosphere table: one fitted state per row

ATMOSPHERE_COLUMNS = ("time", "rh_pct", "aod500", "pw_cm", "measured_dni_w_m2",
                      "modelled_dni_w_m2")


@dataclass(frozen=True)
class AtmosphereRow:
    """Fitted atmosphere at one time, with the DNI it was fitted against."""

    time: str
    rh_pct: float
    aod500: float
    pw_cm: float
    measured_dni_w_m2: float
    modelled_dni_w_m2: float


def atmosphere_table_text(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ATMOSPHERE_COLUMNS)
    for r in rows:
        w.writerow([r.time, f"{r.rh_pct:.1f}", f"{r.aod500:.4f}", f"{r.pw_cm:.3f}",
                    f"{r.measured_dni_w_m2:.1f}", f"{r.modelled_dni_w_m2:.1f}"])
    return buf.getvalue()


def read_atmosphere_table(path):
    """Rows of a ``time,rh_pct,aod500,pw_cm,measured_dni_w_m2,modelled_dni_w_m2`` file."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(h.strip() for h in next(reader, []))
        if header != ATMOSPHERE_COLUMNS:
            raise InputDataError(f"expected header {','.join(ATMOSPHERE_COLUMNS)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != len(ATMOSPHERE_COLUMNS):
                raise InputDataError(f"expected {len(ATMOSPHERE_COLUMNS)} fields", line=lineno)
            try:
                vals = [float(x) for x in row[1:]]
            except ValueError:
                raise InputDataError(f"cannot parse {row!r}", line=lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise InputDataError("non-finite value", line=lineno)
            rows.append(AtmosphereRow(row[0].strip(), *vals))
    return rows
