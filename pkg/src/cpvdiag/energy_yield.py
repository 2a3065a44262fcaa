"""Daily energy yield with the fault model switched on or off.

Each timestep builds the clear-sky spectrum for its atmosphere, rescales it
to the measured DNI, converts sensor readings to junction temperatures and
takes the maximum power of the (seed-averaged) module curve.  Days are
integrated with the trapezoid rule over contiguous runs of samples; a gap
longer than ``max_gap`` is not bridged and marks the day partial.
"""
from dataclasses import dataclass, field
from datetime import datetime, timedelta
import csv
import io
import math

import numpy as np

from .conditions import AtmosphereDefaults, timestep_from_record
from .device import ensemble_iv, module_photocurrents
from .errors import CpvError, InputDataError, ParameterDomainError
from .geometry import Site
from .spectral import AtmosphericState, direct_beam_spectrum, scale_for_clouds
from .thermal import TemperatureMap, WeatherRecord, effective_cell_temps

MAX_GAP = timedelta(minutes=10)
DEFAULT_SEEDS = tuple(range(16))


def simulate_timestep(module, atm, geom, temps, fault_on, dni_w_m2=None,
                      seeds=DEFAULT_SEEDS):
    """Maximum power [W] of the module at one instant.

    Parameters
    ----------
    module : ModuleModel
        Carries the fault parameters; ``fault_on`` switches them.
    atm, geom : AtmosphericState, SolarGeometry
    temps : TemperatureMap or array_like
        Sensor readings (offset by DNI here) or junction temperatures
        already, per cell or scalar.
    dni_w_m2 : float, optional
        Measured DNI; the clear-sky spectrum is rescaled to it.  Without it
        the clear-sky spectrum is used as is.

    Errors from the inner models are re-raised with the timestamp added.
    """
    if (dni_w_m2 is not None and dni_w_m2 <= 0) or not geom.sun_up:
        return 0.0
    try:
        spectrum = direct_beam_spectrum(atm, geom)
        if dni_w_m2 is not None:
            spectrum = scale_for_clouds(spectrum, dni_w_m2)
        dni = spectrum.dni
        if isinstance(temps, TemperatureMap):
            cell_temps = effective_cell_temps(temps, dni, allow_below=True)
        else:
            cell_temps = np.asarray(temps, float)
            if cell_temps.ndim and cell_temps.shape != (module.n_cells,):
                raise ParameterDomainError(
                    f"need {module.n_cells} cell temperatures, got shape {cell_temps.shape}")
            cell_temps = np.broadcast_to(cell_temps, (module.n_cells,))
        model = module.with_fault(fault_on) if module.fault is not None else module
        if fault_on and module.fault is None:
            raise InputDataError("fault simulation requested but the module has no fault")
        curve = ensemble_iv(model, module_photocurrents(model, spectrum), cell_temps,
                            seeds=seeds)
    except CpvError as exc:
        if geom.timestamp is None:
            raise
        raise type(exc)(f"{geom.timestamp.isoformat()}: {exc}") from exc
    return max(curve.metrics.p_mp_w, 0.0)


def integrate_kwh(times, power_w, max_gap=MAX_GAP):
    """Trapezoid energy [kWh] over ordered samples, skipping long gaps.

    Returns ``(energy_kwh, partial)``; ``partial`` is true when some gap
    exceeded ``max_gap`` and was left out.
    """
    times = list(times)
    p = np.asarray(power_w, float)
    if len(times) != p.size:
        raise InputDataError("one power value is needed per timestamp")
    energy_wh = 0.0
    partial = False
    for k in range(1, len(times)):
        dt = times[k] - times[k - 1]
        if dt < timedelta(0):
            raise InputDataError(f"timestamps out of order at {times[k].isoformat()}")
        if dt > max_gap:
            partial = True
            continue
        energy_wh += 0.5 * (p[k] + p[k - 1]) * dt.total_seconds() / 3600.0
    return energy_wh / 1000.0, partial


@dataclass
class DayResult:
    """One simulated day.  Energies in kWh, DNI integrals in kWh/m2."""

    date: object
    n_steps: int
    measured_dni_kwh_m2: float
    modelled_dni_kwh_m2: float
    partial: bool
    clear: bool = True
    measured_yield_kwh: float = None
    modelled_yield_fault_kwh: float = None
    modelled_yield_healthy_kwh: float = None
    power_fault_w: list = field(default=None, repr=False)
    power_healthy_w: list = field(default=None, repr=False)

    @property
    def ratio(self):
        f, h = self.modelled_yield_fault_kwh, self.modelled_yield_healthy_kwh
        if f is None or h is None or f <= 0:
            return None
        return h / f


def simulate_day(steps, module, fault_on, seeds=DEFAULT_SEEDS, max_gap=MAX_GAP):
    """Daily energy [kWh] and the per-step power [W].

    Returns ``(energy_kwh, partial, powers)``.

    Raises
    ------
    InputDataError
        ``steps`` not in time order.
    """
    steps = list(steps)
    for a, b in zip(steps, steps[1:]):
        if b.timestamp < a.timestamp:
            raise InputDataError(f"timesteps out of order at {b.timestamp.isoformat()}")
    powers = [simulate_timestep(module, s.atm, s.geom, s.temps, fault_on, s.dni_w_m2, seeds)
              for s in steps]
    energy, partial = integrate_kwh([s.timestamp for s in steps], powers, max_gap)
    return energy, partial, powers


# --------------------------------------------------------------------------
# from weather logs

def local_date(ts, site):
    return ts.astimezone(site.tz).date()


def group_by_day(records, site=Site()):
    """Records split into local calendar days, in order."""
    days = {}
    for rec in records:
        days.setdefault(local_date(rec.timestamp, site), []).append(rec)
    return days


@dataclass(frozen=True)
class ClearDayRule:
    """Clear-day heuristic: enough daily DNI and no deep midday dips.

    A day is clear when its DNI integral reaches ``min_daily_dni_kwh_m2``
    and no sample with the sun within ``midday_zenith_deg`` of the zenith
    falls below ``min_midday_dni_w_m2``.
    """

    min_daily_dni_kwh_m2: float = 4.5
    min_midday_dni_w_m2: float = 500.0
    midday_zenith_deg: float = 60.0

    def is_clear(self, steps, daily_dni_kwh_m2):
        if daily_dni_kwh_m2 < self.min_daily_dni_kwh_m2:
            return False
        return all(s.dni_w_m2 >= self.min_midday_dni_w_m2 for s in steps
                   if s.geom.zenith_deg < self.midday_zenith_deg)


def simulate_days(records, module, fault="both", site=Site(), defaults=AtmosphereDefaults(),
                  seeds=DEFAULT_SEEDS, max_gap=MAX_GAP, rule=ClearDayRule(),
                  channel_to_cells=None):
    """One :class:`DayResult` per local day of a weather log.

    ``fault`` is ``"on"``, ``"off"`` or ``"both"``.  The measured yield is
    filled from a logged ``power_w`` column when the log carries one.
    """
    if fault not in ("on", "off", "both"):
        raise InputDataError(f"fault must be on, off or both, got {fault!r}")
    results = []
    for date, recs in group_by_day(records, site).items():
        steps = [timestep_from_record(r, site, defaults, channel_to_cells) for r in recs]
        times = [s.timestamp for s in steps]
        measured_dni, partial = integrate_kwh(times, [s.dni_w_m2 for s in steps], max_gap)
        clear_sky = [direct_beam_spectrum(s.atm, s.geom).dni if s.geom.sun_up else 0.0
                     for s in steps]
        modelled_dni, _ = integrate_kwh(times, clear_sky, max_gap)
        day = DayResult(date, len(steps), measured_dni, modelled_dni, partial,
                        rule.is_clear(steps, measured_dni))
        logged = [r.power_w for r in recs]
        if all(p is not None for p in logged):
            day.measured_yield_kwh = integrate_kwh(times, logged, max_gap)[0]
        if fault in ("on", "both"):
            day.modelled_yield_fault_kwh, _, day.power_fault_w = simulate_day(
                steps, module, True, seeds, max_gap)
        if fault in ("off", "both"):
            day.modelled_yield_healthy_kwh, _, day.power_healthy_w = simulate_day(
                steps, module, False, seeds, max_gap)
        results.append(day)
    return results


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


YIELD_COLUMNS = ("period", "days", "partial", "clear", "measured_dni_kwh_m2",
                 "modelled_dni_kwh_m2", "measured_yield_kwh", "modelled_yield_fault_kwh",
                 "modelled_yield_healthy_kwh", "healthy_to_fault_ratio")


def monthly_averages(days):
    """Per-month means over clear, complete days: ``{"YYYY-MM": DayResult}``."""
    months = {}
    for d in days:
        if d.clear and not d.partial:
            months.setdefault(f"{d.date.year:04d}-{d.date.month:02d}", []).append(d)
    out = {}
    for key, ds in months.items():
        out[key] = DayResult(
            key, len(ds),
            _mean(d.measured_dni_kwh_m2 for d in ds),
            _mean(d.modelled_dni_kwh_m2 for d in ds), False, True,
            _mean(d.measured_yield_kwh for d in ds),
            _mean(d.modelled_yield_fault_kwh for d in ds),
            _mean(d.modelled_yield_healthy_kwh for d in ds))
    return out


def yield_table_csv(days):
    """Daily rows followed by monthly clear-day averages.

    Partial and cloudy days are listed but left out of the averages.
    """
    def fmt(x):
        if x is None:
            return ""
        if isinstance(x, bool):
            return "yes" if x else "no"
        if isinstance(x, float):
            return f"{x:.4f}"
        return str(x)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(YIELD_COLUMNS)
    rows = [(d.date.isoformat(), 1, d) for d in days]
    rows += [(key, m.n_steps, m) for key, m in sorted(monthly_averages(days).items())]
    for period, n, d in rows:
        w.writerow([period, n, fmt(d.partial), fmt(d.clear), fmt(d.measured_dni_kwh_m2),
                    fmt(d.modelled_dni_kwh_m2), fmt(d.measured_yield_kwh),
                    fmt(d.modelled_yield_fault_kwh), fmt(d.modelled_yield_healthy_kwh),
                    fmt(d.ratio)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# synthesised January clear day

# Hourly spectrum-fit results for a clear January day at the test site:
# (local hour, RH %, AOD500, PW cm, measured DNI W/m2).
JANUARY_HOURLY = (
    (9, 81, 0.08, 2.7, 825),
    (10, 67, 0.1, 2.57, 880),
    (11, 45, 0.075, 2.01, 960),
    (12, 43, 0.176, 2.11, 912),
    (13, 35, 0.164, 1.906, 898),
    (14, 33, 0.1811, 1.88, 856),
    (15, 30, 0.125, 1.74, 858),
    (16, 33, 0.153, 1.9, 726),
)
# Back-of-module channel readings at 13:00 on that day.
JANUARY_13H_CHANNELS_C = {1: 69.6, 2: 74.8, 3: 73.3, 4: 77.4, 5: 79.0, 6: 69.2, 7: 78.0,
                          8: 73.5, 9: 70.0, 10: 73.0, 11: 72.3, 12: 64.8, 13: 74.4}
JANUARY_PRESSURE_MB = 910.0


def january_ambient_c(hour):
    """Diurnal ambient temperature: 15 C before dawn to 28 C mid-afternoon."""
    return 21.5 + 6.5 * math.cos(2.0 * math.pi * (hour - 14.5) / 24.0)


def synthesize_clear_day(site=Site(), date=(2014, 1, 7), step_min=10, start_h=9.0, end_h=16.0,
                         hourly=JANUARY_HOURLY, channels_13h=JANUARY_13H_CHANNELS_C,
                         pressure_mb=JANUARY_PRESSURE_MB):
    """Weather records for a clear day built from hourly spectrum fits.

    RH, AOD and PW are interpolated linearly between the hourly rows and
    held flat outside them.  DNI is the clear-sky model value times the
    measured/modelled ratio interpolated the same way, so the hourly
    samples reproduce the measured DNI.  Channel readings rise above
    ambient in proportion to DNI, scaled from the 13:00 readings.

    The default window spans the hourly rows; its trapezoid DNI integral
    equals the logged clear-day DNI total for the month.
    """
    hours = np.array([r[0] for r in hourly], float)
    rh, aod, pw, dni_meas = (np.array([r[k] for r in hourly], float) for k in (1, 2, 3, 4))

    def atm_at(h):
        return AtmosphericState(aod500=float(np.interp(h, hours, aod)),
                                pw_cm=float(np.interp(h, hours, pw)), pressure_mb=pressure_mb,
                                relative_humidity_pct=float(np.interp(h, hours, rh)),
                                ambient_temp_c=january_ambient_c(h))

    t0 = datetime(*date, tzinfo=site.tz)

    def clear_dni(h):
        geom = site.geometry(t0 + timedelta(hours=h))
        return direct_beam_spectrum(atm_at(h), geom).dni if geom.sun_up else 0.0

    ratio = dni_meas / np.array([clear_dni(h) for h in hours])
    ref_h = 13.0
    ref_dni = float(np.interp(ref_h, hours, dni_meas))
    rise = {ch: t - january_ambient_c(ref_h) for ch, t in channels_13h.items()}

    records = []
    n = int(round((end_h - start_h) * 60 / step_min))
    for k in range(n + 1):
        h = start_h + k * step_min / 60.0
        atm = atm_at(h)
        dni = round(clear_dni(h) * float(np.interp(h, hours, ratio)), 2)
        amb = january_ambient_c(h)
        chans = {ch: round(amb + r * dni / ref_dni, 2) for ch, r in rise.items()}
        records.append(WeatherRecord(
            t0 + timedelta(hours=h), dni, round(amb, 2), round(atm.relative_humidity_pct, 2),
            pressure_mb, 1.0, chans, aod500=round(atm.aod500, 5), pw_cm=round(atm.pw_cm, 5)))
    return records
