"""Bundled example inputs, regenerated deterministically from the models.

``write_fixtures(directory)`` rebuilds everything shipped under
``cpvdiag/data/fixtures``:

* ``jan07_weather.csv``: a synthesised clear January day, 10-minute steps;
* ``jan07_atmosphere.csv``: the hourly spectrum-fit results for that day;
* ``jan07_1100_spectrum.csv``: a spectrometer-style 350-1050 nm spectrum at
  11:00 from the clear-sky model, with the hourly PW and the AOD that makes
  the model reproduce the logged DNI;
* ``iv_fault/`` and ``iv_healthy/``: module curves at 11:00 and 13:00 with
  the fault switched on and off.
"""
from importlib import resources
from pathlib import Path

import numpy as np

from .conditions import timestep_from_record
from .device import IVCurve, ensemble_iv, reference_module
from .diagnosis import Condition
from .energy_yield import JANUARY_HOURLY, synthesize_clear_day
from .geometry import Site
from .spectral import AtmosphereRow, atmosphere_table_text, direct_beam_spectrum, fit_aod
from .thermal import weather_log_text

# modelled DNI reported next to each hourly fit (W/m2)
JANUARY_MODELLED_DNI = (820, 882, 964, 914, 895, 864, 857, 727)
FAULT_SIGMA = 0.23
FAULT_DELTA_RS_OHM = 0.0664
IV_HOURS = (11, 13)
SEEDS = tuple(range(16))


def fixture_path(name):
    """Path of a bundled fixture file or directory."""
    return Path(str(resources.files("cpvdiag.data").joinpath("fixtures", name)))


def atmosphere_rows():
    return [AtmosphereRow(f"{h}:00", rh, aod, pw, dni, mod)
            for (h, rh, aod, pw, dni), mod in zip(JANUARY_HOURLY, JANUARY_MODELLED_DNI)]


def build_fixtures(site=Site()):
    """``{relative path: text}`` of every fixture."""
    records = synthesize_clear_day(site)
    files = {"jan07_weather.csv": weather_log_text(records),
             "jan07_atmosphere.csv": atmosphere_table_text(atmosphere_rows())}

    at = {r.timestamp.astimezone(site.tz).strftime("%H:%M"): r for r in records}
    step = timestep_from_record(at["11:00"], site)
    atm = step.atm.with_(aod500=fit_aod(step.dni_w_m2, step.atm, step.geom))
    clear = direct_beam_spectrum(atm, step.geom)
    files["jan07_1100_spectrum.csv"] = clear.resample(np.arange(350.0, 1051.0, 1.0)).csv_text()

    module = reference_module().with_fault(False, mismatch_sigma=FAULT_SIGMA,
                                           delta_rs_ohm=FAULT_DELTA_RS_OHM)
    for hour in IV_HOURS:
        rec = at[f"{hour}:00"]
        cond = Condition.from_timestep(module, timestep_from_record(rec, site))
        for on, folder in ((True, "iv_fault"), (False, "iv_healthy")):
            c = ensemble_iv(module.with_fault(on), cond.photocurrents, cond.temps_c, seeds=SEEDS)
            curve = IVCurve(c.voltage_v, c.current_a, timestamp=rec.timestamp)
            files[f"{folder}/jan07_{hour:02d}00.csv"] = curve.csv_text()
    return files


def write_fixtures(directory, site=Site()):
    out = Path(directory)
    for name, text in build_fixtures(site).items():
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


if __name__ == "__main__":
    write_fixtures(fixture_path(""))
