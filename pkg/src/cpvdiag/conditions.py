"""Operating conditions of one logged instant.

Turns a weather-log row into the inputs of the device model: the direct
spectrum (clear-sky shape rescaled to the logged DNI), the sun position
and the sensor temperature map.
"""
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .errors import UnfittableDNIError
from .geometry import Site
from .spectral import AtmosphericState, direct_beam_spectrum, fit_aod, scale_for_clouds
from .thermal import TemperatureMap, effective_cell_temps, load_channel_map


@dataclass(frozen=True)
class AtmosphereDefaults:
    """Values used when the log lacks aerosol or water columns."""

    aod500: float = 0.084
    pw_cm: float = 1.42
    angstrom_alpha: float = 1.14
    ozone_atm_cm: float = 0.30


@dataclass(frozen=True)
class Timestep:
    """Conditions at one instant: measured DNI plus what shapes the spectrum."""

    timestamp: datetime
    dni_w_m2: float
    atm: AtmosphericState
    geom: object
    temps: object

    def spectrum(self):
        """Clear-sky spectrum rescaled to the logged DNI."""
        return scale_for_clouds(direct_beam_spectrum(self.atm, self.geom), self.dni_w_m2)

    def cell_temps(self, n_cells, allow_below=True):
        """Junction temperature per cell."""
        if isinstance(self.temps, TemperatureMap):
            return effective_cell_temps(self.temps, self.dni_w_m2, allow_below)
        return np.broadcast_to(np.asarray(self.temps, float), (n_cells,)).copy()


def timestep_from_record(rec, site=Site(), defaults=AtmosphereDefaults(),
                         channel_to_cells=None):
    """Conditions for one log row.

    Logged AOD and PW are used when present.  Otherwise PW takes its
    default and AOD is fitted so the clear-sky spectrum reproduces the
    logged DNI; when no AOD can (clouds, or DNI above the aerosol-free
    ceiling) the default AOD is kept and the spectrum is rescaled.
    """
    geom = site.geometry(rec.timestamp)
    atm = AtmosphericState(
        aod500=defaults.aod500 if rec.aod500 is None else rec.aod500,
        pw_cm=defaults.pw_cm if rec.pw_cm is None else rec.pw_cm,
        angstrom_alpha=defaults.angstrom_alpha, ozone_atm_cm=defaults.ozone_atm_cm,
        pressure_mb=rec.pressure_mb, ambient_temp_c=rec.ambient_c,
        relative_humidity_pct=rec.rh_pct)
    if rec.aod500 is None and geom.sun_up and rec.dni_w_m2 > 0:
        try:
            atm = atm.with_(aod500=fit_aod(rec.dni_w_m2, atm, geom))
        except UnfittableDNIError:
            pass
    tmap = TemperatureMap(rec.channel_temps_c, channel_to_cells or load_channel_map())
    return Timestep(rec.timestamp, rec.dni_w_m2, atm, geom, tmap)
