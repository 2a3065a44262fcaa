"""Cell junction temperatures from back-of-module sensor readings.

PT100 channels sit behind the cells, so the junctions run hotter than the
readings.  The difference is an empirical affine function of DNI, valid at
and above 600 W/m2.  Each cell takes the reading of its nearest channel
(shipped as ``data/channel_map.json``) plus that offset.
"""
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
import csv
import json
import math

import numpy as np

from .errors import ConfigurationError, InputDataError, OutOfValidityError

OFFSET_SLOPE_C_PER_W_M2 = 0.029
OFFSET_INTERCEPT_C = -17.0
OFFSET_MIN_DNI_W_M2 = 600.0
TEMP_RANGE_C = (-20.0, 120.0)
N_CELLS = 25


def offset_temperature(dni_w_m2, allow_below=False, slope=OFFSET_SLOPE_C_PER_W_M2,
                       intercept=OFFSET_INTERCEPT_C, min_dni=OFFSET_MIN_DNI_W_M2):
    """Junction-minus-sensor temperature offset [C] at a given DNI.

    Parameters
    ----------
    dni_w_m2 : float
    allow_below : bool
        Below ``min_dni`` the correlation is not valid.  By default that is an
        error; with this flag set the offset is taken as zero instead.

    Raises
    ------
    OutOfValidityError
        ``dni_w_m2 < min_dni`` and ``allow_below`` is false.
    """
    dni = float(dni_w_m2)
    if not math.isfinite(dni):
        raise OutOfValidityError(f"DNI must be finite, got {dni_w_m2!r}")
    if dni < min_dni:
        if allow_below:
            return 0.0
        raise OutOfValidityError(
            f"temperature offset fitted for DNI >= {min_dni:g} W/m2, got {dni:g}")
    return slope * dni + intercept


def load_channel_map(path=None):
    """Channel id -> tuple of cell indices, from JSON.

    Without ``path`` the bundled 13-channel nearest-sensor map is used.
    """
    if path is None:
        text = resources.files("cpvdiag.data").joinpath("channel_map.json").read_text()
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read channel map {path}: {exc}") from exc
    try:
        doc = json.loads(text)
        raw = doc["channel_to_cells"]
        return {int(ch): tuple(int(c) for c in cells) for ch, cells in raw.items()}
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise ConfigurationError(f"malformed channel map: {exc}") from exc


@dataclass(frozen=True)
class TemperatureMap:
    """Sensor readings plus the cells each channel stands for.

    Every cell index ``0..n_cells-1`` must belong to exactly one channel,
    and every mapped channel needs a reading.
    """

    channel_temps_c: dict
    channel_to_cells: dict = field(default_factory=load_channel_map)
    n_cells: int = N_CELLS

    def __post_init__(self):
        temps = {int(k): float(v) for k, v in self.channel_temps_c.items()}
        mapping = {int(k): tuple(int(c) for c in v) for k, v in self.channel_to_cells.items()}
        owner = {}
        for ch, cells in mapping.items():
            for c in cells:
                if not 0 <= c < self.n_cells:
                    raise ConfigurationError(f"channel {ch} maps to unknown cell {c}")
                if c in owner:
                    raise ConfigurationError(
                        f"cell {c} mapped to both channel {owner[c]} and channel {ch}")
                owner[c] = ch
        missing = sorted(set(range(self.n_cells)) - set(owner))
        if missing:
            raise ConfigurationError(f"cells {missing} are not mapped to any channel")
        unread = sorted(ch for ch in mapping if ch not in temps)
        if unread:
            raise ConfigurationError(f"no reading for channels {unread}")
        lo, hi = TEMP_RANGE_C
        for ch, t in temps.items():
            if not lo <= t <= hi:
                raise OutOfValidityError(
                    f"channel {ch} reads {t:g} C, outside {lo:g}..{hi:g} C")
        object.__setattr__(self, "channel_temps_c", temps)
        object.__setattr__(self, "channel_to_cells", mapping)

    @classmethod
    def uniform(cls, temp_c, channel_to_cells=None, n_cells=N_CELLS):
        mapping = channel_to_cells or load_channel_map()
        return cls({ch: temp_c for ch in mapping}, mapping, n_cells)

    def sensor_temps(self):
        """Raw reading assigned to each cell, shape (n_cells,)."""
        out = np.empty(self.n_cells)
        for ch, cells in self.channel_to_cells.items():
            out[list(cells)] = self.channel_temps_c[ch]
        return out

    def average_c(self):
        """Mean over the mapped channels."""
        return float(np.mean([self.channel_temps_c[ch] for ch in sorted(self.channel_to_cells)]))


def effective_cell_temps(tmap, dni_w_m2, allow_below=False):
    """Per-cell junction temperature: mapped reading plus the DNI offset."""
    return tmap.sensor_temps() + offset_temperature(dni_w_m2, allow_below)


def average_cell_temp(tmap, dni_w_m2, allow_below=False):
    """Single junction temperature for uniform-temperature simulation."""
    return tmap.average_c() + offset_temperature(dni_w_m2, allow_below)


# --------------------------------------------------------------------------
# weather / temperature log

WEATHER_FIELDS = ("timestamp", "dni_w_m2", "ambient_c", "rh_pct", "pressure_mb", "wind_mps")
OPTIONAL_FIELDS = ("aod500", "pw_cm", "power_w")


@dataclass(frozen=True)
class WeatherRecord:
    """One row of the weather and temperature log.

    ``aod500`` and ``pw_cm`` are optional columns; when absent they are
    ``None`` and the caller falls back to fitting or defaults.  ``power_w``
    is the optional measured module output.
    """

    timestamp: datetime
    dni_w_m2: float
    ambient_c: float
    rh_pct: float
    pressure_mb: float
    wind_mps: float
    channel_temps_c: dict
    aod500: float = None
    pw_cm: float = None
    power_w: float = None

    def temperature_map(self, channel_to_cells=None):
        mapping = channel_to_cells or load_channel_map()
        return TemperatureMap(self.channel_temps_c, mapping)


def parse_timestamp(text, default_tz=timezone.utc):
    """ISO-8601 timestamp; naive values are taken in ``default_tz``."""
    ts = datetime.fromisoformat(text.strip())
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=default_tz)
    return ts


def read_weather_log(path, default_tz=timezone.utc):
    """Parse a weather log CSV into time-ordered :class:`WeatherRecord` rows.

    The header must start with ``timestamp,dni_w_m2,ambient_c,rh_pct,
    pressure_mb,wind_mps`` followed by ``ch<N>_c`` channel columns and,
    optionally, ``aod500``, ``pw_cm`` and ``power_w``.

    Raises
    ------
    InputDataError
        With the offending line number, for a bad header, an unparsable or
        non-finite value, a negative DNI, or timestamps that go backwards.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputDataError(f"cannot read weather log {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        if tuple(header[:len(WEATHER_FIELDS)]) != WEATHER_FIELDS:
            raise InputDataError(
                f"header must start with {','.join(WEATHER_FIELDS)}", line=1)
        channels = {}
        optional = {}
        for col, name in enumerate(header[len(WEATHER_FIELDS):], start=len(WEATHER_FIELDS)):
            if name.startswith("ch") and name.endswith("_c") and name[2:-2].isdigit():
                channels[int(name[2:-2])] = col
            elif name in OPTIONAL_FIELDS:
                optional[name] = col
            else:
                raise InputDataError(f"unexpected column {name!r}", line=1)
        records = []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise InputDataError(f"expected {len(header)} fields, got {len(row)}", line=line)
            try:
                ts = parse_timestamp(row[0], default_tz)
                vals = [float(x) for x in row[1:len(WEATHER_FIELDS)]]
                chans = {ch: float(row[col]) for ch, col in channels.items()}
                opt = {k: float(row[col]) for k, col in optional.items() if row[col].strip()}
            except ValueError as exc:
                raise InputDataError(str(exc), line=line) from exc
            if not all(math.isfinite(v) for v in [*vals, *chans.values(), *opt.values()]):
                raise InputDataError("non-finite value", line=line)
            if vals[0] < 0:
                raise InputDataError(f"negative DNI {vals[0]:g}", line=line)
            if records and ts < records[-1].timestamp:
                raise InputDataError("timestamps out of order", line=line)
            records.append(WeatherRecord(ts, *vals, channel_temps_c=chans, **opt))
    return records


def weather_log_text(records):
    """CSV text that :func:`read_weather_log` reads back to ``records``.

    Channel columns follow the union of channel ids in ascending order;
    optional columns appear when any record carries them.
    """
    records = list(records)
    channels = sorted({ch for r in records for ch in r.channel_temps_c})
    optional = [k for k in OPTIONAL_FIELDS if any(getattr(r, k) is not None for r in records)]
    header = [*WEATHER_FIELDS, *(f"ch{ch}_c" for ch in channels), *optional]
    lines = [",".join(header)]

    def num(x):
        return "" if x is None else f"{x:.10g}"

    for r in records:
        vals = [r.timestamp.isoformat(), num(r.dni_w_m2), num(r.ambient_c), num(r.rh_pct),
                num(r.pressure_mb), num(r.wind_mps)]
        vals += [num(r.channel_temps_c.get(ch)) for ch in channels]
        vals += [num(getattr(r, k)) for k in optional]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
