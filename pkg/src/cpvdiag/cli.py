"""Command-line entry point.

Commands::

    cpvdiag fit-spectrum SPECTRUM_CSV WEATHER_CSV --timestamp TS
    cpvdiag simulate WEATHER_CSV [--timestamp TS] [--fault on|off|both]
    cpvdiag diagnose IV_GLOB WEATHER_CSV
    cpvdiag yield WEATHER_CSV [--fault on|off|both]
    cpvdiag report DIR

Settings come from built-in defaults, then a JSON ``--config`` file, then
``CPVDIAG_*`` environment variables, then command-line flags.  Every
command computes all of its outputs before writing any file.

Exit codes: 0 healthy / success, 1 fault found, 2 invalid input,
3 insufficient data.
"""
from dataclasses import dataclass, field, fields, replace
from datetime import timedelta
import argparse
import csv
import glob
import json
import logging
import os
from pathlib import Path
import sys

from . import __version__
from .conditions import AtmosphereDefaults, timestep_from_record
from .device import IVCurve, ModuleModel, ensemble_iv, module_photocurrents, reference_module
from .diagnosis import Condition, DiagnosisSettings, diagnose
from .energy_yield import ClearDayRule, simulate_days, yield_table_csv
from .errors import (
    ConfigurationError,
    CpvError,
    DiagnosisInfeasible,
    InputDataError,
    InsufficientDataError,
)
from .geometry import Site
from .spectral import (
    AtmosphereRow,
    AtmosphericState,
    Spectrum,
    atmosphere_table_text,
    direct_beam_spectrum,
    fit_atmosphere,
)
from .thermal import load_channel_map, parse_timestamp, read_weather_log

log = logging.getLogger("cpvdiag")

EXIT_OK, EXIT_FAULT, EXIT_INVALID, EXIT_INSUFFICIENT = 0, 1, 2, 3
ENV_PREFIX = "CPVDIAG_"
# the default fault injected by `simulate` and `yield` when the module file has none
DEFAULT_FAULT_SIGMA = 0.23
DEFAULT_FAULT_DELTA_RS_OHM = 0.0664


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs besides its positional inputs."""

    site: Site = field(default_factory=Site)
    module_file: str = None
    channel_map_file: str = None
    ff_threshold: float = 0.75
    imp_rtol: float = 0.01
    vmp_rtol: float = 0.05
    sigma_bounds: tuple = (0.0, 0.6)
    rs_bounds_ohm: tuple = (0.0, 1.0)
    rs_floor_ohm: float = 0.01
    seed: int = 0
    n_seeds: int = 16
    fault_sigma: float = DEFAULT_FAULT_SIGMA
    fault_delta_rs_ohm: float = DEFAULT_FAULT_DELTA_RS_OHM
    sigma_is_variance: bool = False
    atmosphere: AtmosphereDefaults = field(default_factory=AtmosphereDefaults)
    clear_day: ClearDayRule = field(default_factory=ClearDayRule)
    max_gap_min: float = 10.0
    match_tolerance_s: float = 300.0
    out: str = "cpvdiag-out"

    def validate(self):
        if not 0 < self.ff_threshold < 1:
            raise ConfigurationError(f"ff_threshold must lie in (0, 1), got {self.ff_threshold}")
        for name in ("imp_rtol", "vmp_rtol"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in (0, 1)")
        for name in ("sigma_bounds", "rs_bounds_ohm"):
            lo, hi = getattr(self, name)
            if not 0 <= lo < hi:
                raise ConfigurationError(f"{name} must satisfy 0 <= low < high")
        if self.n_seeds < 16:
            raise ConfigurationError("n_seeds must be at least 16")
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")
        if self.fault_sigma < 0 or self.fault_delta_rs_ohm < 0 or self.rs_floor_ohm < 0:
            raise ConfigurationError("fault parameters and floors must be >= 0")
        if self.max_gap_min <= 0 or self.match_tolerance_s < 0:
            raise ConfigurationError("max_gap_min must be > 0 and match_tolerance_s >= 0")
        for name in ("module_file", "channel_map_file"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigurationError(f"{name} {path} does not exist")
        return self

    @property
    def seeds(self):
        return tuple(range(self.seed, self.seed + self.n_seeds))

    def diagnosis_settings(self):
        return DiagnosisSettings(
            ff_threshold=self.ff_threshold, imp_rtol=self.imp_rtol, vmp_rtol=self.vmp_rtol,
            sigma_bounds=tuple(self.sigma_bounds), rs_bounds_ohm=tuple(self.rs_bounds_ohm),
            seeds=self.seeds, rs_floor_ohm=self.rs_floor_ohm)

    def channel_map(self):
        return load_channel_map(self.channel_map_file)

    def module(self):
        """Calibrated module with a fault attached (enabled only on request)."""
        if self.module_file is None:
            module = reference_module()
        else:
            try:
                module = ModuleModel.load(self.module_file)
            except (OSError, ValueError, KeyError, TypeError) as exc:
                raise ConfigurationError(f"cannot load module file: {exc}") from exc
        module = replace(module, sigma_is_variance=self.sigma_is_variance)
        if module.fault is None:
            module = module.with_fault(False, mismatch_sigma=self.fault_sigma,
                                       delta_rs_ohm=self.fault_delta_rs_ohm)
        return module


_NESTED = {"site": Site, "atmosphere": AtmosphereDefaults, "clear_day": ClearDayRule}


def config_from_dict(doc, base=RunConfig(), relative_to=None):
    """Overlay a config document on ``base``; unknown keys are errors."""
    known = {f.name for f in fields(RunConfig)}
    changes = {}
    for key, value in doc.items():
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r}")
        if key in _NESTED:
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {key!r} must be an object")
            try:
                value = replace(getattr(base, key), **value)
            except TypeError as exc:
                raise ConfigurationError(f"bad {key} settings: {exc}") from exc
        elif key in ("module_file", "channel_map_file", "out") and value is not None:
            if relative_to is not None and not Path(value).is_absolute():
                value = str(Path(relative_to) / value)
        elif key in ("sigma_bounds", "rs_bounds_ohm"):
            value = tuple(float(v) for v in value)
        changes[key] = value
    return replace(base, **changes)


def _env_overrides(environ):
    """Settings from ``CPVDIAG_<NAME>`` variables, converted to field types."""
    out = {}
    casts = {"seed": int, "n_seeds": int, "ff_threshold": float, "out": str,
             "module_file": str, "channel_map_file": str, "fault_sigma": float,
             "fault_delta_rs_ohm": float, "vmp_rtol": float, "imp_rtol": float}
    for name, cast in casts.items():
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw is None:
            continue
        try:
            out[name] = cast(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{ENV_PREFIX}{name.upper()}={raw!r}: {exc}") from exc
    return out


def load_config(args, environ=None):
    """Defaults < config file < environment < flags."""
    environ = os.environ if environ is None else environ
    cfg = RunConfig()
    path = args.config or environ.get(ENV_PREFIX + "CONFIG")
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError("config file must hold a JSON object")
        cfg = config_from_dict(doc, cfg, relative_to=Path(path).parent)
    cfg = replace(cfg, **_env_overrides(environ))
    flags = {"seed": args.seed, "ff_threshold": args.ff_threshold, "out": args.out}
    cfg = replace(cfg, **{k: v for k, v in flags.items() if v is not None})
    return cfg.validate()


# --------------------------------------------------------------------------
# helpers

def _fault_modes(args, environ=None):
    environ = os.environ if environ is None else environ
    mode = args.fault or environ.get(ENV_PREFIX + "FAULT") or "both"
    if mode not in ("on", "off", "both"):
        raise ConfigurationError(f"--fault must be on, off or both, got {mode!r}")
    return mode


def _read_weather(path, cfg):
    return read_weather_log(path, default_tz=cfg.site.tz)


def _match_record(records, when, tolerance_s):
    """Weather row nearest ``when``, or None beyond the tolerance."""
    best = min(records, key=lambda r: abs((r.timestamp - when).total_seconds()), default=None)
    if best is None or abs((best.timestamp - when).total_seconds()) > tolerance_s:
        return None
    return best


def _stamp(ts):
    return ts.strftime("%Y%m%dT%H%M%S")


def _write_outputs(out_dir, files):
    """Write ``{relative name: text}`` under ``out_dir``."""
    out = Path(out_dir)
    for name, text in files.items():
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return [str(out / name) for name in files]


def _metrics_csv(rows):
    cols = ("timestamp", "mode", "isc_a", "voc_v", "i_mp_a", "v_mp_v", "p_mp_w",
            "fill_factor", "g_voc_siemens")
    lines = [",".join(cols)]
    for ts, mode, m in rows:
        lines.append(f"{ts},{mode},{m.isc_a:.6f},{m.voc_v:.4f},{m.i_mp_a:.6f},{m.v_mp_v:.4f},"
                     f"{m.p_mp_w:.4f},{m.fill_factor:.6f},{m.g_voc_siemens:.6f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# commands

def cmd_fit_spectrum(args, cfg):
    """Fit PW and AOD at one logged instant; write the fitted row and spectrum."""
    from . import plotting

    spectrum = Spectrum.from_csv(args.spectrum)
    records = _read_weather(args.weather, cfg)
    when = parse_timestamp(args.timestamp, cfg.site.tz)
    rec = _match_record(records, when, cfg.match_tolerance_s)
    if rec is None:
        raise InsufficientDataError(f"no weather row within {cfg.match_tolerance_s:g} s "
                                    f"of {when.isoformat()}")
    geom = cfg.site.geometry(rec.timestamp)
    d = cfg.atmosphere
    prior = AtmosphericState(aod500=d.aod500, pw_cm=d.pw_cm, angstrom_alpha=d.angstrom_alpha,
                             ozone_atm_cm=d.ozone_atm_cm, pressure_mb=rec.pressure_mb,
                             ambient_temp_c=rec.ambient_c, relative_humidity_pct=rec.rh_pct)
    atm = fit_atmosphere(spectrum, rec.dni_w_m2, prior, geom)
    modelled = direct_beam_spectrum(atm, geom)
    local = rec.timestamp.astimezone(cfg.site.tz)
    row = AtmosphereRow(local.strftime("%H:%M"), rec.rh_pct, atm.aod500, atm.pw_cm,
                        rec.dni_w_m2, modelled.dni)
    lo, hi = spectrum.wavelengths_nm[0], spectrum.wavelengths_nm[-1]
    shown = modelled.resample(modelled.wavelengths_nm[(modelled.wavelengths_nm >= lo)
                                                     & (modelled.wavelengths_nm <= hi)])
    svg = plotting.line_chart(
        [("measured", spectrum.wavelengths_nm, spectrum.irradiance_w_m2_nm),
         ("modelled", shown.wavelengths_nm, shown.irradiance_w_m2_nm)],
        "wavelength (nm)", "irradiance (W m-2 nm-1)", f"spectrum fit {local.isoformat()}")
    files = {"atmosphere.csv": atmosphere_table_text([row]),
             "modelled_spectrum.csv": modelled.csv_text(),
             "spectrum_fit.svg": svg}
    _write_outputs(cfg.out, files)
    print(f"{row.time} aod500={row.aod500:.4f} pw_cm={row.pw_cm:.3f} "
          f"dni measured={row.measured_dni_w_m2:.1f} modelled={row.modelled_dni_w_m2:.1f}")
    return EXIT_OK


def cmd_simulate(args, cfg):
    """IV curves of the module at logged instants, fault on and/or off."""
    from . import plotting

    mode = _fault_modes(args)
    records = _read_weather(args.weather, cfg)
    if args.timestamp:
        rec = _match_record(records, parse_timestamp(args.timestamp, cfg.site.tz),
                            cfg.match_tolerance_s)
        records = [] if rec is None else [rec]
    module = cfg.module()
    cmap = cfg.channel_map()
    steps = [timestep_from_record(r, cfg.site, cfg.atmosphere, cmap) for r in records]
    steps = [s for s in steps if s.dni_w_m2 > 0 and s.geom.sun_up]
    if not steps:
        raise InsufficientDataError("no logged instant with the sun up and DNI > 0")
    modes = {"on": [True], "off": [False], "both": [True, False]}[mode]
    files, rows, series = {}, [], []
    for step in steps:
        spectrum = step.spectrum()
        il = module_photocurrents(module, spectrum)
        temps = step.cell_temps(module.n_cells, allow_below=True)
        for on in modes:
            tag = "fault" if on else "healthy"
            curve = ensemble_iv(module.with_fault(on), il, temps, seeds=cfg.seeds)
            curve = IVCurve(curve.voltage_v, curve.current_a, timestamp=step.timestamp)
            files[f"iv/{_stamp(step.timestamp)}_{tag}.csv"] = curve.csv_text()
            rows.append((step.timestamp.isoformat(), tag, curve.metrics))
            keep = curve.voltage_v >= 0
            series.append((f"{step.timestamp.strftime('%H:%M')} {tag}",
                           curve.voltage_v[keep], curve.current_a[keep]))
    files["metrics.csv"] = _metrics_csv(rows)
    files["iv.svg"] = plotting.line_chart(series, "voltage (V)", "current (A)",
                                          "simulated IV curves", ylim=(0, None))
    _write_outputs(cfg.out, files)
    for ts, tag, m in rows:
        print(f"{ts} {tag}: P_MP={m.p_mp_w:.2f} W FF={m.fill_factor:.4f}")
    return EXIT_OK


def load_measured_set(paths, records, module, cfg):
    """Pair IV files with weather rows; unusable files are logged and skipped."""
    cmap = cfg.channel_map()
    pairs = []
    for path in paths:
        try:
            curve = IVCurve.from_csv(path)
            if curve.timestamp is None:
                raise InputDataError("no '# timestamp:' line")
            rec = _match_record(records, curve.timestamp, cfg.match_tolerance_s)
            if rec is None:
                raise InputDataError(f"no weather row near {curve.timestamp.isoformat()}")
            step = timestep_from_record(rec, cfg.site, cfg.atmosphere, cmap)
            cond = Condition.from_timestep(module, step, label=curve.timestamp.isoformat())
        except (CpvError, OSError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        pairs.append((curve.timestamp, str(path), curve, cond))
    pairs.sort(key=lambda p: (p[0], p[1]))
    return [(curve, cond) for _, _, curve, cond in pairs]


def _diagnosis_files(report):
    from . import plotting

    files = {"report.json": report.to_json(),
             "histogram.csv": report.histogram_csv(),
             "overlay.csv": report.overlay_csv()}
    files.update(_render_diagnosis_svgs(report.overlay_csv(), report.histogram_csv(),
                                        report.limiting_subcell, plotting))
    return files


def _render_diagnosis_svgs(overlay_text, histogram_text, subcell, plotting):
    series = {}
    for row in csv.DictReader(overlay_text.splitlines()):
        s = series.setdefault(row["label"], ([], [], []))
        s[0].append(float(row["voltage_v"]))
        s[1].append(float(row["measured_current_a"]))
        s[2].append(float(row["fitted_current_a"]))
    lines = []
    for label, (v, im, ifit) in series.items():
        lines.append((f"{label} measured", v, im))
        lines.append((f"{label} fitted", v, ifit))
    bins = [(float(r["bin_low_a"]), float(r["bin_high_a"]), int(r["count"]))
            for r in csv.DictReader(histogram_text.splitlines())]
    out = {}
    if lines:
        out["iv_overlay.svg"] = plotting.line_chart(lines, "voltage (V)", "current (A)",
                                                    "measured vs fitted", xlim=(0, None),
                                                    ylim=(0, None))
    if bins:
        out["histogram.svg"] = plotting.histogram_chart(
            bins, f"subcell {subcell} photocurrent (A)", "limiting-subcell currents")
    return out


def cmd_diagnose(args, cfg):
    """Fault diagnosis from measured IV curves; exit 1 when a fault is found."""
    paths = sorted(glob.glob(args.iv_glob))
    if not paths:
        raise InsufficientDataError(f"no IV files match {args.iv_glob!r}")
    records = _read_weather(args.weather, cfg)
    module = cfg.module()
    baseline = module.with_fault(False)
    measured = load_measured_set(paths, records, baseline, cfg)
    if not measured:
        raise InsufficientDataError("no usable IV file")
    report = diagnose(measured, baseline, cfg.diagnosis_settings())
    _write_outputs(cfg.out, _diagnosis_files(report))
    print(f"classification={report.classification} sigma={report.sigma:.4f} "
          f"delta_rs_ohm={report.delta_rs_ohm:.4f} triggered={report.triggered}")
    return EXIT_OK if report.classification == "none" else EXIT_FAULT


def cmd_yield(args, cfg):
    """Daily and monthly clear-day yields with the fault on and/or off."""
    from . import plotting

    mode = _fault_modes(args)
    records = _read_weather(args.weather, cfg)
    if not records:
        raise InsufficientDataError("the weather log holds no rows")
    days = simulate_days(records, cfg.module(), mode, cfg.site, cfg.atmosphere, cfg.seeds,
                         timedelta(minutes=cfg.max_gap_min), cfg.clear_day, cfg.channel_map())
    files = {"yield.csv": yield_table_csv(days)}
    groups = {}
    if mode in ("on", "both"):
        groups["with fault"] = [d.modelled_yield_fault_kwh for d in days]
    if mode in ("off", "both"):
        groups["without fault"] = [d.modelled_yield_healthy_kwh for d in days]
    files["yield.svg"] = plotting.bar_chart([d.date.isoformat() for d in days], groups,
                                            "energy (kWh/day)", "daily yield")
    by_day = {}
    for r in records:
        by_day.setdefault(r.timestamp.astimezone(cfg.site.tz).date(), []).append(r)
    for d in days:
        hours = [(r.timestamp.astimezone(cfg.site.tz).hour
                  + r.timestamp.astimezone(cfg.site.tz).minute / 60.0) for r in by_day[d.date]]
        series = []
        if d.power_fault_w is not None:
            series.append(("with fault", hours, d.power_fault_w))
        if d.power_healthy_w is not None:
            series.append(("without fault", hours, d.power_healthy_w))
        files[f"power_{d.date.isoformat()}.svg"] = plotting.line_chart(
            series, "local time (h)", "power (W)", f"modelled power {d.date.isoformat()}")
    _write_outputs(cfg.out, files)
    sys.stdout.write(files["yield.csv"])
    return EXIT_OK


def cmd_report(args, cfg):
    """Summarise and re-plot the artifacts found in a previous output directory."""
    from . import plotting

    src = Path(args.directory)
    lines, files = [], {}
    status = EXIT_OK
    report_path = src / "report.json"
    if report_path.is_file():
        try:
            rep = json.loads(report_path.read_text())
            lines.append(f"diagnosis: {rep['classification']}")
            lines.append(f"  fitted sigma: {rep['fitted_sigma']:.4f}")
            lines.append(f"  fitted delta Rs: {rep['fitted_delta_rs_ohm']:.4f} ohm")
            for c in rep["curves"]:
                state = "converged" if c["converged"] else (c["error"] or "not triggered")
                lines.append(f"  {c['label']}: FF {c['fill_factor']:.4f}, {state}")
            g = rep.get("gvoc_siemens") or {}
            if g:
                lines.append(f"  g_voc measured {g['measured']:.3f} S, fitted fault "
                             f"{g['fitted_fault']:.3f} S, healthy {g['healthy']:.3f} S")
        except (ValueError, KeyError, TypeError) as exc:
            raise InputDataError(f"{report_path}: malformed report: {exc}") from exc
        if rep["classification"] != "none":
            status = EXIT_FAULT
        overlay, hist = src / "overlay.csv", src / "histogram.csv"
        if overlay.is_file() and hist.is_file():
            files.update(_render_diagnosis_svgs(overlay.read_text(), hist.read_text(),
                                                rep.get("limiting_subcell", 0), plotting))
    yield_path = src / "yield.csv"
    if yield_path.is_file():
        rows = list(csv.DictReader(yield_path.read_text().splitlines()))
        lines.append("yield (kWh/day):")
        for r in rows:
            lines.append(f"  {r['period']}: with fault {r['modelled_yield_fault_kwh'] or '-'}, "
                         f"without fault {r['modelled_yield_healthy_kwh'] or '-'}, "
                         f"ratio {r['healthy_to_fault_ratio'] or '-'}")
    atm_path = src / "atmosphere.csv"
    if atm_path.is_file():
        lines.append("atmosphere fits:")
        for r in csv.DictReader(atm_path.read_text().splitlines()):
            lines.append(f"  {r['time']}: AOD {r['aod500']}, PW {r['pw_cm']} cm, "
                         f"DNI {r['measured_dni_w_m2']} / {r['modelled_dni_w_m2']} W/m2")
    if not lines:
        raise InsufficientDataError(f"no report.json, yield.csv or atmosphere.csv in {src}")
    text = "\n".join(lines) + "\n"
    files["summary.txt"] = text
    _write_outputs(cfg.out if args.out else src, files)
    sys.stdout.write(text)
    return status


# --------------------------------------------------------------------------
# parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="first seed of the mismatch ensemble")
    common.add_argument("--ff-threshold", type=float, dest="ff_threshold",
                        help="fill factor below which diagnosis is triggered")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cpvdiag", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"cpvdiag {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit-spectrum", parents=[common],
                       help="fit PW and AOD to a measured spectrum")
    s.add_argument("spectrum")
    s.add_argument("weather")
    s.add_argument("--timestamp", required=True)
    s.set_defaults(func=cmd_fit_spectrum)

    s = sub.add_parser("simulate", parents=[common], help="simulate IV curves")
    s.add_argument("weather")
    s.add_argument("--timestamp")
    s.add_argument("--fault", choices=("on", "off", "both"))
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("diagnose", parents=[common], help="diagnose faults from IV curves")
    s.add_argument("iv_glob")
    s.add_argument("weather")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("yield", parents=[common], help="daily energy yield")
    s.add_argument("weather")
    s.add_argument("--fault", choices=("on", "off", "both"))
    s.set_defaults(func=cmd_yield)

    s = sub.add_parser("report", parents=[common], help="summarise an output directory")
    s.add_argument("directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except (InsufficientDataError, DiagnosisInfeasible) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except CpvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
