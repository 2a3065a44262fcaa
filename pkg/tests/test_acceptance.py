"""Acceptance suite: eight end-to-end criteria at their stated tolerances.

Each test records one PASS/FAIL line (shown in the terminal summary) and
then asserts it.  Elapsed time counts against each criterion's budget.
"""
import time
from datetime import datetime

import numpy as np

from cpvdiag import cli, device as d
from cpvdiag.conditions import timestep_from_record
from cpvdiag.diagnosis import Condition, DiagnosisSettings, diagnose, simulate
from cpvdiag.energy_yield import simulate_days
from cpvdiag.geometry import Site, SolarGeometry
from cpvdiag.spectral import AtmosphericState, am15d_reference, direct_beam_spectrum, fit_aod, \
    fit_precipitable_water
from cpvdiag.thermal import offset_temperature, read_weather_log
from oracles import nodal_string_iv

SITE = Site()


def _fixture_records(fixture_dir):
    return read_weather_log(fixture_dir / "jan07_weather.csv", SITE.tz)


def test_1_offset_exact(acceptance):
    a, b = offset_temperature(600.0), offset_temperature(1000.0)
    ok = abs(a - 0.40) <= 1e-12 and abs(b - 12.0) <= 1e-12
    acceptance(1, ok, f"offset(600)={a!r} offset(1000)={b!r}")


def test_2_calibration(acceptance):
    t = time.perf_counter()
    module = d.calibrate_reference()
    elapsed = time.perf_counter() - t
    _, module_eff, ff = d.stc_performance(module)
    ok = abs(ff - 0.834) <= 0.005 and abs(module_eff - 0.28) <= 0.005 and elapsed < 10
    acceptance(2, ok, f"FF {ff:.4f} (0.834+-0.005), module eff {module_eff:.4f} (0.28+-0.005), "
                      f"{elapsed:.1f} s")


def test_3_fault_reproduction(acceptance, fixture_dir, ref_module):
    t = time.perf_counter()
    rec = next(r for r in _fixture_records(fixture_dir)
               if r.timestamp == datetime(2014, 1, 7, 13, tzinfo=SITE.tz))
    cond = Condition.from_timestep(ref_module, timestep_from_record(rec, SITE))
    healthy = d.ensemble_iv(ref_module, cond.photocurrents, cond.temps_c).metrics
    faulty = simulate(ref_module, cond, 0.23, 0.0664).metrics
    elapsed = time.perf_counter() - t
    checks = {
        "faulty FF in [0.67, 0.73]": 0.67 <= faulty.fill_factor <= 0.73,
        "healthy FF in [0.77, 0.81]": 0.77 <= healthy.fill_factor <= 0.81,
        "g_voc ratio < 0.5": faulty.g_voc_siemens < 0.5 * healthy.g_voc_siemens,
        "faulty g_voc 0.32 S +-30%": abs(faulty.g_voc_siemens / 0.32 - 1) <= 0.3,
        "healthy g_voc 0.72 S +-30%": abs(healthy.g_voc_siemens / 0.72 - 1) <= 0.3,
        "under 30 s": elapsed < 30,
    }
    failed = [k for k, v in checks.items() if not v]
    acceptance(3, not failed,
               f"FF faulty {faulty.fill_factor:.4f} healthy {healthy.fill_factor:.4f}; "
               f"g_voc faulty {faulty.g_voc_siemens:.3f} S healthy {healthy.g_voc_siemens:.3f} S; "
               f"{elapsed:.1f} s" + (f"; failed: {', '.join(failed)}" if failed else ""))


def test_4_diagnosis_round_trip(acceptance, ref_module):
    t = time.perf_counter()
    rng = np.random.default_rng(20140107)
    conds = [Condition.from_spectrum(ref_module, am15d_reference(900.0), 82.0, "900W"),
             Condition.from_spectrum(ref_module, am15d_reference(750.0), 70.0, "750W")]
    settings = DiagnosisSettings()
    good, worst = 0, 0.0
    for _ in range(20):
        sigma, drs = rng.uniform(0.1, 0.3), rng.uniform(0.02, 0.15)
        measured = [(simulate(ref_module, c, sigma, drs, settings), c) for c in conds]
        rep = diagnose(measured, ref_module, settings)
        err = max(abs(rep.sigma / sigma - 1), abs(rep.delta_rs_ohm / drs - 1))
        worst = max(worst, err)
        good += err <= 0.15 and rep.classification == "both"
    elapsed = time.perf_counter() - t
    acceptance(4, good >= 18 and elapsed < 300,
               f"{good}/20 trials recovered within 15% and classified 'both'; "
               f"worst relative error {worst:.2e}; {elapsed:.0f} s")


def test_5_spectral_round_trips(acceptance):
    t = time.perf_counter()
    pw_err = 0.0
    for am in (1.0, 1.5, 3.0):
        g = SolarGeometry.from_airmass(am)
        for pw in np.linspace(0.5, 5.0, 10):
            measured = direct_beam_spectrum(AtmosphericState(pw_cm=pw), g)
            pw_err = max(pw_err, abs(fit_precipitable_water(measured, AtmosphericState(), g)
                                     / pw - 1))
    aod_err = 0.0
    for am in (1.0, 1.5, 3.0):
        g = SolarGeometry.from_airmass(am)
        for aod in np.linspace(0.02, 0.5, 10):
            dni = direct_beam_spectrum(AtmosphericState(aod500=aod), g).dni
            aod_err = max(aod_err, abs(fit_aod(dni, AtmosphericState(), g) / aod - 1))
    g = SolarGeometry.from_airmass(1.5)
    lo = direct_beam_spectrum(AtmosphericState(aod500=0.1), g)
    hi = direct_beam_spectrum(AtmosphericState(aod500=0.2), g)
    loss = 1 - hi.at([400.0, 1600.0]) / lo.at([400.0, 1600.0])
    dry = direct_beam_spectrum(AtmosphericState(pw_cm=0.5), g)
    wet = direct_beam_spectrum(AtmosphericState(pw_cm=4.0), g)
    r550, r930 = wet.at([550.0, 930.0]) / dry.at([550.0, 930.0])
    shape = loss[0] > loss[1] > 0 and abs(r550 - 1) < 1e-3 and r930 < 0.99
    elapsed = time.perf_counter() - t
    ok = pw_err <= 0.025 and aod_err <= 0.03 and shape and elapsed < 60
    acceptance(5, ok, f"max PW error {pw_err:.2e}, max AOD error {aod_err:.2e}; "
                      f"AOD loss 400/1600 nm {loss[0]:.3f}/{loss[1]:.3f}; "
                      f"PW ratio 550/930 nm {r550:.5f}/{r930:.3f}; {elapsed:.1f} s")


def test_6_solver_oracle(acceptance, ref_module, il_900):
    t = time.perf_counter()
    cases = [((1.0, 1.0, 1.0), 60.0, None),
             ((1.0, 0.5, 1.0), 60.0, None),
             ((0.8, 1.15, 0.95), np.array([55.0, 70.0, 62.0]), None),
             ((1.0, 0.7, 1.1), 70.0, 0.0664)]
    worst_i, worst_v, bad = 0.0, 0.0, 0
    for scale, temps, drs in cases:
        m = d.ModuleModel(cells=ref_module.cells[:3], isc_scale=scale,
                          interconnect_rs_ohm=ref_module.interconnect_rs_ohm,
                          fault=d.FaultParams(delta_rs_ohm=drs) if drs else None)
        il = il_900[:3]
        c = d.module_iv(m, il, temps, d.covering_sweep(3, 9.9))
        extra = np.zeros((3, 3))
        if drs:
            extra[:, d.limiting_index(il)] = drs
        ref = nodal_string_iv(m.cells, il * np.array(scale)[:, None], temps, c.voltage_v,
                              extra, series_rs_ohm=3 * m.interconnect_rs_ohm)
        di = np.abs(c.current_a - ref)
        slope = np.abs(np.gradient(ref, c.voltage_v))
        dv = di / np.maximum(slope, 1e-12)
        worst_i, worst_v = max(worst_i, di.max()), max(worst_v, dv.max())
        bad += int(np.sum((di > 1e-3) & (dv > 1e-3)))
    elapsed = time.perf_counter() - t
    acceptance(6, bad == 0 and elapsed < 60,
               f"{len(cases)} strings (one shaded into bypass); max |dI| {worst_i * 1e3:.3f} mA, "
               f"max |dV| {worst_v * 1e3:.3f} mV; {bad} points outside; {elapsed:.1f} s")


def test_7_yield_ratio(acceptance, fixture_dir, faulty_module):
    t = time.perf_counter()
    (day,) = simulate_days(_fixture_records(fixture_dir), faulty_module.with_fault(False),
                           site=SITE)
    elapsed = time.perf_counter() - t
    f, h = day.modelled_yield_fault_kwh, day.modelled_yield_healthy_kwh
    ok = (abs(day.ratio / 1.49 - 1) <= 0.15 and 0.8 <= f <= 1.8 and 0.8 <= h <= 1.8
          and elapsed < 120)
    acceptance(7, ok, f"faulty {f:.4f} kWh, healthy {h:.4f} kWh, ratio {day.ratio:.4f} "
                      f"(1.49+-15%); {elapsed:.0f} s")


def test_8_determinism(acceptance, fixture_dir, tmp_path):
    t = time.perf_counter()
    weather = str(fixture_dir / "jan07_weather.csv")
    ivs = str(fixture_dir / "iv_fault" / "*.csv")
    codes = [cli.main(["diagnose", ivs, weather, "--seed", "0", "--out", str(tmp_path / k)])
             for k in ("a", "b")]
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
               for n in names)
    same = same and names == sorted(p.name for p in (tmp_path / "b").iterdir())
    elapsed = time.perf_counter() - t
    acceptance(8, same and codes == [1, 1] and elapsed < 60,
               f"{len(names)} files byte-identical across two runs: {same}; exit codes {codes}; "
               f"{elapsed:.0f} s")
