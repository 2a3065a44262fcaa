"""Fault diagnosis by fitting measured module IV curves.

A low fill factor triggers the search.  Two fault parameters are then
fitted: the spread of cell photocurrents (mismatch sigma) and a series
resistance increment on the limiting subcell of every cell.  Sigma shows
up below the maximum power point, where weak cells fall into bypass and
the current sags; the increment shows up above it, where every cell
conducts and the voltage drops by ``n_cells * I * delta_rs``.  The fit
matches both regions rather than the maximum power point alone: at wide
spreads the maximum power point jumps between branches of the curve, so
I_MP by itself does not pin sigma down.  I_MP and V_MP remain the
convergence checks.

Mismatch is stochastic, so every simulated curve is the mean over a fixed
seed ensemble; a given input therefore always produces the same fit.
"""
from dataclasses import dataclass, field
import csv
import io
import json
import math
import statistics

import numpy as np
from scipy.optimize import brentq, least_squares, minimize_scalar

from .device import (
    ensemble_iv,
    limiting_index,
    module_photocurrents,
    sample_mismatch,
)
from .errors import DiagnosisInfeasible, InputDataError

DEFAULT_FF_THRESHOLD = 0.75
CLASSES = ("none", "current-mismatch", "series-resistance", "both")


@dataclass(frozen=True)
class DiagnosisSettings:
    """Tolerances and search ranges.

    ``imp_rtol`` and ``vmp_rtol`` are the I_MP and V_MP errors at which a
    fit counts as converged.  ``vmp_gate_rtol`` is the V_MP error below
    which the stand-alone resistance stage returns zero without searching
    (0 disables the gate).  ``start``, ``fit_scale``, ``diff_step`` and
    ``fit_xtol`` configure the joint (sigma, delta Rs) least-squares fit.
    """

    ff_threshold: float = DEFAULT_FF_THRESHOLD
    imp_rtol: float = 0.01
    vmp_rtol: float = 0.05
    vmp_gate_rtol: float = 0.05
    sigma_bounds: tuple = (0.0, 0.6)
    rs_bounds_ohm: tuple = (0.0, 1.0)
    seeds: tuple = tuple(range(16))
    rs_floor_ohm: float = 0.01
    histogram_bins: int = 20
    rs_step_ohm: float = 0.05
    sigma_xtol: float = 2e-3
    rs_xtol_ohm: float = 2e-4
    start: tuple = (0.2, 0.08)
    fit_scale: tuple = (0.05, 0.05)
    diff_step: float = 1e-3
    fit_xtol: float = 1e-4

    def __post_init__(self):
        if len(self.seeds) < 16:
            raise ValueError("the mismatch ensemble needs at least 16 seeds")
        if not 0 < self.ff_threshold < 1:
            raise ValueError(f"FF threshold must lie in (0, 1), got {self.ff_threshold}")
        lo, hi = self.sigma_bounds
        if not 0 <= lo < hi:
            raise ValueError(f"bad sigma bounds {self.sigma_bounds}")
        lo, hi = self.rs_bounds_ohm
        if not 0 <= lo < hi:
            raise ValueError(f"bad resistance bounds {self.rs_bounds_ohm}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclass(frozen=True, eq=False)
class Condition:
    """Operating conditions of one measured curve.

    ``photocurrents`` are the per-cell subcell photocurrents before
    mismatch, shape (n_cells, 3).
    """

    photocurrents: np.ndarray
    temps_c: np.ndarray
    label: str = ""
    dni_w_m2: float = float("nan")

    @classmethod
    def from_spectrum(cls, module, spectrum, temps_c, label=""):
        temps = np.broadcast_to(np.asarray(temps_c, float), (module.n_cells,)).copy()
        return cls(module_photocurrents(module, spectrum), temps, label, spectrum.dni)

    @classmethod
    def from_timestep(cls, module, step, label=None):
        """Conditions of a logged instant; sensor readings are offset to
        junction temperatures, which requires DNI in the offset's range."""
        temps = step.cell_temps(module.n_cells, allow_below=False)
        label = step.timestamp.isoformat() if label is None else label
        return cls.from_spectrum(module, step.spectrum(), temps, label)


def detect_fault_trigger(metrics, threshold_ff=DEFAULT_FF_THRESHOLD):
    """True when the fill factor is strictly below the threshold."""
    return metrics.fill_factor < threshold_ff


def simulate(model, condition, sigma, delta_rs_ohm, settings=DiagnosisSettings()):
    """Seed-averaged curve of ``model`` with the given fault parameters."""
    faulty = model.with_fault(True, mismatch_sigma=sigma, delta_rs_ohm=delta_rs_ohm)
    return ensemble_iv(faulty, condition.photocurrents, condition.temps_c,
                       seeds=settings.seeds)


def _first_crossing(residual, lo, hi, step, xtol, start=None):
    """Zero of a residual that falls from positive values as x grows.

    Steps from ``start`` (default ``lo``) in increments of ``step``: upward
    while the residual is positive, otherwise downward until it is, then
    root-finds inside the last step.  When no crossing lies in [lo, hi]
    the sampled point of smallest |residual| is returned.

    Returns ``(x, |residual(x)|)``.
    """
    x0 = lo if start is None else min(max(start, lo), hi)
    r0 = residual(x0)
    best = (abs(r0), x0)
    direction = 1.0 if r0 > 0 else -1.0
    x_prev, r_prev = x0, r0
    while (x_prev < hi) if direction > 0 else (x_prev > lo):
        x = min(max(x_prev + direction * step, lo), hi)
        r = residual(x)
        if (r <= 0) != (r_prev <= 0):
            a, b = sorted((x_prev, x))
            root = brentq(residual, a, b, xtol=xtol)
            return root, abs(residual(root))
        best = min(best, (abs(r), x))
        x_prev, r_prev = x, r
    return best[1], best[0]


def low_bias_rms(measured, simulated):
    """RMS current difference on the measured samples with 0 <= V <= V_MP."""
    v = measured.voltage_v
    keep = (v >= 0) & (v <= measured.metrics.v_mp_v)
    diff = simulated.current_at(v[keep]) - measured.current_a[keep]
    return float(np.sqrt(np.mean(diff ** 2)))


def fit_mismatch_sigma(measured, model, condition, settings=DiagnosisSettings(),
                       delta_rs_ohm=0.0, bounds=None, check=True):
    """Mismatch sigma reproducing the measured low-bias current response.

    Sigma minimises the RMS current error between 0 V and the measured
    V_MP, where bypassed weak cells shape the curve, using bounded Brent
    minimisation.  ``delta_rs_ohm`` is held fixed during the search (zero
    on the first pass) and ``bounds`` narrows the search range.

    Returns
    -------
    (sigma, relative I_MP residual at sigma)

    Raises
    ------
    DiagnosisInfeasible
        ``check`` is set and the I_MP residual exceeds ``imp_rtol``.
    """
    lo, hi = bounds or settings.sigma_bounds

    def curve_at(s):
        return simulate(model, condition, s, delta_rs_ohm, settings)

    opt = minimize_scalar(lambda s: low_bias_rms(measured, curve_at(s)), bounds=(lo, hi),
                          method="bounded", options={"xatol": settings.sigma_xtol})
    sigma = float(opt.x)
    # Brent never samples the bounds themselves; a minimum there must be exact
    for edge in (lo, hi):
        if abs(sigma - edge) < 2 * settings.sigma_xtol:
            if low_bias_rms(measured, curve_at(edge)) <= opt.fun:
                sigma = edge
    if not check:
        return sigma, None
    err = abs(curve_at(sigma).metrics.i_mp_a / measured.metrics.i_mp_a - 1.0)
    if err > settings.imp_rtol:
        raise DiagnosisInfeasible(
            f"I_MP cannot be matched by mismatch alone; best sigma {sigma:.4f} "
            f"leaves a relative error of {err:.4f}", residual=err)
    return sigma, err


HIGH_BIAS_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5)


def high_bias_voltages(curve, currents):
    """Voltage on the branch above V_MP at which the curve carries each current."""
    m = curve.metrics
    keep = (curve.voltage_v >= m.v_mp_v) & (curve.voltage_v <= m.voc_v + 1.0)
    v, i = curve.voltage_v[keep], curve.current_a[keep]
    # current falls along this branch; interp needs it increasing
    return np.interp(currents, i[::-1], v[::-1])


def fit_series_resistance(measured, model, condition, sigma, settings=DiagnosisSettings(),
                          start=None, check=True):
    """Limiting-subcell resistance increment matching the high-bias branch.

    The increment is chosen so that the simulated curve reaches the same
    voltage as the measured one at currents of 10-50% of the measured I_MP,
    where every cell conducts and the increment shifts voltage by
    ``n_cells * I * delta_rs``.  If the mismatch-only curve already matches
    V_MP within ``vmp_gate_rtol`` the stage returns 0 without searching.

    Returns
    -------
    (delta_rs_ohm, relative V_MP residual at the fitted increment)

    Raises
    ------
    DiagnosisInfeasible
        ``check`` is set and the fitted curve misses the measured V_MP by more
        than ``vmp_rtol``.
    """
    m = measured.metrics
    currents = m.i_mp_a * np.asarray(HIGH_BIAS_FRACTIONS)
    v_meas = high_bias_voltages(measured, currents)
    lo, hi = settings.rs_bounds_ohm

    def curve_at(r):
        return simulate(model, condition, sigma, r, settings)

    def residual(r):
        return float(np.mean(high_bias_voltages(curve_at(r), currents) - v_meas)) / m.v_mp_v

    if start is None and settings.vmp_gate_rtol > 0:
        if abs(curve_at(lo).metrics.v_mp_v / m.v_mp_v - 1.0) <= settings.vmp_gate_rtol:
            return lo, abs(curve_at(lo).metrics.v_mp_v / m.v_mp_v - 1.0)
    drs, _ = _first_crossing(residual, lo, hi, settings.rs_step_ohm, settings.rs_xtol_ohm,
                             start)
    if not check:
        return drs, None
    err = abs(curve_at(drs).metrics.v_mp_v / m.v_mp_v - 1.0)
    if err > settings.vmp_rtol:
        raise DiagnosisInfeasible(
            f"V_MP cannot be matched within {settings.vmp_rtol:.0%}; best increment "
            f"{drs:.4f} ohm leaves a relative error of {err:.4f}", residual=err)
    return drs, err


def curve_residuals(measured, model, condition, settings=DiagnosisSettings()):
    """Residual vector for the joint fit, as a function of (sigma, delta_rs).

    Low-bias part: current error at the measured samples with
    0 <= V <= V_MP, over I_MP.  High-bias part: voltage error at 10-50% of
    I_MP above V_MP, over V_MP.  Each part is scaled by one over the square
    root of its length so both weigh as RMS values.
    """
    m = measured.metrics
    v = measured.voltage_v
    keep = (v >= 0) & (v <= m.v_mp_v)
    v_low, i_low = v[keep], measured.current_a[keep]
    currents = m.i_mp_a * np.asarray(HIGH_BIAS_FRACTIONS)
    v_high = high_bias_voltages(measured, currents)
    w_low = 1.0 / (m.i_mp_a * math.sqrt(max(v_low.size, 1)))
    w_high = 1.0 / (m.v_mp_v * math.sqrt(currents.size))

    def residuals(x):
        sim = simulate(model, condition, x[0], x[1], settings)
        return np.concatenate([
            (sim.current_at(v_low) - i_low) * w_low,
            (high_bias_voltages(sim, currents) - v_high) * w_high,
        ])

    return residuals


def fit_curve(measured, model, condition, settings=DiagnosisSettings()):
    """Fit sigma and the resistance increment to one measured curve.

    Both parameters are fitted together by bounded least squares on
    :func:`curve_residuals`.  Sigma mostly moves the low-bias part (weak
    cells bypassing) and the increment mostly the high-bias part, so the
    problem is well conditioned; fitting them in turn converges to the same
    point but needs several times more simulations.

    Returns ``(sigma, delta_rs_ohm, i_mp residual, v_mp residual)``.

    Raises
    ------
    DiagnosisInfeasible
        the fit misses I_MP by more than ``imp_rtol`` or V_MP by more than
        ``vmp_rtol``.
    """
    s_lo, s_hi = settings.sigma_bounds
    r_lo, r_hi = settings.rs_bounds_ohm
    x0 = np.clip(settings.start, (s_lo, r_lo), (s_hi, r_hi))
    sol = least_squares(curve_residuals(measured, model, condition, settings), x0,
                        bounds=((s_lo, r_lo), (s_hi, r_hi)), x_scale=settings.fit_scale,
                        diff_step=settings.diff_step, xtol=settings.fit_xtol, ftol=1e-6)
    sigma, drs = (float(x) for x in sol.x)
    fitted = simulate(model, condition, sigma, drs, settings).metrics
    m = measured.metrics
    imp_err = abs(fitted.i_mp_a / m.i_mp_a - 1.0)
    vmp_err = abs(fitted.v_mp_v / m.v_mp_v - 1.0)
    if imp_err > settings.imp_rtol:
        raise DiagnosisInfeasible(
            f"fit (sigma {sigma:.4f}, delta Rs {drs:.4f} ohm) misses I_MP by {imp_err:.4f}",
            residual=imp_err)
    if vmp_err > settings.vmp_rtol:
        raise DiagnosisInfeasible(
            f"fit (sigma {sigma:.4f}, delta Rs {drs:.4f} ohm) misses V_MP by {vmp_err:.4f}",
            residual=vmp_err)
    return sigma, drs, imp_err, vmp_err


@dataclass
class CurveResult:
    label: str
    fill_factor: float
    triggered: bool
    sigma: float = None
    delta_rs_ohm: float = None
    imp_residual: float = None
    vmp_residual: float = None
    rms_current_a: float = None
    converged: bool = False
    error: str = None
    measured: object = field(default=None, repr=False)
    fitted: object = field(default=None, repr=False)

    def as_dict(self):
        keys = ("label", "fill_factor", "triggered", "sigma", "delta_rs_ohm", "converged",
                "error")
        out = {k: getattr(self, k) for k in keys}
        out["residuals"] = {"i_mp": self.imp_residual, "v_mp": self.vmp_residual,
                            "rms_current_a": self.rms_current_a}
        return out


def rms_current_error(measured, fitted):
    """RMS current difference over the measured power quadrant."""
    v = measured.voltage_v
    keep = (v >= 0) & (v <= measured.metrics.voc_v)
    diff = measured.current_a[keep] - fitted.current_at(v[keep])
    return float(np.sqrt(np.mean(diff ** 2)))


def classify(sigma, delta_rs_ohm, baseline_sigma, rs_floor_ohm):
    mismatch = sigma > 2.0 * baseline_sigma
    resistive = delta_rs_ohm > rs_floor_ohm
    return CLASSES[int(mismatch) + 2 * int(resistive)]


@dataclass
class DiagnosisReport:
    """Outcome of :func:`diagnose`.

    ``histogram`` rows are ``(bin_low_a, bin_high_a, count)`` of sampled
    limiting-subcell photocurrents at the fitted sigma.  ``gvoc`` compares
    |dI/dV| near Voc of the measured, fitted-faulty and healthy curves.
    """

    triggered: bool
    ff_threshold: float
    classification: str
    sigma: float
    delta_rs_ohm: float
    baseline_sigma: float
    curves: list
    histogram: list
    gvoc: dict
    limiting_subcell: int

    def to_dict(self):
        return {
            "triggered": self.triggered,
            "ff_threshold": self.ff_threshold,
            "classification": self.classification,
            "fitted_sigma": self.sigma,
            "fitted_delta_rs_ohm": self.delta_rs_ohm,
            "baseline_sigma": self.baseline_sigma,
            "limiting_subcell": self.limiting_subcell,
            "gvoc_siemens": self.gvoc,
            "curves": [c.as_dict() for c in self.curves],
            "subcell_current_histogram": [
                {"low_a": lo, "high_a": hi, "count": n} for lo, hi, n in self.histogram],
        }

    def to_json(self):
        return json.dumps(_rounded(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def histogram_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low_a", "bin_high_a", "count"])
        for lo, hi, n in self.histogram:
            w.writerow([f"{lo:.6f}", f"{hi:.6f}", n])
        return buf.getvalue()

    def overlay_csv(self):
        """Measured and fitted current at every measured voltage, per curve."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "voltage_v", "measured_current_a", "fitted_current_a"])
        for c in self.curves:
            if c.fitted is None:
                continue
            fit = c.fitted.current_at(c.measured.voltage_v)
            for v, im, ifit in zip(c.measured.voltage_v, c.measured.current_a, fit):
                w.writerow([c.label, f"{v:.4f}", f"{im:.6f}", f"{ifit:.6f}"])
        return buf.getvalue()


def _rounded(obj, digits=9):
    if isinstance(obj, float):
        return round(obj, digits) if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, digits) for v in obj]
    return obj


def subcell_current_histogram(condition, sigma, seeds, bins, subcell, as_variance=False):
    """Histogram of sampled limiting-subcell photocurrents at ``sigma``."""
    il = np.asarray(condition.photocurrents)[:, subcell]
    samples = np.concatenate([il * sample_mismatch(sigma, s, il.size, as_variance)
                              for s in seeds])
    counts, edges = np.histogram(samples, bins=bins)
    return [(float(lo), float(hi), int(n)) for lo, hi, n in zip(edges[:-1], edges[1:], counts)]


def diagnose(measured_set, baseline, settings=DiagnosisSettings()):
    """Diagnose a module from IV curves taken under one or more conditions.

    Parameters
    ----------
    measured_set : sequence of (IVCurve, Condition)
        Distinct irradiance conditions sharpen the fit; one is enough.
    baseline : ModuleModel
        Healthy calibrated module; its ``mismatch_sigma`` is the baseline
        spread and its fault, if any, is ignored.

    Per-curve failures are recorded in the report.  Fitted parameters are
    the medians over curves that converged.

    Raises
    ------
    InputDataError
        ``measured_set`` is empty.
    DiagnosisInfeasible
        curves were triggered but none could be fitted.
    """
    measured_set = list(measured_set)
    if not measured_set:
        raise InputDataError("diagnosis needs at least one IV curve")
    healthy = baseline.with_fault(False) if baseline.fault is not None else baseline
    base_sigma = baseline.mismatch_sigma

    results = []
    for k, (curve, cond) in enumerate(measured_set):
        label = cond.label or f"curve{k}"
        m = curve.metrics
        res = CurveResult(label, m.fill_factor, detect_fault_trigger(m, settings.ff_threshold),
                          measured=curve)
        results.append(res)
        if not res.triggered:
            continue
        try:
            res.sigma, res.delta_rs_ohm, res.imp_residual, res.vmp_residual = fit_curve(
                curve, healthy, cond, settings)
        except DiagnosisInfeasible as exc:
            res.error = str(exc)
            continue
        res.fitted = simulate(healthy, cond, res.sigma, res.delta_rs_ohm, settings)
        res.rms_current_a = rms_current_error(curve, res.fitted)
        res.converged = True

    triggered = any(r.triggered for r in results)
    fitted = [r for r in results if r.converged]
    if triggered and not fitted:
        raise DiagnosisInfeasible(
            "no triggered curve could be fitted: " + "; ".join(
                f"{r.label}: {r.error}" for r in results if r.error))
    if fitted:
        sigma = float(statistics.median(r.sigma for r in fitted))
        drs = float(statistics.median(r.delta_rs_ohm for r in fitted))
        classification = classify(sigma, drs, base_sigma, settings.rs_floor_ohm)
    else:
        sigma, drs, classification = base_sigma, 0.0, "none"

    # reference condition for the histogram and gradient diagnostics
    ref = 0
    if fitted:
        ref = next(k for k, r in enumerate(results) if r.converged)
    curve, cond = measured_set[ref]
    sub = limiting_index(cond.photocurrents, healthy.limiting_subcell)
    histogram = subcell_current_histogram(cond, sigma, settings.seeds,
                                          settings.histogram_bins, sub, healthy.sigma_is_variance)
    healthy_curve = ensemble_iv(healthy, cond.photocurrents, cond.temps_c, seeds=settings.seeds)
    fault_curve = simulate(healthy, cond, sigma, drs, settings)
    gvoc = {"condition": results[ref].label,
            "measured": curve.metrics.g_voc_siemens,
            "fitted_fault": fault_curve.metrics.g_voc_siemens,
            "healthy": healthy_curve.metrics.g_voc_siemens}
    return DiagnosisReport(triggered, settings.ff_threshold, classification, sigma, drs,
                           base_sigma, results, histogram, gvoc, sub)
