"""Double-diode circuit model of triple-junction cells and series modules.

Each subcell is a photocurrent source in parallel with an ideality-1 diode,
an ideality-2 diode and a shunt, followed by a series resistance.  Three
subcells stack monotonically into a cell, each cell carries an antiparallel
bypass diode, and cells are strung in series.

Strings are solved by current: each cell's terminal characteristic is built
from tabulated inverse dark characteristics of its subcells, with the bypass
branch sharing the string current, and the module voltage is the sum of cell
voltages.  The curve is then inverted onto a fixed voltage sweep.
"""
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from functools import lru_cache
import json
import math

import numpy as np
from scipy import constants
from scipy.integrate import trapezoid
from scipy.optimize import brentq

from .errors import (
    CalibrationError,
    InputDataError,
    ParameterDomainError,
    SolverFailure,
)

Q = constants.elementary_charge
K_B = constants.Boltzmann
HC = constants.h * constants.c
T_REF_K = 298.15
ZERO_C = 273.15

N_CELLS = 25
SWEEP_V = (-10.0, 75.0)
SWEEP_STEP_V = 0.1
GVOC_WINDOW = 0.03

FORMAT_VERSION = 1


def thermal_voltage(temp_c):
    return K_B * (np.asarray(temp_c, dtype=float) + ZERO_C) / Q


# --------------------------------------------------------------------------
# parameters

@dataclass(frozen=True)
class SubcellParams:
    """One junction of a multi-junction cell.

    Saturation current densities ``j01``/``j02`` [A/cm^2] are quoted at
    298.15 K; ``egap_temp_coeff_ev_k`` is the (positive) rate at which the
    band gap shrinks with temperature.  The absorption edges bound the
    top-hat EQE window and are normally filled in by :class:`CellModel`.
    """

    name: str
    bandgap_ev: float
    eqe_plateau: float
    j01: float
    j02: float
    rs_ohm: float
    rsh_ohm: float
    area_cm2: float
    egap_temp_coeff_ev_k: float = 4.0e-4
    absorption_edge_low_nm: float = 300.0
    absorption_edge_high_nm: float = None

    def __post_init__(self):
        if not self.bandgap_ev > 0:
            raise ParameterDomainError(f"{self.name}: band gap must be > 0")
        if not 0 < self.eqe_plateau <= 1:
            raise ParameterDomainError(f"{self.name}: EQE plateau must lie in (0, 1]")
        if not (self.j01 > 0 and self.j02 > 0):
            raise ParameterDomainError(f"{self.name}: saturation currents must be > 0")
        if self.rs_ohm < 0 or not self.rsh_ohm > 0:
            raise ParameterDomainError(f"{self.name}: need rs >= 0 and rsh > 0")
        if not self.area_cm2 > 0:
            raise ParameterDomainError(f"{self.name}: area must be > 0")
        if self.absorption_edge_high_nm is None:
            object.__setattr__(self, "absorption_edge_high_nm",
                               1e9 * HC / (self.bandgap_ev * Q))

    def bandgap_at(self, temp_c):
        return self.bandgap_ev - self.egap_temp_coeff_ev_k * (temp_c + ZERO_C - T_REF_K)

    def saturation_currents(self, temp_c):
        """Diode saturation currents (I01, I02) in amperes at ``temp_c``.

        I01 scales as T^3 exp(-Eg/kT) and I02 as T^2.5 exp(-Eg/2kT), with
        the band gap following its linear temperature coefficient.
        """
        t = temp_c + ZERO_C
        eg_t = self.bandgap_at(temp_c)
        arg1 = self.bandgap_ev / (K_B * T_REF_K / Q) - eg_t / (K_B * t / Q)
        i01 = self.j01 * self.area_cm2 * (t / T_REF_K) ** 3 * math.exp(arg1)
        i02 = self.j02 * self.area_cm2 * (t / T_REF_K) ** 2.5 * math.exp(0.5 * arg1)
        return i01, i02


@dataclass(frozen=True)
class BypassDiode:
    saturation_current_a: float = 1.0 / math.exp(0.6 / (K_B * T_REF_K / Q))
    ideality: float = 1.0

    def current(self, cell_voltage, temp_c):
        """Forward current of the diode for a (negative) cell voltage."""
        nvt = self.ideality * thermal_voltage(temp_c)
        return self.saturation_current_a * np.expm1(np.minimum(-cell_voltage / nvt, 700.0))


def _with_edges(subcells):
    out = []
    lower = 300.0
    for sub in subcells:
        high = 1e9 * HC / (sub.bandgap_ev * Q)
        out.append(replace(sub, absorption_edge_low_nm=lower, absorption_edge_high_nm=high))
        lower = high
    return tuple(out)


@dataclass(frozen=True)
class CellModel:
    """Monolithic triple-junction cell behind a concentrator.

    ``subcells`` are ordered by descending band gap; absorption edges are
    recomputed on construction so each junction collects light between its
    own band-edge wavelength and that of the junction above it.
    """

    subcells: tuple
    bypass: BypassDiode = field(default_factory=BypassDiode)
    concentration: float = 820.0
    optical_efficiency: float = 0.75

    def __post_init__(self):
        subs = tuple(self.subcells)
        if len(subs) != 3:
            raise ParameterDomainError(f"a cell needs exactly 3 subcells, got {len(subs)}")
        gaps = [s.bandgap_ev for s in subs]
        if not all(a > b for a, b in zip(gaps, gaps[1:])):
            raise ParameterDomainError(f"subcell band gaps must be strictly descending: {gaps}")
        if not self.concentration > 0:
            raise ParameterDomainError("concentration must be > 0")
        if not 0 < self.optical_efficiency <= 1:
            raise ParameterDomainError("optical efficiency must lie in (0, 1]")
        object.__setattr__(self, "subcells", _with_edges(subs))

    @property
    def area_cm2(self):
        return self.subcells[0].area_cm2

    @property
    def aperture_m2(self):
        return self.area_cm2 * 1e-4 * self.concentration


@dataclass(frozen=True)
class FaultParams:
    """Degradation switched on top of a healthy module.

    When ``enabled`` the cell-current spread becomes ``mismatch_sigma`` and
    ``delta_rs_ohm`` is added in series with the limiting subcell of every
    cell.
    """

    delta_rs_ohm: float = 0.0
    mismatch_sigma: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if self.delta_rs_ohm < 0 or self.mismatch_sigma < 0:
            raise ParameterDomainError("fault resistance and sigma must be >= 0")


@dataclass(frozen=True)
class ModuleModel:
    """Series string of cells with per-cell photocurrent scale factors."""

    cells: tuple
    isc_scale: tuple = None
    mismatch_sigma: float = 0.0
    fault: FaultParams = None
    limiting_subcell: int = 0
    interconnect_rs_ohm: float = 0.0
    sigma_is_variance: bool = False

    def __post_init__(self):
        cells = tuple(self.cells)
        object.__setattr__(self, "cells", cells)
        scale = (1.0,) * len(cells) if self.isc_scale is None else tuple(
            float(s) for s in self.isc_scale)
        if len(scale) != len(cells):
            raise ParameterDomainError("isc_scale needs one factor per cell")
        if any(not s > 0 for s in scale):
            raise ParameterDomainError("isc_scale factors must be > 0")
        object.__setattr__(self, "isc_scale", scale)
        if self.mismatch_sigma < 0:
            raise ParameterDomainError("mismatch sigma must be >= 0")
        if self.limiting_subcell not in (0, 1, 2):
            raise ParameterDomainError("limiting_subcell must be 0, 1 or 2")
        if self.interconnect_rs_ohm < 0:
            raise ParameterDomainError("interconnect resistance must be >= 0")

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def fault_active(self):
        return self.fault is not None and self.fault.enabled

    @property
    def effective_sigma(self):
        return self.fault.mismatch_sigma if self.fault_active else self.mismatch_sigma

    @property
    def delta_rs_ohm(self):
        return self.fault.delta_rs_ohm if self.fault_active else 0.0

    @property
    def aperture_m2(self):
        return sum(c.aperture_m2 for c in self.cells)

    def with_fault(self, enabled=True, **changes):
        base = self.fault or FaultParams(enabled=False)
        return replace(self, fault=replace(base, enabled=enabled, **changes))

    def with_scale(self, isc_scale):
        return replace(self, isc_scale=tuple(isc_scale))

    # -- parameter file ---------------------------------------------------
    def to_dict(self):
        cell = self.cells[0]
        if any(c != cell for c in self.cells[1:]):
            cells = [_cell_dict(c) for c in self.cells]
        else:
            cells = _cell_dict(cell)
        return {
            "format_version": FORMAT_VERSION,
            "n_cells": self.n_cells,
            "cells": cells,
            "isc_scale": list(self.isc_scale),
            "mismatch_sigma": self.mismatch_sigma,
            "limiting_subcell": self.limiting_subcell,
            "interconnect_rs_ohm": self.interconnect_rs_ohm,
            "sigma_is_variance": self.sigma_is_variance,
            "fault": asdict(self.fault) if self.fault is not None else None,
        }

    @classmethod
    def from_dict(cls, doc):
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise InputDataError(f"unsupported module file version {version!r}")
        raw = doc["cells"]
        if isinstance(raw, dict):
            cells = (_cell_from_dict(raw),) * int(doc.get("n_cells", N_CELLS))
        else:
            cells = tuple(_cell_from_dict(c) for c in raw)
        fault = doc.get("fault")
        return cls(cells=cells, isc_scale=doc.get("isc_scale"),
                   mismatch_sigma=doc.get("mismatch_sigma", 0.0),
                   fault=FaultParams(**fault) if fault else None,
                   limiting_subcell=doc.get("limiting_subcell", 0),
                   interconnect_rs_ohm=doc.get("interconnect_rs_ohm", 0.0),
                   sigma_is_variance=bool(doc.get("sigma_is_variance", False)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _cell_dict(cell):
    return {"subcells": [asdict(s) for s in cell.subcells],
            "bypass": asdict(cell.bypass),
            "concentration": cell.concentration,
            "optical_efficiency": cell.optical_efficiency}


def _cell_from_dict(d):
    return CellModel(subcells=tuple(SubcellParams(**s) for s in d["subcells"]),
                     bypass=BypassDiode(**d.get("bypass", {})),
                     concentration=d["concentration"],
                     optical_efficiency=d["optical_efficiency"])


# Uncalibrated starting point; calibrate_reference() tunes j01, rsh and the
# optical efficiency against the rated efficiencies and fill factor. The top
# cell plateau is kept below the middle cell's so InGaP limits in the field.
DEFAULT_AREA_CM2 = 0.425

DEFAULT_SUBCELLS = (
    SubcellParams("InGaP", 1.89, 0.84, j01=4e-25, j02=1e-14, rs_ohm=0.004,
                  rsh_ohm=10.0, area_cm2=DEFAULT_AREA_CM2, egap_temp_coeff_ev_k=4.2e-4),
    SubcellParams("GaAs", 1.42, 0.98, j01=5e-19, j02=1e-11, rs_ohm=0.004,
                  rsh_ohm=10.0, area_cm2=DEFAULT_AREA_CM2, egap_temp_coeff_ev_k=4.5e-4),
    SubcellParams("Ge", 0.66, 0.80, j01=2e-6, j02=1e-5, rs_ohm=0.004,
                  rsh_ohm=5.0, area_cm2=DEFAULT_AREA_CM2, egap_temp_coeff_ev_k=3.9e-4),
)


def default_cell(**changes):
    return CellModel(subcells=DEFAULT_SUBCELLS, **changes)


def default_module(n_cells=N_CELLS, **changes):
    return ModuleModel(cells=(default_cell(),) * n_cells, **changes)


# --------------------------------------------------------------------------
# photocurrent

def subcell_photocurrent(sub, spectrum, concentration, optical_efficiency):
    """Light-generated current [A] of a subcell with a top-hat EQE.

    ``concentration * optical_efficiency * area * q * integral(EQE * E * lambda / hc)``
    over the subcell's absorption window.
    """
    lo, hi = sub.absorption_edge_low_nm, sub.absorption_edge_high_nm
    spectrum.require(lo, hi, f"{sub.name} photocurrent")
    wl = spectrum.wavelengths_nm
    inner = wl[(wl > lo) & (wl < hi)]
    grid = np.concatenate(([lo], inner, [hi]))
    photon_flux = spectrum.at(grid) * grid * 1e-9 / HC      # photons s^-1 m^-2 nm^-1
    j = Q * sub.eqe_plateau * trapezoid(photon_flux, grid)   # A m^-2
    return concentration * optical_efficiency * sub.area_cm2 * 1e-4 * j


def cell_photocurrents(cell, spectrum, optical_efficiency=None):
    eta = cell.optical_efficiency if optical_efficiency is None else optical_efficiency
    return np.array([subcell_photocurrent(s, spectrum, cell.concentration, eta)
                     for s in cell.subcells])


def module_photocurrents(module, spectrum):
    """Unscaled (n_cells, 3) photocurrents; mismatch is applied in the solver."""
    return np.array([cell_photocurrents(c, spectrum) for c in module.cells])


# --------------------------------------------------------------------------
# exact subcell solve

def _dark(vj, i01, i02, rsh, vt):
    e1 = np.exp(np.minimum(vj / vt, 700.0))
    e2 = np.exp(np.minimum(vj / (2.0 * vt), 700.0))
    j = i01 * (e1 - 1.0) + i02 * (e2 - 1.0) + vj / rsh
    dj = i01 * e1 / vt + i02 * e2 / (2.0 * vt) + 1.0 / rsh
    return j, dj


def subcell_voltage(sub, current_a, photocurrent_a, cell_temp_c, tol=1e-10, max_iter=200):
    """Terminal voltage of a subcell carrying ``current_a``.

    Solves ``I = IL - I01(e^{Vj/Vt}-1) - I02(e^{Vj/2Vt}-1) - Vj/Rsh`` for the
    junction voltage ``Vj = V + I*Rs`` by Newton iteration kept inside a
    shrinking bisection bracket on [-10 V, 2 Eg/q], then returns
    ``V = Vj - I*Rs``.  Works elementwise on arrays.

    Raises
    ------
    ParameterDomainError
        temperature outside -20..120 C.
    SolverFailure
        the root is not bracketed (current far beyond what the bracket allows).
    """
    if not -20.0 <= cell_temp_c <= 120.0:
        raise ParameterDomainError(f"cell temperature {cell_temp_c} C outside -20..120 C")
    current = np.asarray(current_a, dtype=float)
    target = np.asarray(photocurrent_a, dtype=float) - current
    target, current = np.broadcast_arrays(target, current)
    vt = float(thermal_voltage(cell_temp_c))
    i01, i02 = sub.saturation_currents(cell_temp_c)
    lo = np.full(target.shape, -10.0)
    hi = np.full(target.shape, 2.0 * sub.bandgap_at(cell_temp_c))

    f_lo = _dark(lo, i01, i02, sub.rsh_ohm, vt)[0] - target
    f_hi = _dark(hi, i01, i02, sub.rsh_ohm, vt)[0] - target
    bad = (f_lo > 0) | (f_hi < 0)
    if np.any(bad):
        raise SolverFailure(
            f"{sub.name}: no junction-voltage bracket in [-10, {hi.flat[0]:.2f}] V "
            f"for current {current[bad].flat[0]:.6g} A")

    # start from the log-inverse of the dominant diode, clipped into the bracket
    x = np.where(target > 0, vt * np.log1p(np.maximum(target, 0.0) / i01),
                 target * sub.rsh_ohm)
    x = np.clip(x, lo, hi)
    for _ in range(max_iter):
        j, dj = _dark(x, i01, i02, sub.rsh_ohm, vt)
        f = j - target
        done = np.abs(f) < tol
        if np.all(done | (hi - lo < 1e-15)):
            break
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        step = x - f / dj
        outside = (step <= lo) | (step >= hi) | ~np.isfinite(step)
        x = np.where(done, x, np.where(outside, 0.5 * (lo + hi), step))
    else:
        raise SolverFailure(f"{sub.name}: Newton iteration did not converge")
    v = x - current * sub.rs_ohm
    return float(v) if v.ndim == 0 else v


# --------------------------------------------------------------------------
# tabulated string solver

# Junction tables are linear-interpolated in J(Vj).  Node spacing follows
# the local curvature so the implied junction-voltage error stays below
# _TABLE_TOL_V; linear (shunt-dominated) stretches get the coarse step.
_TABLE_TOL_V = 2.0e-6
_TABLE_MIN_STEP = 2.0e-4
_TABLE_MAX_STEP = 0.05
_DARK_CAP_A = 60.0
# widest cell-voltage gap between characteristic samples in reverse bias; the
# bypass diode turns on over a few tens of millivolts, so coarse shunt-region
# nodes are split
_CELL_MAX_DV = 2.0e-3


@lru_cache(maxsize=256)
def _junction_table(sub, temp_c):
    """Dark current J(Vj) on an adaptive grid; both arrays strictly increasing."""
    vt = float(thermal_voltage(temp_c))
    i01, i02 = sub.saturation_currents(temp_c)

    def dark(v):
        return _dark(np.asarray(v, float), i01, i02, sub.rsh_ohm, vt)[0]

    v_top = brentq(lambda v: float(dark(v)) - _DARK_CAP_A, 0.0, 2.0 * sub.bandgap_at(temp_c) + 2.0)
    fine = np.append(np.arange(-10.0, v_top, _TABLE_MIN_STEP), v_top)
    e1 = np.exp(np.minimum(fine / vt, 700.0))
    e2 = np.exp(np.minimum(fine / (2.0 * vt), 700.0))
    d1 = i01 * e1 / vt + i02 * e2 / (2.0 * vt) + 1.0 / sub.rsh_ohm
    d2 = i01 * e1 / vt ** 2 + i02 * e2 / (4.0 * vt ** 2)
    # interpolation error in Vj over a step h is about h^2 * J'' / (8 J')
    with np.errstate(divide="ignore"):
        h = np.sqrt(8.0 * _TABLE_TOL_V * d1 / d2)
    h = np.clip(h, _TABLE_MIN_STEP, _TABLE_MAX_STEP)
    # place a node each time the accumulated node density passes an integer
    density = np.concatenate(([0.0], np.cumsum(np.diff(fine) / h[:-1])))
    nodes = fine[np.concatenate(([True], np.diff(np.floor(density)) > 0))]
    vj = np.unique(np.concatenate([nodes, [0.0, v_top]]))
    j = dark(vj)
    vj.setflags(write=False)
    j.setflags(write=False)
    return vj, j


def cell_characteristic(cell, photocurrents, temp_c, extra_rs=(0.0, 0.0, 0.0)):
    """Terminal characteristic of one cell including its bypass diode.

    Returns ``(current, voltage)`` with current strictly increasing and
    voltage decreasing.  The string current splits between the subcell
    stack (current ``I_s``) and the bypass diode, both at the same terminal
    voltage.
    """
    tables = [_junction_table(s, float(temp_c)) for s in cell.subcells]
    il = np.asarray(photocurrents, dtype=float)
    rs_total = sum(s.rs_ohm + r for s, r in zip(cell.subcells, extra_rs))

    i_hi = min(l - j[0] for l, (_, j) in zip(il, tables))
    i_lo = max(l - j[-1] for l, (_, j) in zip(il, tables))
    samples = np.unique(np.concatenate([l - j for l, (_, j) in zip(il, tables)]))
    i_s = samples[(samples >= i_lo) & (samples <= i_hi)]

    def stack_v(i):
        v = -i * rs_total
        for l, (vj, j) in zip(il, tables):
            v = v + np.interp(l - i, j, vj)
        return v

    v = stack_v(i_s)
    # below v_floor the bypass alone exceeds the current cap; those samples go
    nvt = cell.bypass.ideality * thermal_voltage(temp_c)
    v_floor = -nvt * math.log1p((il.max() + _DARK_CAP_A) / cell.bypass.saturation_current_a)
    parts = np.ceil(np.abs(np.diff(v)) / _CELL_MAX_DV).astype(int)
    parts[np.maximum(v[:-1], v[1:]) < v_floor] = 1
    # with the cell forward biased the bypass carries nothing worth resolving
    parts[np.minimum(v[:-1], v[1:]) > 0.0] = 1
    wide = np.flatnonzero(parts > 1)
    if wide.size:
        counts = parts[wide] - 1
        k = np.repeat(wide, counts)
        step = np.arange(k.size) - np.repeat(np.cumsum(counts) - counts, counts) + 1
        frac = step / np.repeat(parts[wide], counts)
        extra = i_s[k] + frac * (i_s[k + 1] - i_s[k])
        i_s = np.sort(np.concatenate([i_s, extra]))
        v = stack_v(i_s)
    i_tot = i_s + cell.bypass.current(v, temp_c)

    keep = i_tot <= il.max() + _DARK_CAP_A
    i_tot, v = i_tot[keep], v[keep]
    order = np.argsort(i_tot, kind="stable")
    i_tot, v = i_tot[order], v[order]
    strict = np.concatenate(([True], np.diff(i_tot) > 0))
    return i_tot[strict], v[strict]


def _pl_eval(x, xs, ys):
    """Piecewise-linear value and slope with linear extrapolation."""
    idx = np.clip(np.searchsorted(xs, x) - 1, 0, xs.size - 2)
    x0, x1 = xs[idx], xs[idx + 1]
    y0, y1 = ys[idx], ys[idx + 1]
    slope = (y1 - y0) / (x1 - x0)
    return y0 + slope * (x - x0), slope


def sweep_voltages(n_cells=N_CELLS, bounds=SWEEP_V):
    """Voltage sweep scaled from the 25-cell -10..75 V, 0.1 V grid."""
    lo = round(bounds[0] * n_cells / N_CELLS, 6)
    hi = round(bounds[1] * n_cells / N_CELLS, 6)
    n = int(round((hi - lo) / SWEEP_STEP_V))
    return np.round(lo + SWEEP_STEP_V * np.arange(n + 1), 10)


def covering_sweep(n_cells, voc_v, margin_v=0.0):
    """Default sweep, extended past its ceiling in the same steps if ``voc_v``
    (plus ``margin_v``) would otherwise fall off the end."""
    v = sweep_voltages(n_cells)
    need = voc_v + margin_v
    if need < v[-1]:
        return v
    extra = int(math.floor((need - v[-1]) / SWEEP_STEP_V)) + 1
    return np.round(v[0] + SWEEP_STEP_V * np.arange(v.size + extra), 10)


def string_iv(cells, photocurrents, temps_c, voltages=None, extra_rs=None,
              series_rs_ohm=0.0, tol_v=1e-9):
    """Current at each sweep voltage for a series string of cells.

    Parameters
    ----------
    cells : sequence of CellModel
    photocurrents : array (n, 3)
        Photocurrents actually seen by each subcell.
    temps_c : array (n,)
    voltages : array, optional
        Sweep; defaults to :func:`sweep_voltages` for the string length,
        extended upward when the string's open-circuit voltage lies beyond it.
    extra_rs : array (n, 3), optional
        Added series resistance per subcell.
    series_rs_ohm : float
        Lumped resistance in series with the whole string, outside the
        bypass diodes.
    """
    n = len(cells)
    il = np.asarray(photocurrents, dtype=float).reshape(n, 3)
    temps = np.broadcast_to(np.asarray(temps_c, dtype=float), (n,))
    extra = np.zeros((n, 3)) if extra_rs is None else np.asarray(extra_rs, float).reshape(n, 3)
    curves = {}
    members = {}
    for c in range(n):
        key = (id(cells[c]), tuple(il[c]), float(temps[c]), tuple(extra[c]))
        if key not in curves:
            try:
                curves[key] = cell_characteristic(cells[c], il[c], temps[c], extra[c])
            except SolverFailure as exc:
                raise SolverFailure(str(exc), cell_index=c) from exc
            members[key] = 0
        members[key] += 1
    groups = [(curves[k], members[k]) for k in curves]

    def module_v(i):
        total = np.zeros_like(i)
        slope = np.zeros_like(i)
        for (ic, vc), count in groups:
            v, s = _pl_eval(i, ic, vc)
            total += count * v
            slope += count * s
        return total - i * series_rs_ohm, slope - series_rs_ohm

    if voltages is None:
        v_target = covering_sweep(n, float(module_v(np.zeros(1))[0][0]))
    else:
        v_target = np.asarray(voltages, dtype=float)

    i_min = max(ic[0] for (ic, _), _ in groups)
    i_max = min(ic[-1] for (ic, _), _ in groups)
    i_max_il = il.max()
    coarse = np.unique(np.concatenate([
        np.linspace(i_min, i_max, 400),
        np.linspace(max(i_min, -1.0), min(i_max, i_max_il + 1.0), 3000),
    ]))
    v_coarse, _ = module_v(coarse)
    # v_coarse decreases with current
    pos = np.searchsorted(-v_coarse, -v_target)
    lo_idx = np.clip(pos - 1, 0, coarse.size - 1)
    hi_idx = np.clip(pos, 0, coarse.size - 1)
    a, b = coarse[lo_idx], coarse[hi_idx]
    below = pos == 0
    above = pos >= coarse.size
    a = np.where(below, coarse[0] - 1e3, a)
    b = np.where(above, coarse[-1] + 1e3, b)
    i = np.interp(-v_target, -v_coarse, coarse)
    for _ in range(60):
        v, s = module_v(i)
        f = v - v_target
        if np.all(np.abs(f) < tol_v):
            break
        # f > 0 means the string still sits above target: raise the current
        a = np.where(f > 0, i, a)
        b = np.where(f < 0, i, b)
        step = i - f / np.where(s < 0, s, -1e-12)
        inside = (step > a) & (step < b)
        i = np.where(np.abs(f) < tol_v, i, np.where(inside, step, 0.5 * (a + b)))
    return v_target, i


# --------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class IVMetrics:
    isc_a: float
    voc_v: float
    i_mp_a: float
    v_mp_v: float
    p_mp_w: float
    fill_factor: float
    g_voc_siemens: float

    def as_dict(self):
        return asdict(self)


def iv_metrics(voltage, current, gvoc_window=GVOC_WINDOW):
    """Isc, Voc, maximum power point, fill factor and |dI/dV| near Voc.

    The maximum power point is the exact maximum of V*I along the
    piecewise-linear curve on the two segments adjoining the best sample.
    ``g_voc`` is the least-squares slope over samples in the top
    ``gvoc_window`` fraction of Voc.

    Raises
    ------
    InputDataError
        the curve never reaches zero current at positive voltage.
    """
    v = np.asarray(voltage, dtype=float)
    i = np.asarray(current, dtype=float)
    if v.size < 3 or np.any(np.diff(v) <= 0):
        raise InputDataError("IV samples must be ordered by strictly increasing voltage")
    if v[0] > 0 or v[-1] < 0:
        raise InputDataError("IV curve does not span V = 0")
    isc = float(np.interp(0.0, v, i))
    crossing = np.nonzero((i[:-1] > 0) & (i[1:] <= 0) & (v[1:] > 0))[0]
    if isc <= 0 or crossing.size == 0:
        raise InputDataError("IV curve does not cross zero current in the power quadrant")
    k = crossing[0]
    voc = float(v[k] - i[k] * (v[k + 1] - v[k]) / (i[k + 1] - i[k]))

    quad = (v >= 0) & (v <= voc)
    idx = np.nonzero(quad)[0]
    p = v[idx] * i[idx]
    best = idx[np.argmax(p)]
    v_mp, p_mp = float(v[best]), float(v[best] * i[best])
    for s in (best - 1, best):
        if s < 0 or s + 1 >= v.size:
            continue
        v0, v1, i0, i1 = v[s], v[s + 1], i[s], i[s + 1]
        slope = (i1 - i0) / (v1 - v0)
        if slope >= 0:
            continue
        vs = (slope * v0 - i0) / (2.0 * slope)
        if v0 < vs < v1:
            ps = vs * (i0 + slope * (vs - v0))
            if ps > p_mp:
                v_mp, p_mp = float(vs), float(ps)
    i_mp = p_mp / v_mp if v_mp > 0 else isc
    ff = p_mp / (isc * voc)

    win = (v >= (1.0 - gvoc_window) * voc) & (v <= voc)
    if np.count_nonzero(win) < 2:
        win = np.zeros_like(v, dtype=bool)
        win[max(k - 1, 0):k + 2] = True
    slope = np.polyfit(v[win], i[win], 1)[0]
    return IVMetrics(isc, voc, float(i_mp), v_mp, p_mp, float(ff), float(abs(slope)))


@dataclass(frozen=True, eq=False)
class IVCurve:
    """Sampled IV characteristic with derived metrics.

    CSV files hold a ``voltage_v,current_a`` header, optionally preceded by
    ``#`` comment lines; a ``# timestamp: <ISO-8601>`` comment sets
    :attr:`timestamp`.
    """

    voltage_v: np.ndarray
    current_a: np.ndarray
    metrics: IVMetrics = None
    timestamp: datetime = None

    def __post_init__(self):
        v = np.asarray(self.voltage_v, dtype=float)
        i = np.asarray(self.current_a, dtype=float)
        object.__setattr__(self, "voltage_v", v)
        object.__setattr__(self, "current_a", i)
        if self.metrics is None:
            object.__setattr__(self, "metrics", iv_metrics(v, i))

    def current_at(self, voltage):
        return np.interp(voltage, self.voltage_v, self.current_a)

    def csv_text(self):
        lines = []
        if self.timestamp is not None:
            lines.append(f"# timestamp: {self.timestamp.isoformat()}")
        lines.append("voltage_v,current_a")
        lines += [f"{a:.4f},{b:.9f}" for a, b in zip(self.voltage_v, self.current_a)]
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.csv_text())

    @classmethod
    def from_csv(cls, path):
        v, i = [], []
        timestamp = None
        header_seen = False
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.strip()
                if not text:
                    continue
                if text.startswith("#"):
                    key, _, value = text[1:].partition(":")
                    if key.strip() == "timestamp" and value.strip():
                        try:
                            timestamp = datetime.fromisoformat(value.strip())
                        except ValueError:
                            raise InputDataError(f"bad timestamp {value.strip()!r}",
                                                 line=lineno) from None
                    continue
                if not header_seen:
                    if text.replace(" ", "") != "voltage_v,current_a":
                        raise InputDataError(f"unexpected header {text!r}", line=lineno)
                    header_seen = True
                    continue
                try:
                    a, b = (float(x) for x in text.split(","))
                except ValueError:
                    raise InputDataError(f"cannot parse {text!r}", line=lineno) from None
                if not (math.isfinite(a) and math.isfinite(b)):
                    raise InputDataError("non-finite value", line=lineno)
                if v and a <= v[-1]:
                    raise InputDataError("voltages must increase", line=lineno)
                v.append(a)
                i.append(b)
        if not header_seen:
            raise InputDataError(f"{path}: no voltage_v,current_a header")
        return cls(np.array(v), np.array(i), timestamp=timestamp)


# --------------------------------------------------------------------------
# module level

def sample_mismatch(sigma, seed, n_cells=N_CELLS, as_variance=False):
    """Per-cell photocurrent scale factors drawn from Normal(1, sigma).

    ``as_variance`` reads ``sigma`` as the variance instead of the standard
    deviation.  Draws are clamped at 0.05 so no cell generates a negative
    current.
    """
    if sigma < 0:
        raise ParameterDomainError(f"sigma must be >= 0, got {sigma}")
    sd = math.sqrt(sigma) if as_variance else sigma
    if sd == 0:
        return np.ones(n_cells)
    draws = np.random.default_rng(seed).normal(1.0, sd, n_cells)
    return np.maximum(draws, 0.05)


def limiting_index(photocurrents, default=0):
    """Index of the subcell with the smallest mean photocurrent."""
    il = np.asarray(photocurrents, dtype=float).reshape(-1, 3)
    if not np.any(il > 0):
        return default
    return int(np.argmin(il.mean(axis=0)))


def module_iv(module, per_cell_photocurrents, per_cell_temps_c, voltages=None):
    """Full IV curve of a module.

    ``per_cell_photocurrents`` are the (n_cells, 3) photocurrents before
    mismatch; each row is multiplied by the module's ``isc_scale``.  An
    active fault adds ``delta_rs_ohm`` to the limiting subcell of every cell.
    """
    n = module.n_cells
    il = np.asarray(per_cell_photocurrents, dtype=float)
    if il.shape != (n, 3):
        raise ParameterDomainError(f"photocurrents must have shape ({n}, 3), got {il.shape}")
    temps = np.asarray(per_cell_temps_c, dtype=float)
    if temps.shape == ():
        temps = np.full(n, float(temps))
    if temps.shape != (n,):
        raise ParameterDomainError(f"need {n} cell temperatures, got shape {temps.shape}")
    scaled = il * np.asarray(module.isc_scale)[:, None]
    extra = np.zeros((n, 3))
    if module.delta_rs_ohm > 0:
        extra[:, limiting_index(il, module.limiting_subcell)] = module.delta_rs_ohm
    v, i = string_iv(module.cells, scaled, temps, voltages, extra,
                     series_rs_ohm=n * module.interconnect_rs_ohm)
    return IVCurve(v, i)


def ensemble_iv(module, per_cell_photocurrents, per_cell_temps_c, sigma=None,
                seeds=range(16), voltages=None):
    """Seed-averaged IV curve for a mismatch spread ``sigma``.

    Each seed draws its own scale factors; the returned curve is the mean
    current at every sweep voltage.  With ``sigma == 0`` a single unscaled
    curve is returned.  ``module.sigma_is_variance`` selects how sigma is
    read (see :func:`sample_mismatch`).
    """
    sigma = module.effective_sigma if sigma is None else sigma
    nominal = module_iv(module.with_scale(np.ones(module.n_cells)),
                        per_cell_photocurrents, per_cell_temps_c, voltages)
    if sigma == 0:
        return nominal
    if voltages is None:
        # one grid for every seed; strong cells may lift Voc a little
        voltages = covering_sweep(module.n_cells, nominal.metrics.voc_v,
                                  margin_v=0.1 * module.n_cells)
    total = None
    seeds = list(seeds)
    for seed in seeds:
        scale = sample_mismatch(sigma, seed, module.n_cells, module.sigma_is_variance)
        c = module_iv(module.with_scale(scale), per_cell_photocurrents,
                      per_cell_temps_c, voltages)
        total = c.current_a if total is None else total + c.current_a
    return IVCurve(c.voltage_v, total / len(seeds))


# --------------------------------------------------------------------------
# calibration

STC_TARGETS = {"cell_eff_stc": 0.385, "module_eff_stc": 0.28, "ff_stc": 0.834}
STC_DNI = 1000.0
STC_TEMP_C = 25.0


def _scaled_cell(cell, j01_factor, rsh_factor, eta):
    subs = tuple(replace(s, j01=s.j01 * j01_factor, rsh_ohm=s.rsh_ohm * rsh_factor)
                 for s in cell.subcells)
    return replace(cell, subcells=subs, optical_efficiency=eta)


def _stc_performance(cell, r_int, spectrum, n_cells):
    one = ModuleModel(cells=(cell,))
    il_cell = cell_photocurrents(cell, spectrum, optical_efficiency=1.0)
    c1 = module_iv(one, il_cell[None, :], STC_TEMP_C)
    cell_eff = c1.metrics.p_mp_w / (STC_DNI * cell.aperture_m2)
    mod = ModuleModel(cells=(cell,) * n_cells, interconnect_rs_ohm=r_int)
    il = np.tile(cell_photocurrents(cell, spectrum), (n_cells, 1))
    cm = module_iv(mod, il, STC_TEMP_C)
    module_eff = cm.metrics.p_mp_w / (STC_DNI * mod.aperture_m2)
    return cell_eff, module_eff, cm.metrics.fill_factor


def calibrate_reference(targets=None, cell=None, spectrum=None, n_cells=N_CELLS,
                        interconnect_rs_ohm=0.01, max_rounds=40, rtol=1e-4):
    """Tune a healthy module against its rated STC performance.

    Three knobs are adjusted in turn until every target agrees to ``rtol``:

    * a common multiplier on the subcells' j01, which sets Voc and hence the
      bare-cell efficiency (cell measured without concentrator losses);
    * a common multiplier on the subcells' shunt resistance, which sets the
      module fill factor while leaving the slope near Voc series-dominated;
    * the optical efficiency, which sets the module efficiency.

    ``interconnect_rs_ohm`` is held fixed.

    STC here is 1000 W/m2 of the AM1.5D reference spectrum and 25 C cells,
    with no cell-current mismatch.

    Raises
    ------
    CalibrationError
        targets inconsistent or not met after ``max_rounds`` passes.
    """
    from .spectral import am15d_reference

    t = dict(STC_TARGETS)
    t.update(targets or {})
    if not (t["module_eff_stc"] < t["cell_eff_stc"] < t["ff_stc"] < 1):
        raise CalibrationError("targets must satisfy module_eff < cell_eff < FF < 1")
    base = cell or default_cell()
    spectrum = spectrum or am15d_reference(STC_DNI)
    a, b, eta = 1.0, 1.0, base.optical_efficiency
    r_int = interconnect_rs_ohm

    def perf(a_, b_, eta_):
        return _stc_performance(_scaled_cell(base, a_, b_, eta_), r_int, spectrum, n_cells)

    def solve(fn, lo, hi, what):
        f_lo, f_hi = fn(lo), fn(hi)
        if f_lo * f_hi > 0:
            raise CalibrationError(f"cannot bracket {what}", residuals={what: (f_lo, f_hi)})
        return brentq(fn, lo, hi, xtol=1e-12, rtol=1e-10)

    res = {}
    for _ in range(max_rounds):
        a = math.exp(solve(lambda x: perf(math.exp(x), b, eta)[0] - t["cell_eff_stc"],
                           -12.0, 12.0, "cell efficiency"))
        b = math.exp(solve(lambda x: perf(a, math.exp(x), eta)[2] - t["ff_stc"],
                           -12.0, 6.0, "fill factor"))
        eta = solve(lambda x: perf(a, b, x)[1] - t["module_eff_stc"], 0.05, 1.0,
                    "module efficiency")
        cell_eff, module_eff, ff = perf(a, b, eta)
        res = {"cell_eff_stc": cell_eff / t["cell_eff_stc"] - 1,
               "module_eff_stc": module_eff / t["module_eff_stc"] - 1,
               "ff_stc": ff / t["ff_stc"] - 1}
        if max(abs(r) for r in res.values()) < rtol:
            return ModuleModel(cells=(_scaled_cell(base, a, b, eta),) * n_cells,
                               interconnect_rs_ohm=r_int)
    raise CalibrationError("calibration did not converge", residuals=res)


def stc_performance(module, spectrum=None):
    """(cell efficiency, module efficiency, fill factor) of ``module`` at STC."""
    from .spectral import am15d_reference

    spectrum = spectrum or am15d_reference(STC_DNI)
    return _stc_performance(module.cells[0], module.interconnect_rs_ohm, spectrum,
                            module.n_cells)


# cell-to-cell Isc spread of a healthy module in the field
BASELINE_SIGMA = 0.02


@lru_cache(maxsize=4)
def reference_module():
    """Calibrated healthy module with the baseline mismatch spread (cached).

    Calibration itself is done without mismatch, as the rated STC values
    describe a matched module.
    """
    return replace(calibrate_reference(), mismatch_sigma=BASELINE_SIGMA)
