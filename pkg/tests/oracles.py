"""Independent reference solutions used by the tests.

The nodal solver below treats a short string as one nonlinear system (all
junction voltages, stack currents and the string current as unknowns) and
walks the voltage sweep with scipy's hybrid Powell method, starting each
point from the previous solution.  It shares no code with the tabulated
current-parameterised solver under test beyond the parameter classes.
"""
import numpy as np
from scipy import constants
from scipy.optimize import brentq, root

Q = constants.elementary_charge
K_B = constants.Boltzmann


def _vt(temp_c):
    return K_B * (temp_c + 273.15) / Q


class NodalString:
    """Series string of triple-junction cells with antiparallel bypass diodes.

    Unknowns, per cell ``c``: junction voltages ``x[4c:4c+3]`` and stack
    current ``x[4c+3]``; last entry: the string current.
    """

    def __init__(self, cells, photocurrents, temps_c, extra_rs=None, series_rs_ohm=0.0):
        n = len(cells)
        il = np.asarray(photocurrents, float).reshape(n, 3)
        temps = np.broadcast_to(np.asarray(temps_c, float), (n,))
        extra = np.zeros((n, 3)) if extra_rs is None else np.asarray(extra_rs, float)
        self.n = n
        self.il = il
        self.series_rs = series_rs_ohm
        self.vt = np.array([_vt(t) for t in temps])
        self.i01 = np.empty((n, 3))
        self.i02 = np.empty((n, 3))
        self.rsh = np.empty((n, 3))
        self.rs = np.empty((n, 3))
        self.bp_is = np.empty(n)
        self.bp_n = np.empty(n)
        for c, cell in enumerate(cells):
            for k, sub in enumerate(cell.subcells):
                self.i01[c, k], self.i02[c, k] = sub.saturation_currents(temps[c])
                self.rsh[c, k] = sub.rsh_ohm
                self.rs[c, k] = sub.rs_ohm + extra[c, k]
            self.bp_is[c] = cell.bypass.saturation_current_a
            self.bp_n[c] = cell.bypass.ideality

    def residual(self, x, v_term):
        n = self.n
        vj = x[:4 * n].reshape(n, 4)[:, :3]
        i_s = x[:4 * n].reshape(n, 4)[:, 3]
        i_str = x[-1]
        vt = self.vt[:, None]
        dark = (self.i01 * np.expm1(vj / vt) + self.i02 * np.expm1(vj / (2 * vt))
                + vj / self.rsh)
        f_junction = self.il - dark - i_s[:, None]
        v_cell = np.sum(vj - i_s[:, None] * self.rs, axis=1)
        f_bypass = i_str - i_s - self.bp_is * np.expm1(-v_cell / (self.bp_n * self.vt))
        f_kvl = np.sum(v_cell) - i_str * self.series_rs - v_term
        return np.concatenate([np.column_stack([f_junction, f_bypass]).ravel(), [f_kvl]])

    def open_circuit_state(self):
        """Consistent state at zero string current, junction by junction."""
        x = np.zeros(4 * self.n + 1)
        for c in range(self.n):
            vt = self.vt[c]
            for k in range(3):
                def f(v, c=c, k=k):
                    return (self.i01[c, k] * np.expm1(v / vt)
                            + self.i02[c, k] * np.expm1(v / (2 * vt))
                            + v / self.rsh[c, k] - self.il[c, k])
                x[4 * c + k] = brentq(f, -1.0, 5.0, xtol=1e-15)
        return x

    def _solve(self, x, v, depth=0):
        sol = root(self.residual, x, args=(v,), method="hybr",
                   options={"xtol": 1e-12, "maxfev": 50000})
        # judge by the residual itself; hybr may stop on its own xtol first
        if np.max(np.abs(self.residual(sol.x, v))) < 1e-9:
            return sol.x
        if depth >= 12:
            raise RuntimeError(f"nodal solve failed at V={v}: {sol.message}")
        # halve the continuation step and try again
        v_here = np.sum(self._cell_voltages(x)) - x[-1] * self.series_rs
        mid = self._solve(x, 0.5 * (v_here + v), depth + 1)
        return self._solve(mid, v, depth + 1)

    def _cell_voltages(self, x):
        n = self.n
        vj = x[:4 * n].reshape(n, 4)[:, :3]
        i_s = x[:4 * n].reshape(n, 4)[:, 3]
        return np.sum(vj - i_s[:, None] * self.rs, axis=1)

    def sweep(self, voltages):
        """String current at each voltage, by continuation from open circuit."""
        voltages = np.asarray(voltages, float)
        x0 = self.open_circuit_state()
        v0 = float(np.sum(self._cell_voltages(x0)))
        x0 = self._solve(x0, v0)
        order = np.argsort(voltages)
        split = int(np.searchsorted(voltages[order], v0))
        out = np.empty(voltages.size)
        for seq in (order[:split][::-1], order[split:]):
            x = x0
            for idx in seq:
                x = self._solve(x, voltages[idx])
                out[idx] = x[-1]
        return out


def nodal_string_iv(cells, photocurrents, temps_c, voltages, extra_rs=None,
                    series_rs_ohm=0.0):
    return NodalString(cells, photocurrents, temps_c, extra_rs, series_rs_ohm).sweep(voltages)
