import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cpvdiag import device as d
from cpvdiag.diagnosis import (
    Condition,
    DiagnosisSettings,
    classify,
    detect_fault_trigger,
    diagnose,
    fit_curve,
    fit_mismatch_sigma,
    fit_series_resistance,
    simulate,
    subcell_current_histogram,
)
from cpvdiag.errors import DiagnosisInfeasible, InputDataError
from cpvdiag.spectral import am15d_reference

SETTINGS = DiagnosisSettings()


@pytest.fixture(scope="module")
def healthy(ref_module):
    return ref_module


@pytest.fixture(scope="module")
def cond(healthy):
    return Condition.from_spectrum(healthy, am15d_reference(900.0), 70.0, label="am15-900")


def synth(healthy, cond, sigma, drs):
    return simulate(healthy, cond, sigma, drs, SETTINGS)


def _metrics(ff):
    return d.IVMetrics(1.0, 1.0, 1.0, 1.0, ff, ff, 0.1)


class TestTrigger:
    @pytest.mark.parametrize("ff, expected", [(0.70, True), (0.79, False), (0.75, False),
                                              (0.7499, True)])
    def test_strict(self, ff, expected):
        assert detect_fault_trigger(_metrics(ff), 0.75) is expected


class TestClassify:
    @pytest.mark.parametrize("sigma, drs, label", [
        (0.02, 0.0, "none"), (0.23, 0.0, "current-mismatch"),
        (0.02, 0.05, "series-resistance"), (0.23, 0.0664, "both"),
        (0.04, 0.01, "none"),
    ])
    def test_labels(self, sigma, drs, label):
        assert classify(sigma, drs, 0.02, 0.01) == label


class TestStages:
    def test_sigma_stage_round_trip(self, healthy, cond):
        measured = synth(healthy, cond, 0.23, 0.0)
        sigma, err = fit_mismatch_sigma(measured, healthy, cond)
        assert sigma == pytest.approx(0.23, abs=0.03)
        assert err < 0.01

    def test_sigma_stage_healthy(self, healthy, cond):
        measured = synth(healthy, cond, healthy.mismatch_sigma, 0.0)
        sigma, _ = fit_mismatch_sigma(measured, healthy, cond)
        assert sigma <= 0.05

    def test_resistance_stage_round_trip(self, healthy, cond):
        measured = synth(healthy, cond, 0.23, 0.0664)
        drs, err = fit_series_resistance(measured, healthy, cond, 0.23,
                                         DiagnosisSettings(vmp_gate_rtol=0.0))
        assert drs == pytest.approx(0.0664, abs=0.01)
        assert err <= 0.05

    def test_resistance_stage_healthy(self, healthy, cond):
        measured = synth(healthy, cond, healthy.mismatch_sigma, 0.0)
        drs, err = fit_series_resistance(measured, healthy, cond, healthy.mismatch_sigma)
        assert drs == 0.0
        assert err <= 0.05


class TestJointFit:
    def test_reference_fault(self, healthy, cond):
        measured = synth(healthy, cond, 0.23, 0.0664)
        sigma, drs, imp_err, vmp_err = fit_curve(measured, healthy, cond)
        assert sigma == pytest.approx(0.23, abs=0.03)
        assert drs == pytest.approx(0.0664, abs=0.01)
        assert imp_err < 0.01 and vmp_err <= 0.05

    def test_mismatch_only(self, healthy, cond):
        measured = synth(healthy, cond, 0.3, 0.0)
        sigma, drs, _, _ = fit_curve(measured, healthy, cond)
        assert sigma == pytest.approx(0.3, abs=0.03)
        assert drs < SETTINGS.rs_floor_ohm

    def test_resistance_only_does_not_alias(self, healthy, cond):
        base = healthy.mismatch_sigma
        ref = synth(healthy, cond, base, 0.0).metrics
        measured = synth(healthy, cond, base, 0.0664)
        assert measured.metrics.i_mp_a == pytest.approx(ref.i_mp_a, rel=0.02)
        assert measured.metrics.v_mp_v < 0.97 * ref.v_mp_v
        sigma, drs, _, _ = fit_curve(measured, healthy, cond)
        assert sigma <= 2 * base
        assert drs == pytest.approx(0.0664, abs=0.01)

    def test_ordering(self, healthy, cond):
        grid = (0.1, 0.15, 0.2, 0.25, 0.3)
        fitted = [fit_curve(synth(healthy, cond, s, 0.05), healthy, cond)[0] for s in grid]
        assert np.all(np.diff(fitted) >= 0)

    def test_unmatchable_curve(self, healthy, cond):
        c = synth(healthy, cond, 0.23, 0.0664)
        stretched = d.IVCurve(1.3 * c.voltage_v, c.current_a)
        with pytest.raises(DiagnosisInfeasible):
            fit_curve(stretched, healthy, cond)


class TestDiagnose:
    def test_empty(self, healthy):
        with pytest.raises(InputDataError):
            diagnose([], healthy)

    def test_healthy_set(self, healthy, cond):
        measured = synth(healthy, cond, healthy.mismatch_sigma, 0.0)
        report = diagnose([(measured, cond)], healthy)
        assert not report.triggered
        assert report.classification == "none"
        assert report.sigma == healthy.mismatch_sigma and report.delta_rs_ohm == 0.0

    def test_json_is_deterministic(self, healthy, cond):
        measured = synth(healthy, cond, healthy.mismatch_sigma, 0.0)
        a = diagnose([(measured, cond)], healthy).to_json()
        b = diagnose([(measured, cond)], healthy).to_json()
        assert a == b
        doc = json.loads(a)
        assert doc["classification"] == "none"
        assert set(doc["gvoc_siemens"]) == {"condition", "measured", "fitted_fault", "healthy"}

    def test_all_infeasible(self, healthy, cond):
        c = synth(healthy, cond, 0.23, 0.0664)
        stretched = d.IVCurve(1.3 * c.voltage_v, c.current_a)
        with pytest.raises(DiagnosisInfeasible):
            diagnose([(stretched, cond)], healthy)

    def test_partial_failure_recorded(self, healthy, cond):
        good = synth(healthy, cond, 0.23, 0.0664)
        bad = d.IVCurve(1.3 * good.voltage_v, good.current_a)
        other = Condition(cond.photocurrents, cond.temps_c, "stretched")
        report = diagnose([(good, cond), (bad, other)], healthy)
        assert report.classification == "both"
        assert [c.converged for c in report.curves] == [True, False]
        assert report.curves[1].error
        assert "stretched" not in report.overlay_csv()

    def test_gvoc_discriminates(self, healthy, cond):
        faulty = synth(healthy, cond, 0.23, 0.0664).metrics.g_voc_siemens
        ok = d.ensemble_iv(healthy, cond.photocurrents, cond.temps_c).metrics.g_voc_siemens
        assert faulty < 0.5 * ok


class TestHistogram:
    def test_counts_and_spread(self, cond):
        h = subcell_current_histogram(cond, 0.23, range(16), 20, 0)
        assert len(h) == 20
        assert sum(n for _, _, n in h) == 16 * 25
        centres = np.array([(lo + hi) / 2 for lo, hi, _ in h])
        counts = np.array([n for _, _, n in h])
        mean = np.average(centres, weights=counts)
        sd = np.sqrt(np.average((centres - mean) ** 2, weights=counts))
        il = cond.photocurrents[0, 0]
        assert mean == pytest.approx(il, rel=0.05)
        assert sd / il == pytest.approx(0.23, abs=0.03)

    def test_variance_reading_is_wider(self, cond):
        # sqrt(0.23) > 0.23, so reading sigma as a variance spreads the currents more
        sd = subcell_current_histogram(cond, 0.23, range(16), 20, 0)
        var = subcell_current_histogram(cond, 0.23, range(16), 20, 0, as_variance=True)
        assert sd[-1][1] - sd[0][0] < var[-1][1] - var[0][0]

    def test_csv(self, healthy, cond):
        measured = synth(healthy, cond, healthy.mismatch_sigma, 0.0)
        text = diagnose([(measured, cond)], healthy).histogram_csv()
        rows = text.strip().splitlines()
        assert rows[0] == "bin_low_a,bin_high_a,count"
        assert len(rows) == 1 + SETTINGS.histogram_bins
        assert_allclose(sum(int(r.split(",")[2]) for r in rows[1:]), 16 * 25)


class TestSettings:
    def test_needs_sixteen_seeds(self):
        with pytest.raises(ValueError):
            DiagnosisSettings(seeds=range(8))

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            DiagnosisSettings(ff_threshold=1.2)
