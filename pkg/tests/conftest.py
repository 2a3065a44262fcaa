import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cpvdiag import device  # noqa: E402
from cpvdiag.spectral import am15d_reference  # noqa: E402


@pytest.fixture(scope="session")
def ref_module():
    return device.reference_module()


@pytest.fixture(scope="session")
def faulty_module(ref_module):
    return ref_module.with_fault(True, mismatch_sigma=0.23, delta_rs_ohm=0.0664)


@pytest.fixture(scope="session")
def il_900(ref_module):
    """Per-cell photocurrents under 900 W/m2 of the reference spectrum."""
    return device.module_photocurrents(ref_module, am15d_reference(900.0))


@pytest.fixture(scope="session")
def fixture_dir():
    from cpvdiag.fixtures import fixture_path
    return fixture_path("")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """``record(number, ok, detail)``: note a criterion's outcome, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, ok, detail):
        lines.append((number, f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"))
        print(lines[-1][1])
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
