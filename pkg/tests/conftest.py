import numpy as np
import pytest

from gbho import datasets
from gbho.lower_level import LloCounter


@pytest.fixture
def analytic():
    return datasets.synth_quadratic()


@pytest.fixture
def counter():
    return LloCounter()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.geomspace(1.0, cond, n)
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)


# acceptance criteria report: one line per criterion after the run

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        verdict = "PASS" if report.passed else "FAIL"
        _ACCEPTANCE[props["criterion"]] = (verdict, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        verdict, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {verdict}  {detail}")
