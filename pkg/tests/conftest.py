import sys

import numpy as np
import pytest

from csma_mpr.model import AllOrNothingMpr, ClassSpec, Scenario

HIGH_Q = (0.96, 0.89)
SCF_6DB_Q = (0.78, 0.57)


def two_class(n1, n2, lam, p, q, kappa=10, tau=None):
    return Scenario([ClassSpec(lam[0], p[0], n1), ClassSpec(lam[1], p[1], n2)],
                    AllOrNothingMpr(tuple(q)), kappa=kappa, tau=tau)


def limiting(betas, lam_tilde, p_tilde, q, tau=10):
    classes = [ClassSpec(l, p, fraction=b) for b, l, p in zip(betas, lam_tilde, p_tilde)]
    return Scenario(classes, AllOrNothingMpr(tuple(q)), kappa=tau, tau=tau, mode="limiting")


@pytest.fixture
def saturated_pair():
    return lambda p1: two_class(10, 10, (1.0, 1.0), (p1, 0.2), HIGH_Q)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "REPORT", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.REPORT:
        terminalreporter.write_line(line)
