import itertools

import numpy as np
import pytest

_H = np.array([1.0, 0.0])
_V = np.array([0.0, 1.0])
SINGLET = (np.kron(_H, _V) - np.kron(_V, _H)) / np.sqrt(2)


def polarizer_ket(theta_deg, parallel=True):
    t = np.radians(theta_deg)
    if parallel:
        return np.array([np.cos(t), np.sin(t)])
    return np.array([-np.sin(t), np.cos(t)])


def statevector_cells(alpha, beta, visibility=1.0):
    """Oracle: project the singlet state vector onto analyzer eigenstates."""
    out = {}
    for (na, xa), (nb, xb) in itertools.product((("p", True), ("m", False)), repeat=2):
        amp = np.kron(polarizer_ket(alpha, xa), polarizer_ket(beta, xb)) @ SINGLET
        out[na + nb] = visibility * amp**2 + (1 - visibility) / 4
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
