import sys

import numpy as np
import pytest

from fbdsdej.coefficients import canonical_monotone_family
from fbdsdej.noise import Dims, MarkSpace, TreeConfig, build_tree, make_grid

SCALAR = Dims(1, 1, 1, 1)
NO_MARKS = MarkSpace()


def scalar_tree(N, T=1.0, marks=NO_MARKS, dims=SCALAR, **config):
    return build_tree(make_grid(T, N), dims, marks, TreeConfig(**config))


def exp_family(**overrides):
    """The e^{-t} boundary problem: y(t) = Y(t) = exp(-t)."""
    kw = dict(theta1=1.0, theta2=1.0, beta1=1.0, beta2=0.0, psi0=1.0, phi0=0.0)
    kw.update(overrides)
    return canonical_monotone_family(SCALAR, NO_MARKS, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
