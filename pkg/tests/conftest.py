import numpy as np
import pytest

from sdde_lab.model import DelaySystem, InitialSegment, StepController
from sdde_lab.problems import get_problem


def assert_bitwise(a, b, what="arrays"):
    """Equality of float arrays including NaN positions, no tolerance."""
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape, f"{what}: shapes {a.shape} != {b.shape}"
    same = (a == b) | (np.isnan(a) & np.isnan(b))
    if not np.all(same):
        k = np.argwhere(~same)[0]
        raise AssertionError(f"{what} differ first at {tuple(k)}: {a[tuple(k)]!r} vs {b[tuple(k)]!r}")


def assert_close(actual, expected, rel=1e-12, abs_=1e-12, what="value"):
    actual, expected = np.asarray(actual, float), np.asarray(expected, float)
    err = np.abs(actual - expected)
    ok = (err <= abs_) | (err <= rel * np.abs(expected))
    if not np.all(ok):
        k = np.argwhere(~np.atleast_1d(ok))[0]
        raise AssertionError(f"{what}: {np.atleast_1d(actual)[tuple(k)]!r} vs "
                             f"{np.atleast_1d(expected)[tuple(k)]!r} (abs err {np.atleast_1d(err)[tuple(k)]:.3g})")


def zero_system(tau=1.0):
    return DelaySystem.from_expressions(["0"], [["0"]], tau=tau, name="zero")


@pytest.fixture
def counterexample():
    return get_problem("counterexample-sdde")


@pytest.fixture
def linear():
    return get_problem("linear-sdde")


@pytest.fixture
def zero():
    return zero_system()


@pytest.fixture
def const_segment():
    return InitialSegment.constant(1.0, 1.0)


def const_ctrl(h, **kw):
    return StepController.constant(h, **kw)
