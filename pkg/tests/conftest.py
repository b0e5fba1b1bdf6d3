import numpy as np
import pytest

from kinspray.coefficients import compute_coefficients
from kinspray.grid import FourierSeries, xgrid
from kinspray.markov_driver import build_driver, load_driver, telegraph_driver

NX = 64


@pytest.fixture(scope="session")
def x():
    return xgrid(NX)


@pytest.fixture(scope="session")
def telegraph():
    return telegraph_driver(0.5, 0.5, NX)


@pytest.fixture(scope="session")
def telegraph_coeffs(telegraph):
    return compute_coefficients(telegraph)


@pytest.fixture(scope="session")
def three_state():
    return load_driver("three_state", NX)


@pytest.fixture(scope="session")
def three_coeffs(three_state):
    return compute_coefficients(three_state)


@pytest.fixture(scope="session")
def zero_driver():
    return build_driver([FourierSeries()], [[1.0]], xgrid(NX))


def zscore(samples, target):
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    return (samples.mean() - target) / se
