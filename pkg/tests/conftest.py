"""Shared builders for the test suite.

Most tests want the same small market and a handful of kernels; building
them in one place keeps the individual files focused on what they assert.
"""

import numpy as np
import pytest

from stickywage.income import HistorySegment
from stickywage.measures import RadonMeasure
from stickywage.params import MarketParams


def make_params(**overrides):
    base = dict(
        r=0.04, mortality=0.02, impatience=0.045, gamma=2.0,
        bequest_weight=1.0,
        mu=np.array([0.07]), sigma=np.array([[0.2]]),
        income_drift=0.0, income_vol=0.15,
        corr_market=np.array([[1.0]]), corr_extra=None,
    )
    base.update(overrides)
    return MarketParams(**base)


def atomic_kernel(d=1.0, weight=0.02, at=-0.5):
    return RadonMeasure(d=d, atoms=[(at, weight)], density=[])


def density_kernel(d=1.0, level=0.04, lo=-0.75, hi=-0.25):
    return RadonMeasure(d=d, atoms=[],
                        density=[(-d, 0.0), (lo, level), (hi, 0.0)])


def mixed_kernel(d=1.0):
    return RadonMeasure(d=d, atoms=[(-0.5, 0.01)],
                        density=[(-d, 0.0), (-0.75, 0.02), (-0.25, 0.0)])


@pytest.fixture
def params():
    return make_params()


@pytest.fixture
def flat_history():
    return HistorySegment.constant(d=1.0, h=0.01, level=1.0)


@pytest.fixture
def mixed():
    return mixed_kernel()
