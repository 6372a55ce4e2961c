"""Shared model builders for the test suite.

Two workhorse instances appear throughout:
- one_pair: d=1, w_hat = 1 exactly on the pair +/-2*pi, nothing else;
- two_band: d=1, w_hat = 1 on 0 < |p| <= 4*pi (two mode pairs).
Both keep w_hat(0) = 0 so the leading binding term vanishes and the
next-order physics is visible at machine scale.
"""
from __future__ import annotations

import math

import pytest

from torusbog.model import PotentialSpec, TorusModel

TWO_PI = 2.0 * math.pi


def make_one_pair_model(N: int, lam: float | None = None, cutoff: float = 7.0) -> TorusModel:
    potential = PotentialSpec.from_table({(1,): 1.0, (-1,): 1.0})
    return TorusModel(d=1, N=N, potential=potential, mode_cutoff=cutoff, lam=lam)


def make_two_band_model(N: int, lam: float | None = None) -> TorusModel:
    # Two shells: w_hat = 1 on 0 < |p| <= 4*pi, i.e. integer coordinates +-1, +-2.
    potential = PotentialSpec.band(d=1, radius=2.0 * TWO_PI + 0.1, value=1.0)
    return TorusModel(d=1, N=N, potential=potential, mode_cutoff=2.0 * TWO_PI + 0.1, lam=lam)


@pytest.fixture
def one_pair_model() -> TorusModel:
    return make_one_pair_model(N=8)


@pytest.fixture
def two_band_model() -> TorusModel:
    return make_two_band_model(N=8)
