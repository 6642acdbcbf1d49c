from __future__ import annotations

import datetime as dt

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spikeevo.explore import (SmoothSpec, composition, composition_table, loess,
                              smoothed_curves)
from spikeevo.ingest import CountSeries


def series(per_country):
    y = np.asarray(per_country)
    return CountSeries([f"K{i}" for i in range(len(y))], dt.date(2020, 3, 1), y)


def test_composition_examples():
    y = np.zeros((3, 4, 5), dtype=int)
    y[0, :, 2] = 5
    y[1, 0] = [10, 30, 0, 0, 60]
    y[2, 1] = [4, 4, 4, 4, 4]
    s = series(y)
    np.testing.assert_allclose(composition(s, "K0"), [0, 0, 1, 0, 0])
    np.testing.assert_allclose(composition(s, "K1"), [0.1, 0.3, 0, 0, 0.6])
    np.testing.assert_allclose(composition(s, "K2"), 0.2)
    table = composition_table(s)
    np.testing.assert_allclose(table.groupby("country").proportion.sum(), 1.0)


def test_composition_of_empty_country():
    with pytest.raises(ValueError):
        composition(series(np.zeros((1, 3, 5), dtype=int)), "K0")


def test_smooth_spec_validation():
    with pytest.raises(ValueError):
        SmoothSpec(span=0)
    with pytest.raises(ValueError):
        SmoothSpec(degree=3)


@given(st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([1, 2]),
       st.floats(0.2, 1.0))
def test_loess_reproduces_lines(a, b, degree, span):
    x = np.linspace(0, 50, 40)
    np.testing.assert_allclose(loess(x, a + b * x, SmoothSpec(span, degree)), a + b * x,
                               atol=1e-10 * (1 + abs(a) + 50 * abs(b)))


def test_loess_reproduces_quadratics_and_constants():
    x = np.sort(np.random.default_rng(0).uniform(0, 10, 60))
    y = 1.0 - 0.5 * x + 0.2 * x * x
    np.testing.assert_allclose(loess(x, y, SmoothSpec(0.4, 2)), y, atol=1e-9)
    np.testing.assert_allclose(loess(x, np.full(60, 3.0), SmoothSpec(0.3, 1)), 3.0)


def test_loess_denoises_sine():
    rng = np.random.default_rng(1)
    x = np.linspace(0, 2 * np.pi, 200)
    truth = np.sin(x)
    y = truth + rng.normal(scale=0.3, size=x.size)
    fit = loess(x, y, SmoothSpec(0.3, 2))
    assert np.sqrt(np.mean((fit - truth) ** 2)) < np.sqrt(np.mean((y - truth) ** 2))


def test_loess_needs_enough_points():
    with pytest.raises(ValueError):
        loess([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], SmoothSpec(degree=2))
    with pytest.raises(ValueError):
        loess([1.0, 2.0], [1.0])


def test_smoothed_curves_skip_empty_days():
    y = np.random.default_rng(2).integers(0, 20, size=(1, 30, 3))
    y[0, 10:15] = 0
    curves = smoothed_curves(series(y), SmoothSpec(0.5, 1), proportions=True)
    assert set(curves.day) == set(range(1, 31)) - set(range(11, 16))
    assert curves.date.iloc[0] == "2020-03-01"
    sums = curves.groupby("day").value.sum()
    np.testing.assert_allclose(sums[sums > 0], 1.0)
