from __future__ import annotations

import math

import numpy as np
import pytest

from spikeevo.diagnostics import effective_sample_size, split_rhat


def ar1(rho, n, chains, seed):
    rng = np.random.default_rng(seed)
    x = np.empty((chains, n))
    x[:, 0] = rng.normal(size=chains) / math.sqrt(1 - rho * rho)
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + rng.normal(size=chains)
    return x


def test_rhat_iid_chains():
    x = np.random.default_rng(0).normal(size=(4, 1000))
    assert 0.99 <= split_rhat(x) <= 1.02


def test_rhat_separated_chains():
    rng = np.random.default_rng(1)
    x = np.stack([rng.normal(0, 1, 1000), rng.normal(10, 1, 1000)])
    assert split_rhat(x) > 3


def test_rhat_duplicated_chain():
    chain = np.random.default_rng(2).normal(size=1000)
    assert split_rhat(np.stack([chain, chain])) == pytest.approx(1.0, abs=0.02)


def test_rhat_detects_trend_within_one_chain():
    x = np.linspace(0, 10, 1000) + np.random.default_rng(3).normal(size=1000)
    assert split_rhat(x) > 1.5


def test_ess_iid():
    n = 4000
    x = np.random.default_rng(4).normal(size=(4, n // 4))
    assert 0.8 * n <= effective_sample_size(x) <= 1.2 * n


def test_ess_ar1():
    rho, chains, n = 0.9, 4, 5000
    x = ar1(rho, n, chains, 5)
    expect = chains * n * (1 - rho) / (1 + rho)
    ess = effective_sample_size(x)
    assert expect / 1.5 <= ess <= expect * 1.5


def test_constant_chain_flagged():
    x = np.ones((2, 100))
    assert math.isnan(split_rhat(x))
    assert math.isnan(effective_sample_size(x))
    y = np.stack([np.zeros(100), np.ones(100)])
    assert split_rhat(y) == math.inf


def test_too_few_draws():
    with pytest.raises(ValueError):
        split_rhat(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        effective_sample_size(np.zeros((2, 2, 2)))
