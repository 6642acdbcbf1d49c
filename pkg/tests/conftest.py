from __future__ import annotations

import datetime as dt

import numpy as np
import pytest
from hypothesis import settings

from spikeevo.ingest import CountSeries
from spikeevo.model import ContinentSpec, PosteriorModel

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def small_counts(K=3, T=20, C=5, seed=0, high=40) -> CountSeries:
    rng = np.random.default_rng(seed)
    n = rng.integers(0, high, size=(K, T))
    n[:, 5] = 0
    y = np.stack([[rng.multinomial(n[i, t], np.full(C, 1.0 / C)) for t in range(T)]
                  for i in range(K)])
    return CountSeries([f"K{i}" for i in range(K)], dt.date(2020, 1, 7), y)


SMALL_CONTINENTS = ContinentSpec.from_mapping({"A": ("K0", "K1"), "B": ("K2",)})


@pytest.fixture
def small_model():
    return PosteriorModel(small_counts(), continents=SMALL_CONTINENTS)


# ------------------------------------------------------------ acceptance log

# criterion number -> list of (part, status, detail); filled by
# test_acceptance.py and printed once per criterion after the run
ACCEPTANCE: dict = {}


def record_acceptance(criterion: int, part: str, status: str, detail: str) -> None:
    ACCEPTANCE.setdefault(criterion, []).append((part, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[crit]
        statuses = {s for _, s, _ in parts}
        overall = "FAIL" if "FAIL" in statuses else "SKIP" if "SKIP" in statuses else "PASS"
        detail = "; ".join(f"{p} {s}: {d}" if p else d for p, s, d in parts)
        terminalreporter.write_line(f"criterion {crit:2d}: {overall} - {detail}")
