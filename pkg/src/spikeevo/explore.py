"""Descriptive products: overall cluster composition per country and
LOESS-smoothed daily curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .ingest import CountSeries


@dataclass(frozen=True)
class SmoothSpec:
    """LOESS settings: ``span`` is the fraction of points in each local
    fit and ``degree`` the local polynomial degree."""

    span: float = 0.75
    degree: int = 2

    def __post_init__(self):
        if not 0.0 < self.span <= 1.0:
            raise ValueError("span must lie in (0, 1]")
        if self.degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")


def composition(counts: CountSeries, country: str) -> np.ndarray:
    """Share of each cluster among all sequences of ``country``."""
    totals = counts.counts[counts.country_index(country)].sum(axis=0).astype(float)
    if totals.sum() == 0:
        raise ValueError(f"country {country!r} has no sequences")
    return totals / totals.sum()


def composition_table(counts: CountSeries) -> pd.DataFrame:
    rows = []
    for country in counts.countries:
        y = counts.counts[counts.country_index(country)].sum(axis=0)
        if y.sum() == 0:
            continue
        for c, (n, p) in enumerate(zip(y, y / y.sum()), start=1):
            rows.append({"country": country, "cluster": c, "sequences": int(n), "proportion": p})
    return pd.DataFrame(rows, columns=["country", "cluster", "sequences", "proportion"])


def loess(xs, ys, spec: SmoothSpec = SmoothSpec(), at=None) -> np.ndarray:
    """Local polynomial regression with tricube weights.

    Each fit uses the ``ceil(span * n)`` nearest neighbours of the
    evaluation point, weighted by ``(1 - (d / d_max)^3)^3`` where ``d_max``
    is the distance to the farthest of them.  No robustness iterations.

    Parameters
    ----------
    xs, ys : array_like
        Observations.
    spec : SmoothSpec
    at : array_like, optional
        Evaluation points; defaults to ``xs``.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and of equal length")
    if len(np.unique(x)) < spec.degree + 2:
        raise ValueError(f"need at least {spec.degree + 2} distinct x values")
    n = len(x)
    q = min(n, max(int(np.ceil(spec.span * n)), spec.degree + 1))
    at = x if at is None else np.asarray(at, dtype=float)
    scale = max(np.ptp(x), 1.0)
    out = np.empty(len(at))
    for k, x0 in enumerate(at):
        d = np.abs(x - x0)
        idx = np.argsort(d, kind="stable")[:q]
        dmax = d[idx].max()
        if dmax == 0:
            out[k] = y[idx].mean()
            continue
        w = (1.0 - np.clip(d[idx] / (dmax * (1 + 1e-10)), 0, 1) ** 3) ** 3
        # centred, scaled design keeps the local normal equations well conditioned
        u = (x[idx] - x0) / scale
        X = np.vander(u, spec.degree + 1, increasing=True)
        sw = np.sqrt(w)
        beta, *_ = np.linalg.lstsq(X * sw[:, None], y[idx] * sw, rcond=None)
        out[k] = beta[0]
    return out


def smoothed_curves(counts: CountSeries, spec: SmoothSpec = SmoothSpec(),
                    proportions: bool = False) -> pd.DataFrame:
    """Daily counts (or proportions) per country and cluster with their LOESS
    fit over the days that carry data."""
    rows = []
    dates = counts.dates()
    for k, country in enumerate(counts.countries):
        y = counts.counts[k].astype(float)
        n = y.sum(axis=1)
        days = np.flatnonzero(n > 0)
        if len(days) < spec.degree + 2:
            continue
        for c in range(y.shape[1]):
            vals = y[days, c] / n[days] if proportions else y[days, c]
            fit = loess(days + 1.0, vals, spec)
            for d, v, f in zip(days, vals, fit):
                rows.append({"country": country, "date": dates[d].isoformat(), "day": int(d) + 1,
                             "cluster": c + 1, "value": v, "smooth": f})
    return pd.DataFrame(rows, columns=["country", "date", "day", "cluster", "value", "smooth"])
