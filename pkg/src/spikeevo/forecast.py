"""Cluster proportions reconstructed from posterior draws.

Every draw of ``(alpha, p1, eps)`` fixes a trajectory through the
log-ratio dynamics.  Days past the end of the series are filled by drawing
innovations from the prior noise model of the same draw, so bands widen
with the horizon.  Days inside the series without data need no special
handling: their innovations are already part of the posterior.
"""

from __future__ import annotations

import datetime as dt
from typing import Sequence

import numpy as np
import pandas as pd

from .ingest import CountSeries
from .infer import PosteriorChains, quantile
from .model import log_alr_inv, window_probs

BAND_COLUMNS = ["country", "date", "day", "cluster", "mean", "lo", "hi", "observed"]


def _meta(chains: PosteriorChains) -> dict:
    meta = chains.metadata
    for key in ("countries", "start_date", "days", "clusters", "continents"):
        if key not in meta:
            raise KeyError(f"chains metadata lacks {key!r}; were they produced by the model?")
    return meta


def _draws(chains: PosteriorChains, name: str) -> np.ndarray:
    if name not in chains.groups:
        raise KeyError(f"chains do not contain the {name!r} block")
    g = chains.group(name)
    return g.reshape(-1, g.shape[-1])


def _block_of(meta: dict, country: str) -> tuple:
    for b, (name, members) in enumerate(meta["continents"].items()):
        if country in members:
            return b, name
    raise KeyError(f"country {country!r} is in no continent block")


def trajectory_draws(chains: PosteriorChains, country: str, horizon: int = 0,
                     seed: int = 0) -> np.ndarray:
    """Proportion trajectories ``(draws, T + horizon, C)`` for one country.

    Future innovations are drawn from ``N(0, sigma_b^2)`` per cluster, the
    marginal of the block's noise model for this country, from a random
    stream fixed by ``(seed, country index)``.
    """
    meta = _meta(chains)
    countries = list(meta["countries"])
    if country not in countries:
        raise KeyError(f"unknown country {country!r}")
    i = countries.index(country)
    K, T, C = len(countries), int(meta["days"]), int(meta["clusters"])
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    alpha = _draws(chains, "alpha")
    p1 = _draws(chains, "p1").reshape(-1, K, C)[:, i]
    eps = _draws(chains, "eps").reshape(-1, K, T - 1, C - 1)[:, i]
    S = alpha.shape[0]
    steps = alpha[:, None, :] + eps
    if horizon:
        b, name = _block_of(meta, country)
        sigma = chains.group("sigma").reshape(S, -1)[:, b]
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        future = rng.standard_normal((S, horizon, C - 1)) * sigma[:, None, None]
        steps = np.concatenate([steps, alpha[:, None, :] + future], axis=1)
    logp1 = np.log(np.maximum(p1, np.finfo(float).tiny))
    levels = (logp1[:, 1:] - logp1[:, :1])[:, None, :] + np.concatenate(
        [np.zeros((S, 1, C - 1)), np.cumsum(steps, axis=1)], axis=1)
    return np.exp(log_alr_inv(levels))


def latent_bands(chains: PosteriorChains, counts: CountSeries | None = None, *,
                 countries: Sequence[str] | None = None, horizon: int = 0,
                 windowed: bool = False, level: float = 0.95, seed: int = 0) -> pd.DataFrame:
    """Pointwise posterior mean and credible band of cluster proportions.

    Parameters
    ----------
    chains : PosteriorChains
        Must include the ``eps`` block.
    counts : CountSeries, optional
        When given, marks each row with whether that day had data.
    horizon : int
        Days to project past the end of the series.
    windowed : bool
        Report the trailing-window average that enters the likelihood
        instead of the daily proportion.
    level : float
        Central interval probability.

    Returns
    -------
    DataFrame
        Tidy rows ``country, date, day, cluster, mean, lo, hi, observed``.
    """
    meta = _meta(chains)
    start = dt.date.fromisoformat(meta["start_date"])
    window = int(meta.get("window", 14))
    countries = list(countries or meta["countries"])
    q = [(1 - level) / 2, (1 + level) / 2]
    frames = []
    for country in countries:
        traj = trajectory_draws(chains, country, horizon, seed)
        if windowed:
            traj = window_probs(traj, window)
        n_days, C = traj.shape[1:]
        lo, hi = quantile(traj, q[0], axis=0), quantile(traj, q[1], axis=0)
        mean = traj.mean(axis=0)
        observed = np.zeros(n_days, dtype=bool)
        if counts is not None:
            k = counts.country_index(country)
            tot = counts.counts[k].sum(axis=-1)
            observed[: len(tot)] = tot > 0
        days = np.repeat(np.arange(1, n_days + 1), C)
        frames.append(pd.DataFrame({
            "country": country,
            "date": [(start + dt.timedelta(days=int(d) - 1)).isoformat() for d in days],
            "day": days,
            "cluster": np.tile(np.arange(1, C + 1), n_days),
            "mean": mean.ravel(),
            "lo": np.clip(lo.ravel(), 0.0, 1.0),
            "hi": np.clip(hi.ravel(), 0.0, 1.0),
            "observed": np.repeat(observed, C),
        }))
    return pd.concat(frames, ignore_index=True)[BAND_COLUMNS]


def posterior_predictive(chains: PosteriorChains, country: str, day: int, n: int,
                         seed: int = 0, windowed: bool = True) -> np.ndarray:
    """Replicated count vectors ``(draws, C)`` for ``n`` sequences on ``day``.

    ``day`` is 1-based and may lie past the end of the series.  Each draw
    contributes one multinomial vector with the window-averaged
    probabilities of its trajectory (daily proportions if ``windowed`` is
    false).
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    meta = _meta(chains)
    T = int(meta["days"])
    if day < 1:
        raise ValueError("days are 1-based")
    traj = trajectory_draws(chains, country, max(0, day - T), seed)
    if windowed:
        traj = window_probs(traj, int(meta.get("window", 14)))
    p = traj[:, day - 1]
    p = p / p.sum(axis=1, keepdims=True)
    i = list(meta["countries"]).index(country)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1 + i, day]))
    return rng.multinomial(n, p)


def fit_agreement(bands: pd.DataFrame, counts: CountSeries, min_total: int = 200) -> float:
    """Mean absolute gap between windowed posterior means and observed
    frequencies on days with at least ``min_total`` sequences."""
    gaps = []
    for country, sub in bands.groupby("country", sort=False):
        k = counts.country_index(country)
        y = counts.counts[k]
        n = y.sum(axis=1)
        mean = sub.sort_values(["day", "cluster"])["mean"].to_numpy().reshape(-1, y.shape[1])
        keep = n >= min_total
        if keep.any():
            gaps.append(np.abs(mean[: len(n)][keep] - y[keep] / n[keep, None]).ravel())
    return float(np.concatenate(gaps).mean()) if gaps else float("nan")
