"""Convergence diagnostics for multi-chain MCMC output.

Both statistics work on a ``(chains, draws)`` array.  Chains are split in
half before comparison so that within-chain trends are detected as well as
disagreement between chains.  Degenerate input (a constant series) returns
``nan``, which callers treat as a flag.
"""

from __future__ import annotations

import numpy as np


def _split(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected a (chains, draws) array")
    n = x.shape[1]
    if n < 4:
        raise ValueError("need at least 4 draws per chain")
    half = n // 2
    # an odd middle draw is dropped so both halves have equal length
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def split_rhat(x) -> float:
    """Split potential scale reduction factor.

    Parameters
    ----------
    x : array_like
        ``(chains, draws)`` samples of one scalar quantity.  A single chain
        is allowed; its two halves are compared.

    Returns
    -------
    float
        Close to 1 at convergence.  ``nan`` when every split chain has
        zero variance and all chains agree; ``inf`` when within-chain
        variance is zero but the chains disagree.
    """
    s = _split(x)
    m, n = s.shape
    means = s.mean(axis=1)
    W = s.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return float("nan") if B == 0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance of each row via FFT (biased normalization)."""
    m, n = x.shape
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, n=size, axis=1)
    ac = np.fft.irfft(f * np.conjugate(f), n=size, axis=1)[:, :n]
    return ac / n


def effective_sample_size(x) -> float:
    """Bulk effective sample size with Geyer's initial monotone sequence.

    Autocorrelations are combined across split chains as in the
    multi-chain estimator; pairs of consecutive autocorrelations are summed
    until the first negative pair and forced to be nonincreasing.

    Returns ``nan`` for a constant series.
    """
    s = _split(x)
    m, n = s.shape
    acov = _autocov(s)
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = chain_var.mean()
    means = s.mean(axis=1)
    var_plus = W * (n - 1.0) / n
    if m > 1:
        var_plus += means.var(ddof=1)
    if not var_plus > 0:
        return float("nan")
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sums of adjacent pairs, truncated at the first negative one
    t = 0
    pair_sums = []
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        pair_sums.append(p)
        t += 2
    pair_sums = np.minimum.accumulate(np.asarray(pair_sums)) if pair_sums else np.array([1.0])
    tau = -1.0 + 2.0 * pair_sums.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)
