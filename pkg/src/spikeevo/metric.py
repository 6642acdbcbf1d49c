"""Mass matrices (metrics) for the Hamiltonian sampler.

A metric ``M`` sets the kinetic energy ``p^T M^{-1} p / 2``.  Every metric
offers ``solve`` (apply ``M^{-1}``), ``sample`` (draw ``p ~ N(0, M)``
together with ``M^{-1} p``) and ``update`` (re-estimate from a window of
warmup draws).

:class:`DiagonalMetric` is the usual variance-adapted diagonal metric.
:class:`LevelMetric` adds, for each country, a banded block over the daily
log-ratio levels of the cluster model built from the expected Fisher
information of the windowed multinomial plus the random-walk prior
precision.  Those levels mix daily information (a 14-day band) with a
random-walk prior, which gives a spread of scales that a diagonal metric
cannot absorb.
"""

from __future__ import annotations

import math

import numba
import numpy as np


class DiagonalMetric:
    """Diagonal metric adapted to the sample variance of warmup windows."""

    def __init__(self, dim: int):
        self.dim = dim
        self.inv_diag = np.ones(dim)

    def init(self, q0) -> None:
        """Hook called with the initial point; the diagonal starts at unity."""

    def refresh(self, q) -> bool:
        """Re-linearize at ``q`` during early warmup; returns whether the
        metric changed (a plain diagonal metric never does)."""
        return False

    def solve(self, x: np.ndarray) -> np.ndarray:
        return self.inv_diag * x

    def sample(self, rng: np.random.Generator):
        p = rng.standard_normal(self.dim) / np.sqrt(self.inv_diag)
        return p, self.inv_diag * p

    @staticmethod
    def regularized_variance(draws: np.ndarray) -> np.ndarray:
        """Window variance shrunk towards 1e-3 as in common HMC practice."""
        n = draws.shape[0]
        var = np.var(draws, axis=0)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))

    def update(self, draws: np.ndarray) -> None:
        self.inv_diag = self.regularized_variance(np.asarray(draws))

    def to_dict(self) -> dict:
        return {"kind": "diagonal", "inv_diag": self.inv_diag.tolist()}


# ----------------------------------------------------------- banded algebra


@numba.njit(cache=True)
def band_cholesky(A):
    """In-place lower banded Cholesky; ``A[k, j]`` holds ``M[j + k, j]``."""
    bw1, n = A.shape
    for j in range(n):
        d = A[0, j]
        if not d > 0.0:
            raise ValueError("matrix not positive definite")
        d = math.sqrt(d)
        A[0, j] = d
        kmax = min(bw1 - 1, n - 1 - j)
        for k in range(1, kmax + 1):
            A[k, j] /= d
        for k in range(1, kmax + 1):
            ljk = A[k, j]
            col = j + k
            for r in range(k, kmax + 1):
                A[r - k, col] -= A[r, j] * ljk


@numba.njit(cache=True, fastmath=True)
def band_solve(Rt, x):
    """Solve ``R R^T y = x`` in place; ``Rt[j, k]`` holds ``R[j + k, j]``."""
    n, bw1 = Rt.shape
    for j in range(n):
        x[j] /= Rt[j, 0]
        xj = x[j]
        for k in range(1, min(bw1, n - j)):
            x[j + k] -= Rt[j, k] * xj
    for j in range(n - 1, -1, -1):
        acc = 0.0
        for k in range(1, min(bw1, n - j)):
            acc += Rt[j, k] * x[j + k]
        x[j] = (x[j] - acc) / Rt[j, 0]


@numba.njit(cache=True, fastmath=True)
def band_lower_mul_and_solve_t(Rt, xi, p, v):
    """``p = R xi`` and ``v = R^{-T} xi`` (so that ``v = (R R^T)^{-1} p``)."""
    n, bw1 = Rt.shape
    for i in range(n):
        p[i] = 0.0
    for j in range(n):
        xj = xi[j]
        for k in range(0, min(bw1, n - j)):
            p[j + k] += Rt[j, k] * xj
    for j in range(n - 1, -1, -1):
        acc = 0.0
        for k in range(1, min(bw1, n - j)):
            acc += Rt[j, k] * v[j + k]
        v[j] = (xi[j] - acc) / Rt[j, 0]


@numba.njit(cache=True)
def _apply_blocks(R, idx, x, out):
    buf = np.empty(idx.shape[1])
    for i in range(idx.shape[0]):
        for j in range(idx.shape[1]):
            buf[j] = x[idx[i, j]]
        band_solve(R[i], buf)
        for j in range(idx.shape[1]):
            out[idx[i, j]] = buf[j]


@numba.njit(cache=True)
def _sample_blocks(R, idx, xi, p, v):
    n = idx.shape[1]
    bx = np.empty(n)
    bp = np.empty(n)
    bv = np.empty(n)
    for i in range(idx.shape[0]):
        for j in range(n):
            bx[j] = xi[idx[i, j]]
        band_lower_mul_and_solve_t(R[i], bx, bp, bv)
        for j in range(n):
            p[idx[i, j]] = bp[j]
            v[idx[i, j]] = bv[j]


@numba.njit(cache=True)
def level_precision(lev, totals, W, prior_prec, a):
    """Banded precision of the daily log-ratio levels of each country.

    ``lev`` is (K, T, C-1), ``totals`` (K, T), ``prior_prec`` (K,) the
    conditional random-walk precision of each country's innovations and
    ``a`` the Dirichlet parameters of the day-1 proportions.  Rows are
    ordered day-major.  Returns (K, bw + 1, T (C-1)) lower band storage.
    """
    K, T, D = lev.shape
    C = D + 1
    n = T * D
    bw = (W - 1) * D + D - 1
    out = np.zeros((K, bw + 1, n))
    p = np.empty((T, C))
    A = np.empty((T, C, D))
    pbar = np.empty(C)
    a_sum = a.sum()
    for i in range(K):
        M = out[i]
        for s in range(T):
            mx = 0.0
            for c in range(D):
                if lev[i, s, c] > mx:
                    mx = lev[i, s, c]
            norm = math.exp(-mx)
            p[s, 0] = norm
            for c in range(D):
                e = math.exp(lev[i, s, c] - mx)
                p[s, c + 1] = e
                norm += e
            for c in range(C):
                p[s, c] /= norm
            # softmax Jacobian restricted to the free coordinates
            for c in range(C):
                for k in range(D):
                    A[s, c, k] = p[s, c] * ((1.0 if c == k + 1 else 0.0) - p[s, k + 1])
        for t in range(T):
            nt = totals[i, t]
            if nt <= 0:
                continue
            lo = max(0, t - W + 1)
            w = t - lo + 1
            for c in range(C):
                acc = 0.0
                for s in range(lo, t + 1):
                    acc += p[s, c]
                pbar[c] = acc / w
            scale = nt / (w * w)
            for s in range(lo, t + 1):
                for s2 in range(lo, s + 1):
                    for k in range(D):
                        for k2 in range(D):
                            if s2 == s and k2 > k:
                                continue
                            acc = 0.0
                            for c in range(C):
                                if pbar[c] > 0.0:
                                    acc += A[s, c, k] * A[s2, c, k2] / pbar[c]
                            row = s * D + k
                            col = s2 * D + k2
                            M[row - col, col] += scale * acc
        # Dirichlet curvature on day 1
        for k in range(D):
            for k2 in range(k + 1):
                h = p[0, k + 1] * ((1.0 if k == k2 else 0.0) - p[0, k2 + 1])
                M[k - k2, k2] += a_sum * h
        # random-walk prior between consecutive days
        q = prior_prec[i]
        for t in range(1, T):
            for k in range(D):
                r = t * D + k
                M[0, r] += q
                M[0, r - D] += q
                M[D, r - D] -= q
        for r in range(n):
            M[0, r] += 1e-8
    return out


class LevelMetric(DiagonalMetric):
    """Diagonal metric with banded per-country blocks over the levels.

    Parameters
    ----------
    model : spikeevo.model.PosteriorModel
        Must use the centered parameterization, where the day-1 log-ratios
        and the latent block together are the daily levels.
    """

    def __init__(self, model):
        if model.parameterization != "centered":
            raise ValueError("LevelMetric needs the centered parameterization")
        super().__init__(model.dim)
        self.model = model
        K, T, C = model.shape
        D = C - 1
        sl = model.layout.slices
        idx = np.empty((K, T * D), dtype=np.int64)
        for i in range(K):
            idx[i, :D] = sl["p1"].start + i * D + np.arange(D)
            idx[i, D:] = sl["latent"].start + i * (T - 1) * D + np.arange((T - 1) * D)
        self.idx = idx
        self.R = None

    def _factor(self, q) -> None:
        model = self.model
        K, T, C = model.shape
        params = model.constrain(q)
        lev = model.levels(q)
        prec = np.empty(K)
        for b, blk in enumerate(model.blocks):
            om_inv = np.linalg.inv(params.omega[b])
            prec[blk] = np.diag(om_inv) / params.sigma[b] ** 2
        totals = model.counts.counts.sum(axis=-1).astype(float)
        R = level_precision(lev, totals, model.window, prec,
                            np.asarray(model.cfg.dirichlet_alpha, dtype=float))
        for i in range(K):
            band_cholesky(R[i])
        self.R = np.ascontiguousarray(R.transpose(0, 2, 1))

    def init(self, q0) -> None:
        self._factor(np.asarray(q0, dtype=float))

    def refresh(self, q) -> bool:
        self._factor(np.asarray(q, dtype=float))
        return True

    def update(self, draws: np.ndarray) -> None:
        draws = np.asarray(draws)
        super().update(draws)
        self._factor(draws.mean(axis=0))

    def solve(self, x: np.ndarray) -> np.ndarray:
        out = self.inv_diag * x
        _apply_blocks(self.R, self.idx, x, out)
        return out

    def sample(self, rng: np.random.Generator):
        xi = rng.standard_normal(self.dim)
        p = xi / np.sqrt(self.inv_diag)
        v = self.inv_diag * p
        _sample_blocks(self.R, self.idx, xi, p, v)
        return p, v

    def to_dict(self) -> dict:
        return {"kind": "level-banded", "inv_diag": self.inv_diag.tolist(),
                "bandwidth": int(self.R.shape[2] - 1) if self.R is not None else None}
