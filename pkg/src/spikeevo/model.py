"""Hierarchical multinomial time-series model of cluster proportions.

Latent proportions evolve on the additive log-ratio scale (cluster 1 is the
baseline) as a random walk with a common drift ``alpha`` and innovations
that are correlated between countries of the same continent.  Counts on day
``t`` are multinomial with probabilities averaged over a trailing window.

The numpy functions here are the reference implementation of each piece.
:class:`PosteriorModel` evaluates the joint log-density and its gradient on
the unconstrained scale with hand-written adjoints compiled by numba, which
the sampler uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numba
import numpy as np
from scipy import optimize, special, stats

from .ingest import CountSeries

WINDOW = 14
LOG_2PI = math.log(2 * math.pi)


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class PriorConfig:
    dirichlet_alpha: tuple = (3.0, 39.0, 1.0, 1.0, 1.0)
    sigma_scale: float = 0.5
    lkj_eta: float = 2.0
    alpha_prior: str = "flat"
    alpha_sd: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dirichlet_alpha", tuple(float(a) for a in self.dirichlet_alpha))
        if min(self.dirichlet_alpha) <= 0:
            raise ValueError("Dirichlet concentrations must be positive")
        if self.sigma_scale <= 0 or self.lkj_eta <= 0:
            raise ValueError("prior scales must be positive")
        if self.alpha_prior not in ("flat", "normal"):
            raise ValueError(f"alpha_prior must be 'flat' or 'normal', got {self.alpha_prior!r}")
        if self.alpha_prior == "normal" and self.alpha_sd <= 0:
            raise ValueError("alpha_sd must be positive")

    def to_dict(self) -> dict:
        return {"dirichlet_alpha": list(self.dirichlet_alpha), "sigma_scale": self.sigma_scale,
                "lkj_eta": self.lkj_eta, "alpha_prior": self.alpha_prior,
                "alpha_sd": self.alpha_sd}


# Sensitivity scenarios: base priors, Jeffreys-based Dirichlet (1),
# N(0, 1) growth rates (2), and both (3).
SCENARIOS = {
    "base": PriorConfig(),
    "1": PriorConfig(dirichlet_alpha=(2.5, 38.5, 0.5, 0.5, 0.5)),
    "2": PriorConfig(alpha_prior="normal", alpha_sd=1.0),
    "3": PriorConfig(dirichlet_alpha=(2.5, 38.5, 0.5, 0.5, 0.5), alpha_prior="normal",
                     alpha_sd=1.0),
}


@dataclass(frozen=True)
class ContinentSpec:
    """Partition of countries into blocks sharing one noise scale and a
    correlation matrix."""

    names: tuple
    members: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "members", tuple(tuple(m) for m in self.members))
        if len(self.names) != len(self.members):
            raise ValueError("one member list per continent name")
        seen = [c for block in self.members for c in block]
        if len(seen) != len(set(seen)):
            raise ValueError("a country appears in more than one continent")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Sequence[str]]) -> "ContinentSpec":
        return cls(tuple(mapping), tuple(tuple(v) for v in mapping.values()))

    @classmethod
    def singletons(cls, countries: Sequence[str]) -> "ContinentSpec":
        return cls(tuple(countries), tuple((c,) for c in countries))

    def to_dict(self) -> dict:
        return {n: list(m) for n, m in zip(self.names, self.members)}

    def restrict(self, countries: Sequence[str]) -> "ContinentSpec":
        """Blocks for exactly ``countries``, in block order; empty blocks dropped."""
        have = set(countries)
        covered = {c for block in self.members for c in block}
        missing = have - covered
        if missing:
            raise ValueError(f"countries without a continent: {sorted(missing)}")
        pairs = [(n, tuple(c for c in m if c in have)) for n, m in zip(self.names, self.members)]
        pairs = [(n, m) for n, m in pairs if m]
        return ContinentSpec(tuple(n for n, _ in pairs), tuple(m for _, m in pairs))

    def index_blocks(self, countries: Sequence[str]) -> list:
        spec = self.restrict(countries)
        pos = {c: i for i, c in enumerate(countries)}
        return [np.array([pos[c] for c in m], dtype=int) for m in spec.members]


PAPER_CONTINENTS = ContinentSpec.from_mapping({
    "NA": ("US", "CA"),
    "EU": ("UK", "NL", "FR", "SP"),
    "AS": ("CN", "IN"),
    "AU": ("AU",),
})


# ------------------------------------------------------------- parameters


@dataclass
class ModelParams:
    """Constrained parameters.

    ``alpha`` has length C-1 (cluster 1 fixed at 0), ``p1`` is K x C,
    ``sigma`` and ``omega`` have one entry per continent block, and ``eps``
    is K x (T-1) x (C-1).
    """

    alpha: np.ndarray
    p1: np.ndarray
    sigma: np.ndarray
    omega: list
    eps: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.p1 = np.atleast_2d(np.asarray(self.p1, dtype=float))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        self.omega = [np.atleast_2d(np.asarray(o, dtype=float)) for o in self.omega]
        self.eps = np.asarray(self.eps, dtype=float)

    def validate(self, tol: float = 1e-10) -> None:
        if (self.p1 <= 0).any() or np.abs(self.p1.sum(axis=1) - 1).max() > tol:
            raise ValueError("p1 rows must be strictly positive simplices")
        if (self.sigma <= 0).any():
            raise ValueError("sigma must be positive")
        if len(self.omega) != len(self.sigma):
            raise ValueError("one correlation matrix per continent")
        for om in self.omega:
            if not np.allclose(om, om.T) or not np.allclose(np.diag(om), 1.0):
                raise ValueError("correlation matrices must be symmetric with unit diagonal")
            if np.linalg.eigvalsh(om).min() <= 0:
                raise ValueError("correlation matrix is not positive definite")
        if not np.isfinite(self.eps).all() or not np.isfinite(self.alpha).all():
            raise ValueError("alpha and eps must be finite")

    def covariance_blocks(self) -> list:
        return [s * s * om for s, om in zip(self.sigma, self.omega)]

    def trajectories(self) -> np.ndarray:
        return np.stack([propagate(self.p1[i], self.alpha, self.eps[i])
                         for i in range(self.p1.shape[0])])


# -------------------------------------------------------- log-ratio maps


def alr(p, tol: float = 1e-10) -> np.ndarray:
    """Additive log-ratio against the first component, along the last axis."""
    p = np.asarray(p, dtype=float)
    if (p <= 0).any():
        raise ValueError("alr requires strictly positive proportions")
    if np.abs(p.sum(axis=-1) - 1).max() > tol:
        raise ValueError("alr requires proportions summing to 1")
    return np.log(p[..., 1:]) - np.log(p[..., :1])


def alr_inv(v) -> np.ndarray:
    """Softmax of ``(0, v)`` along the last axis."""
    v = np.asarray(v, dtype=float)
    if not np.isfinite(v).all():
        raise ValueError("alr_inv requires finite input")
    full = np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)
    full -= full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


def log_alr_inv(v) -> np.ndarray:
    """log of :func:`alr_inv`, without underflow for very negative ratios."""
    v = np.asarray(v, dtype=float)
    full = np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)
    return full - special.logsumexp(full, axis=-1, keepdims=True)


def propagate(p1, alpha, eps_i) -> np.ndarray:
    """Latent T x C trajectory of one country from its day-1 proportions.

    ``eps_i`` holds the (T-1) x (C-1) innovations for days 2..T.
    """
    eps_i = np.asarray(eps_i, dtype=float)
    if eps_i.ndim != 2:
        raise ValueError("eps_i must be (T-1) x (C-1)")
    if not np.isfinite(eps_i).all():
        raise ValueError("innovations must be finite")
    v1 = alr(p1)
    steps = np.asarray(alpha, dtype=float)[None, :] + eps_i
    v = np.concatenate([v1[None, :], v1[None, :] + np.cumsum(steps, axis=0)], axis=0)
    return alr_inv(v)


def window_prob(traj, t: int, window: int = WINDOW) -> np.ndarray:
    """Multinomial probabilities for 1-based day ``t``: the mean of the
    latent proportions over the last ``window`` days, or over days 1..t
    while fewer than ``window`` days have elapsed."""
    traj = np.asarray(traj, dtype=float)
    T = traj.shape[0]
    if not 1 <= t <= T:
        raise ValueError(f"day {t} outside 1..{T}")
    lo = max(0, t - window)
    return traj[lo:t].mean(axis=0)


def window_probs(traj, window: int = WINDOW) -> np.ndarray:
    """:func:`window_prob` for every day, along axis -2 of ``traj``."""
    traj = np.asarray(traj, dtype=float)
    T = traj.shape[-2]
    pad = np.zeros(traj.shape[:-2] + (window - 1, traj.shape[-1]))
    padded = np.concatenate([pad, traj], axis=-2)
    sums = sum(padded[..., w:w + T, :] for w in range(window))
    n = np.minimum(np.arange(1, T + 1), window)[:, None]
    return sums / n


def multinomial_logpmf(y, p) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    p = np.asarray(p, dtype=float)
    if (p <= 0).any():
        raise ValueError("multinomial probabilities must be positive")
    n = y.sum(axis=-1)
    return special.gammaln(n + 1) - special.gammaln(y + 1).sum(axis=-1) + (y * np.log(p)).sum(axis=-1)


def log_likelihood(counts, traj, window: int = WINDOW) -> float:
    """Multinomial log-likelihood including the multinomial coefficient.

    ``counts`` is a :class:`CountSeries` or K x T x C array and ``traj`` the
    matching K x T x C latent proportions; days with no sequences add 0.
    """
    y = np.asarray(counts.counts if isinstance(counts, CountSeries) else counts, dtype=float)
    traj = np.asarray(traj, dtype=float)
    if y.shape != traj.shape:
        raise ValueError(f"counts shape {y.shape} does not match trajectory {traj.shape}")
    pbar = window_probs(traj, window)
    observed = y.sum(axis=-1) > 0
    if not observed.any():
        return 0.0
    return float(multinomial_logpmf(y[observed], pbar[observed]).sum())


# ------------------------------------------------------------------ priors


def lkj_log_normalizer(m: int, eta: float) -> float:
    """log of the LKJ(eta) normalising constant for m x m correlation matrices."""
    out = 0.0
    for k in range(1, m):
        b = eta + (m - k - 1) / 2.0
        out += (2 * eta - 2 + m - k) * (m - k) * math.log(2.0)
        out += (m - k) * special.betaln(b, b)
    return out


def lkj_logpdf(omega, eta: float) -> float:
    omega = np.atleast_2d(omega)
    m = omega.shape[0]
    if m == 1:
        return 0.0
    sign, logdet = np.linalg.slogdet(omega)
    if sign <= 0:
        raise ValueError("correlation matrix is not positive definite")
    return (eta - 1) * logdet - lkj_log_normalizer(m, eta)


def half_cauchy_logpdf(x, scale: float):
    x = np.asarray(x, dtype=float)
    return np.log(2 / (math.pi * scale)) - np.log1p((x / scale) ** 2)


def log_prior(params: ModelParams, cfg: PriorConfig, blocks: Sequence[np.ndarray]) -> float:
    """Joint log prior density of constrained parameters.

    ``blocks`` lists the country indices of each continent (see
    :meth:`ContinentSpec.index_blocks`).  The flat growth-rate prior adds 0.
    """
    params.validate()
    a = np.asarray(cfg.dirichlet_alpha)
    if a.size != params.p1.shape[1]:
        raise ValueError("Dirichlet dimension does not match the number of clusters")
    lp = sum(stats.dirichlet.logpdf(row, a) for row in params.p1)
    lp += half_cauchy_logpdf(params.sigma, cfg.sigma_scale).sum()
    lp += sum(lkj_logpdf(om, cfg.lkj_eta) for om in params.omega)
    if cfg.alpha_prior == "normal":
        lp += stats.norm.logpdf(params.alpha, 0.0, cfg.alpha_sd).sum()
    for idx, cov in zip(blocks, params.covariance_blocks()):
        x = params.eps[idx].transpose(1, 2, 0).reshape(-1, len(idx))
        lp += stats.multivariate_normal.logpdf(x, mean=np.zeros(len(idx)), cov=cov).sum()
    return float(lp)


# ------------------------------------------------------- unconstraining


def _log1m_tanh2(y):
    ay = np.abs(y)
    return 2.0 * (math.log(2.0) - ay - np.log1p(np.exp(-2.0 * ay)))


def corr_cholesky(y, m: int):
    """Cholesky factor of a correlation matrix from canonical partial
    correlations ``tanh(y)`` (strict lower triangle, row-major).

    Returns ``(L, log_jac)`` where ``log_jac`` is the log absolute Jacobian
    determinant of the map from ``y`` to the off-diagonal entries of
    ``L @ L.T``.
    """
    y = np.asarray(y, dtype=float)
    if y.size != m * (m - 1) // 2:
        raise ValueError("wrong number of partial correlations")
    z = np.tanh(y)
    L = np.zeros((m, m))
    L[0, 0] = 1.0
    log_jac = float(_log1m_tanh2(y).sum())
    k = 0
    for i in range(1, m):
        ss = 0.0
        for j in range(i):
            L[i, j] = z[k] * math.sqrt(1.0 - ss)
            log_jac += 0.5 * math.log1p(-ss)
            ss += L[i, j] ** 2
            k += 1
        L[i, i] = math.sqrt(1.0 - ss)
        log_jac += (m - i - 1) * math.log(L[i, i])
    return L, log_jac


def corr_unconstrain(omega) -> np.ndarray:
    omega = np.atleast_2d(omega)
    m = omega.shape[0]
    L = np.linalg.cholesky(omega)
    out = []
    for i in range(1, m):
        ss = 0.0
        for j in range(i):
            out.append(np.arctanh(L[i, j] / math.sqrt(1.0 - ss)))
            ss += L[i, j] ** 2
    return np.array(out)


@dataclass(frozen=True)
class Layout:
    """Slices of the unconstrained parameter vector.

    Order: growth rates, day-1 log-ratios per country, log noise scales,
    partial-correlation coordinates per block, then the latent block:
    standardized innovations (non-centered) or the log-ratio levels of
    days 2..T (centered).
    """

    K: int
    T: int
    C: int
    block_sizes: tuple
    parameterization: str = "centered"

    @property
    def n_corr(self) -> tuple:
        return tuple(m * (m - 1) // 2 for m in self.block_sizes)

    @cached_property
    def slices(self) -> dict:
        K, T, C, B = self.K, self.T, self.C, len(self.block_sizes)
        sizes = [("alpha", C - 1), ("p1", K * (C - 1)), ("log_sigma", B),
                 ("corr", sum(self.n_corr)), ("latent", K * (T - 1) * (C - 1))]
        out, start = {}, 0
        for name, n in sizes:
            out[name] = slice(start, start + n)
            start += n
        return out

    @property
    def dim(self) -> int:
        return self.slices["latent"].stop

    def corr_slices(self) -> list:
        out, start = [], self.slices["corr"].start
        for n in self.n_corr:
            out.append(slice(start, start + n))
            start += n
        return out

    def coordinate_name(self, k: int) -> str:
        for name, sl in self.slices.items():
            if sl.start <= k < sl.stop:
                return f"{name}[{k - sl.start}]"
        raise IndexError(k)


# --------------------------------------------------------- posterior model


PARAMETERIZATIONS = ("centered", "noncentered")


class PosteriorModel:
    """Joint posterior over the unconstrained parameter vector.

    Calling the instance returns ``(log_density, gradient)``; non-finite
    values are passed through so that the sampler can treat them as
    divergences.  :func:`log_posterior_and_grad` is the checked entry point.

    Parameters
    ----------
    counts : CountSeries
    cfg : PriorConfig
    continents : ContinentSpec, optional
        Blocks of the innovation covariance; defaults to the four
        continents of the GISAID analysis restricted to ``counts``.
    window : int
        Length of the trailing averaging window.
    parameterization : {"centered", "noncentered"}
        Latent coordinates seen by the sampler.  ``"centered"`` samples the
        log-ratio levels of days 2..T directly (innovations are their
        differences minus ``alpha``, a unit-Jacobian map).  ``"noncentered"``
        samples standardized innovations ``z`` with ``eps = sigma L z``.
        Both define the same posterior; the centered form is far better
        conditioned when daily counts are informative.
    """

    def __init__(self, counts: CountSeries, cfg: PriorConfig = PriorConfig(),
                 continents: ContinentSpec | None = None, window: int = WINDOW,
                 parameterization: str = "centered"):
        if parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")
        self.parameterization = parameterization
        self.counts = counts
        self.cfg = cfg
        self.window = int(window)
        K, T, C = counts.counts.shape
        if T < 2:
            raise ValueError("need at least two days")
        if len(cfg.dirichlet_alpha) != C:
            raise ValueError(f"prior has {len(cfg.dirichlet_alpha)} clusters, counts have {C}")
        if continents is None:
            continents = PAPER_CONTINENTS
        self.continents = continents.restrict(counts.countries)
        self.blocks = self.continents.index_blocks(counts.countries)
        self.layout = Layout(K, T, C, tuple(len(b) for b in self.blocks), parameterization)

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def shape(self) -> tuple:
        return self.counts.counts.shape

    # ------------------------------------------------------- names
    @cached_property
    def groups(self) -> dict:
        K, T, C = self.shape
        B = len(self.blocks)
        n_om = sum(self.layout.n_corr)
        sizes = [("alpha", C - 1), ("p1", K * C), ("sigma", B), ("omega", n_om),
                 ("eps", K * (T - 1) * (C - 1))]
        out, start = {}, 0
        for name, n in sizes:
            out[name] = slice(start, start + n)
            start += n
        return out

    @cached_property
    def names(self) -> list:
        K, T, C = self.shape
        countries = self.counts.countries
        names = [f"alpha[{c}]" for c in range(2, C + 1)]
        names += [f"p1[{countries[i]},{c}]" for i in range(K) for c in range(1, C + 1)]
        names += [f"sigma[{n}]" for n in self.continents.names]
        for n, m in zip(self.continents.names, self.layout.block_sizes):
            names += [f"omega[{n}][{i + 1},{j + 1}]" for i in range(m) for j in range(i + 1, m)]
        names += [f"eps[{countries[i]},{t},{c}]" for i in range(K) for t in range(2, T + 1)
                  for c in range(2, C + 1)]
        return names

    @property
    def metadata(self) -> dict:
        return {
            "countries": list(self.counts.countries),
            "start_date": self.counts.start_date.isoformat(),
            "days": self.shape[1],
            "clusters": self.shape[2],
            "continents": self.continents.to_dict(),
            "window": self.window,
            "prior": self.cfg.to_dict(),
            "parameterization": self.parameterization,
        }

    # ------------------------------------------------- transforms
    def constrain(self, theta) -> ModelParams:
        theta = np.asarray(theta, dtype=float)
        K, T, C = self.shape
        sl = self.layout.slices
        alpha = theta[sl["alpha"]]
        v = theta[sl["p1"]].reshape(K, C - 1)
        sigma = np.exp(theta[sl["log_sigma"]])
        latent = theta[sl["latent"]].reshape(K, T - 1, C - 1)
        omegas = []
        if self.parameterization == "centered":
            eps = np.diff(np.concatenate([v[:, None, :], latent], axis=1), axis=1) - alpha
        else:
            eps = np.empty_like(latent)
        for b, (idx, csl) in enumerate(zip(self.blocks, self.layout.corr_slices())):
            L, _ = corr_cholesky(theta[csl], len(idx))
            omegas.append(L @ L.T)
            if self.parameterization == "noncentered":
                eps[idx] = sigma[b] * np.einsum("ij,jtc->itc", L, latent[idx])
        return ModelParams(alpha, alr_inv(v), sigma, omegas, eps)

    def unconstrain(self, params: ModelParams) -> np.ndarray:
        K, T, C = self.shape
        v = alr(params.p1)
        parts = [params.alpha, v.ravel(), np.log(params.sigma)]
        if self.parameterization == "centered":
            latent = v[:, None, :] + np.cumsum(params.alpha + params.eps, axis=1)
        else:
            latent = np.empty_like(params.eps)
        corr = []
        for b, idx in enumerate(self.blocks):
            om = params.omega[b]
            corr.append(corr_unconstrain(om))
            if self.parameterization == "noncentered":
                L = np.linalg.cholesky(om)
                latent[idx] = (np.einsum("ij,jtc->itc", np.linalg.inv(L), params.eps[idx])
                               / params.sigma[b])
        parts.append(np.concatenate(corr) if corr else np.zeros(0))
        parts.append(latent.ravel())
        return np.concatenate(parts)

    def flatten(self, params: ModelParams) -> np.ndarray:
        """Constrained parameters as one vector ordered like :attr:`names`."""
        om = []
        for o in params.omega:
            iu = np.triu_indices(o.shape[0], 1)
            om.append(o[iu])
        return np.concatenate([params.alpha, params.p1.ravel(), params.sigma,
                               np.concatenate(om) if om else np.zeros(0), params.eps.ravel()])

    def unflatten(self, flat) -> ModelParams:
        flat = np.asarray(flat, dtype=float)
        K, T, C = self.shape
        g = self.groups
        offdiag = flat[g["omega"]]
        omegas, start = [], 0
        for m in self.layout.block_sizes:
            om = np.eye(m)
            iu = np.triu_indices(m, 1)
            n = len(iu[0])
            om[iu] = offdiag[start:start + n]
            om[(iu[1], iu[0])] = offdiag[start:start + n]
            omegas.append(om)
            start += n
        return ModelParams(flat[g["alpha"]], flat[g["p1"]].reshape(K, C), flat[g["sigma"]],
                           omegas, flat[g["eps"]].reshape(K, T - 1, C - 1))

    def levels(self, theta) -> np.ndarray:
        """Daily log-ratio levels (K, T, C-1) implied by ``theta``."""
        theta = np.asarray(theta, dtype=float)
        K, T, C = self.shape
        sl = self.layout.slices
        if self.parameterization == "centered":
            v = theta[sl["p1"]].reshape(K, 1, C - 1)
            return np.concatenate([v, theta[sl["latent"]].reshape(K, T - 1, C - 1)], axis=1)
        return alr(self.constrain(theta).trajectories())

    def make_metric(self):
        """Mass matrix suited to this parameterization (see :mod:`spikeevo.metric`)."""
        from .metric import DiagonalMetric, LevelMetric
        if self.parameterization == "centered":
            return LevelMetric(self)
        return DiagonalMetric(self.dim)

    def make_moves(self) -> list:
        """Extra kernels run after each Hamiltonian transition."""
        from .moves import ScaleMove
        return [ScaleMove(self, repeats=5)] if self.parameterization == "centered" else []

    def constrained_vector(self, theta) -> np.ndarray:
        return self.flatten(self.constrain(theta))

    def log_jacobian(self, theta) -> float:
        """log |d constrained / d unconstrained| (numpy reference)."""
        theta = np.asarray(theta, dtype=float)
        K, T, C = self.shape
        sl = self.layout.slices
        v = theta[sl["p1"]].reshape(K, C - 1)
        out = float(log_alr_inv(v).sum())
        s = theta[sl["log_sigma"]]
        out += float(s.sum())
        n_steps = (T - 1) * (C - 1)
        for b, (idx, csl) in enumerate(zip(self.blocks, self.layout.corr_slices())):
            L, lj = corr_cholesky(theta[csl], len(idx))
            out += lj
            if self.parameterization == "noncentered":
                out += n_steps * (len(idx) * s[b] + np.log(np.diag(L)).sum())
        return out

    def reference_log_density(self, theta) -> float:
        """log-likelihood + log-prior + log-Jacobian, all from numpy/scipy."""
        params = self.constrain(theta)
        return (log_likelihood(self.counts, params.trajectories(), self.window)
                + log_prior(params, self.cfg, self.blocks) + self.log_jacobian(theta))

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        """Day-1 proportions from the Dirichlet prior, noise scales from a
        half-Cauchy truncated at 2, identity correlations, zero growth and
        zero innovations."""
        K, T, C = self.shape
        theta = np.zeros(self.dim)
        sl = self.layout.slices
        p1 = rng.dirichlet(self.cfg.dirichlet_alpha, size=K)
        p1 = np.maximum(p1, 1e-12)
        p1 /= p1.sum(axis=1, keepdims=True)
        theta[sl["p1"]] = alr(p1).ravel()
        sig = []
        for _ in self.blocks:
            s = abs(rng.standard_cauchy()) * self.cfg.sigma_scale
            while s > 2.0 or s == 0.0:
                s = abs(rng.standard_cauchy()) * self.cfg.sigma_scale
            sig.append(s)
        theta[sl["log_sigma"]] = np.log(sig)
        if self.parameterization == "centered":
            # alpha = 0 and eps = 0: every later level equals the day-1 level
            levels = np.repeat(theta[sl["p1"]].reshape(K, 1, C - 1), T - 1, axis=1)
            theta[sl["latent"]] = levels.ravel()
        return theta

    def refine(self, theta, maxiter: int = 500) -> np.ndarray:
        """Move a starting point towards the data before sampling.

        Maximizes the log density over growth rates, day-1 levels and the
        latent block by L-BFGS while the noise scales and correlations stay
        at their current values (freeing them lets the scales collapse
        towards zero).  Only the start of warmup changes; the target is
        untouched.
        """
        theta = np.asarray(theta, dtype=float).copy()
        sl = self.layout.slices
        free = np.ones(self.dim, dtype=bool)
        free[sl["log_sigma"]] = False
        free[sl["corr"]] = False

        def f(x):
            theta[free] = x
            lp, g = self(theta)
            if not np.isfinite(lp):
                return np.inf, np.zeros_like(x)
            return -lp, -g[free]

        x0 = theta[free].copy()
        res = optimize.minimize(f, x0, jac=True, method="L-BFGS-B",
                                options={"maxiter": maxiter})
        theta[free] = res.x if np.isfinite(res.fun) else x0
        return theta

    # ------------------------------------------------------ target
    @cached_property
    def _constants(self) -> dict:
        y = self.counts.counts.astype(float)
        n = y.sum(axis=-1)
        a = np.asarray(self.cfg.dirichlet_alpha)
        K, T, C = self.shape
        return {
            "y": y,
            "y_ct": np.ascontiguousarray(y.transpose(0, 2, 1)),
            "a": a,
            "coef": float((special.gammaln(n + 1) - special.gammaln(y + 1).sum(axis=-1)).sum()),
            "y_log_count": float((y.sum(axis=(0, 2)) * np.log(
                np.minimum(np.arange(1, T + 1), self.window))).sum()),
            "dir_const": K * float(special.gammaln(a.sum()) - special.gammaln(a).sum()),
            "lkj_const": [lkj_log_normalizer(len(b), self.cfg.lkj_eta) for b in self.blocks],
        }

    def __call__(self, theta):
        """``(log_density, gradient)`` on the unconstrained scale."""
        # wild trial points during step-size search overflow harmlessly
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return _value_and_grad(self, np.asarray(theta, dtype=float))

    def log_density(self, theta) -> float:
        return self(theta)[0]


def log_posterior_and_grad(theta, model: PosteriorModel):
    """Checked log-posterior and gradient on the unconstrained scale.

    Raises ``FloatingPointError`` naming the first offending coordinate
    when the value or any gradient entry is not finite.
    """
    theta = np.asarray(theta, dtype=float)
    bad = np.flatnonzero(~np.isfinite(theta))
    if bad.size:
        raise FloatingPointError(f"non-finite input at {model.layout.coordinate_name(bad[0])}")
    value, grad = model(theta)
    if not np.isfinite(value):
        raise FloatingPointError("log density is not finite")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient at {model.layout.coordinate_name(bad[0])}")
    return value, grad


@numba.njit(cache=True)
def corr_cholesky_grad(y, m, eta):
    """Forward-mode companion of :func:`corr_cholesky` for the sampler.

    Returns ``(L, dL, f, df)`` where ``dL[i, j]`` is the gradient of
    ``L[i, j]`` with respect to ``y`` and ``f`` is the log-Jacobian plus
    the LKJ(eta) kernel ``(eta - 1) log det(L L^T)``.
    """
    n = m * (m - 1) // 2
    z = np.tanh(y)
    L = np.zeros((m, m))
    dL = np.zeros((m, m, n))
    L[0, 0] = 1.0
    f = 0.0
    df = np.empty(n)
    for k in range(n):
        ay = abs(y[k])
        f += 2.0 * (math.log(2.0) - ay - math.log1p(math.exp(-2.0 * ay)))
        df[k] = -2.0 * z[k]
    dss = np.empty(n)
    k = 0
    for i in range(1, m):
        ss = 0.0
        dss[:] = 0.0
        for j in range(i):
            if not ss < 1.0:
                # tanh saturated: the correlation matrix is singular
                return L, dL, -np.inf, np.zeros(n)
            r = math.sqrt(1.0 - ss)
            L[i, j] = z[k] * r
            for q in range(n):
                dL[i, j, q] = -0.5 * z[k] / r * dss[q]
            dL[i, j, k] += (1.0 - z[k] * z[k]) * r
            f += 0.5 * math.log1p(-ss)
            for q in range(n):
                df[q] -= 0.5 / (1.0 - ss) * dss[q]
            ss += L[i, j] ** 2
            for q in range(n):
                dss[q] += 2.0 * L[i, j] * dL[i, j, q]
            k += 1
        if not ss < 1.0:
            return L, dL, -np.inf, np.zeros(n)
        r = math.sqrt(1.0 - ss)
        L[i, i] = r
        w = (m - i - 1) + 2.0 * (eta - 1.0)
        f += w * math.log(r)
        for q in range(n):
            dL[i, i, q] = -0.5 / r * dss[q]
            df[q] += w / r * dL[i, i, q]
    return L, dL, f, df


@numba.njit(cache=True)
def _mix(z, scale, idx, L, out):
    """``out[idx[r]] = scale * sum_j L[r, j] z[idx[j]]`` over one block."""
    m = idx.size
    _, S, D = z.shape
    for r in range(m):
        o = out[idx[r]]
        o[:, :] = 0.0
        for j in range(r + 1):
            w = scale * L[r, j]
            zj = z[idx[j]]
            for t in range(S):
                for c in range(D):
                    o[t, c] += w * zj[t, c]


@numba.njit(cache=True)
def _mix_adjoint(g, z, scale, idx, L, g_z):
    """Adjoint of :func:`_mix`: fills ``g_z`` rows and returns the gradient
    with respect to ``L`` (scaled) and to ``log(scale)``."""
    m = idx.size
    _, S, D = z.shape
    g_L = np.zeros((m, m))
    for j in range(m):
        gz = g_z[idx[j]]
        gz[:, :] = 0.0
    g_log_scale = 0.0
    for r in range(m):
        gr = g[idx[r]]
        for j in range(r + 1):
            zj = z[idx[j]]
            gz = g_z[idx[j]]
            w = scale * L[r, j]
            acc = 0.0
            for t in range(S):
                for c in range(D):
                    gz[t, c] += w * gr[t, c]
                    acc += gr[t, c] * zj[t, c]
            g_L[r, j] = scale * acc
            g_log_scale += w * acc
    return g_L, g_log_scale


@numba.njit(cache=True)
def _trailing_sums(x, W, out, pre, suf):
    """``out[t] = x[max(0, t-W+1)] + ... + x[t]`` for nonnegative ``x``.

    Block prefix/suffix sums: O(1) per element and additions only, so
    the relative precision of tiny entries is preserved.
    """
    T = x.size
    for start in range(0, T, W):
        stop = min(start + W, T)
        acc = 0.0
        for t in range(start, stop):
            acc += x[t]
            pre[t] = acc
        acc = 0.0
        for t in range(stop - 1, start - 1, -1):
            acc += x[t]
            suf[t] = acc
    for t in range(T):
        lo = t - W + 1
        if lo <= 0:
            out[t] = pre[t]
        elif lo % W == 0:
            out[t] = suf[lo]
        else:
            out[t] = suf[lo] + pre[t]


@numba.njit(cache=True)
def _levels_kernel(lev, y, a, W):
    """Dirichlet + multinomial terms and their adjoints for all countries.

    ``lev`` (K, T, C-1) are log-ratio levels and ``y`` is (K, C, T).
    Returns the log density without constant terms and its gradient with
    respect to ``lev``.
    """
    K, C, T = y.shape
    a_sum = a.sum()
    value = 0.0
    g_lev = np.zeros((K, T, C - 1))
    p = np.empty((C, T))
    psum = np.empty(T)
    g_psum = np.empty(T)
    rev = np.empty(T)
    g_p = np.empty((C, T))
    pre = np.empty(T)
    suf = np.empty(T)
    logit = np.empty(C)
    logit[0] = 0.0
    for i in range(K):
        for t in range(T):
            for c in range(1, C):
                logit[c] = lev[i, t, c - 1]
            mx = logit[0]
            for c in range(1, C):
                if logit[c] > mx:
                    mx = logit[c]
            norm = 0.0
            for c in range(C):
                e = math.exp(logit[c] - mx)
                p[c, t] = e
                norm += e
            for c in range(C):
                p[c, t] /= norm
            if t == 0:
                lnorm = math.log(norm) + mx
                for c in range(C):
                    value += a[c] * (logit[c] - lnorm)
        for c in range(C):
            _trailing_sums(p[c], W, psum, pre, suf)
            yc = y[i, c]
            for t in range(T):
                if yc[t] > 0.0:
                    if not psum[t] > 0.0:
                        # observed cluster with zero (or undefined) probability
                        return -np.inf, g_lev
                    value += yc[t] * math.log(psum[t])
                    g_psum[T - 1 - t] = yc[t] / psum[t]
                else:
                    g_psum[T - 1 - t] = 0.0
            # adjoint of a trailing window is a leading window
            _trailing_sums(g_psum, W, rev, pre, suf)
            for t in range(T):
                g_p[c, t] = rev[T - 1 - t]
        for t in range(T):
            dot = 0.0
            for c in range(C):
                dot += p[c, t] * g_p[c, t]
            for c in range(1, C):
                g_lev[i, t, c - 1] = p[c, t] * (g_p[c, t] - dot)
        for c in range(1, C):
            g_lev[i, 0, c - 1] += a[c] - a_sum * p[c, 0]
    return value, g_lev


def _value_and_grad(model: PosteriorModel, theta: np.ndarray):
    K, T, C = model.shape
    cfg = model.cfg
    const = model._constants
    sl = model.layout.slices
    centered = model.parameterization == "centered"
    grad = np.zeros_like(theta)

    alpha = theta[sl["alpha"]]
    v = theta[sl["p1"]].reshape(K, C - 1)
    s = theta[sl["log_sigma"]]
    sigma = np.exp(s)
    lat_flat = theta[sl["latent"]]
    latent = lat_flat.reshape(K, T - 1, C - 1)

    lp = 0.0
    chol = []
    for b, (idx, csl) in enumerate(zip(model.blocks, model.layout.corr_slices())):
        m = len(idx)
        if m == 1:
            L, dL = np.ones((1, 1)), None
        else:
            L, dL, f, df = corr_cholesky_grad(theta[csl], m, cfg.lkj_eta)
            if not np.isfinite(f):
                return -np.inf, grad
            lp += f - const["lkj_const"][b]
            grad[csl] += df
        chol.append((L, dL))

    # noise scales: half-Cauchy plus log Jacobian
    u = (sigma / cfg.sigma_scale) ** 2
    lp += float((math.log(2 / (math.pi * cfg.sigma_scale)) - np.log1p(u) + s).sum())
    grad[sl["log_sigma"]] += 1.0 - 2.0 * u / (1.0 + u)
    if cfg.alpha_prior == "normal":
        sd = cfg.alpha_sd
        lp += float((-0.5 * (alpha / sd) ** 2 - math.log(sd) - 0.5 * LOG_2PI).sum())
        grad[sl["alpha"]] += -alpha / sd ** 2
    lp += const["dir_const"] + const["coef"] - const["y_log_count"]
    lp += -0.5 * latent.size * LOG_2PI

    if centered:
        lev = np.concatenate([v[:, None, :], latent], axis=1)
        value, g_lev = _levels_kernel(lev, const["y_ct"], const["a"], model.window)
        lp += value
        eps = np.diff(lev, axis=1) - alpha
        g_eps = np.empty_like(eps)
        n_vec = (T - 1) * (C - 1)
        for b, (idx, csl) in enumerate(zip(model.blocks, model.layout.corr_slices())):
            L, dL = chol[b]
            m = len(idx)
            L_inv = np.linalg.inv(L)
            E = eps[idx].reshape(m, n_vec)
            Wm = (L_inv @ E) / sigma[b]
            S = Wm @ Wm.T
            q = float(np.trace(S))
            log_diag = np.log(np.diag(L))
            lp += -0.5 * q - n_vec * (m * s[b] + log_diag.sum())
            g_eps[idx] = (-(L_inv.T @ Wm) / sigma[b]).reshape(m, T - 1, C - 1)
            grad[sl["log_sigma"].start + b] += q - n_vec * m
            if dL is not None:
                g_L = L_inv.T @ S - n_vec * np.diag(1.0 / np.diag(L))
                grad[csl] += (g_L[:, :, None] * dL).sum(axis=(0, 1))
        g_lev[:, 1:] += g_eps
        g_lev[:, :-1] -= g_eps
        grad[sl["alpha"]] -= g_eps.sum(axis=(0, 1))
        grad[sl["p1"]] = g_lev[:, 0].ravel()
        grad[sl["latent"]] = g_lev[:, 1:].ravel()
        return lp, grad

    eps = np.empty_like(latent)
    for b, idx in enumerate(model.blocks):
        _mix(latent, sigma[b], idx, chol[b][0], eps)
    lp += -0.5 * float(np.dot(lat_flat, lat_flat))
    eps += alpha
    lev = np.concatenate([v[:, None, :], v[:, None, :] + np.cumsum(eps, axis=1)], axis=1)
    value, g_lev = _levels_kernel(lev, const["y_ct"], const["a"], model.window)
    lp += value
    # levels are cumulative sums of the steps: reverse cumulative adjoint
    g_steps = np.cumsum(g_lev[:, :0:-1], axis=1)[:, ::-1]
    grad[sl["p1"]] = g_lev.sum(axis=1).ravel()
    grad[sl["alpha"]] += g_steps.sum(axis=(0, 1))
    g_z = np.empty_like(latent)
    for b, (idx, csl) in enumerate(zip(model.blocks, model.layout.corr_slices())):
        L, dL = chol[b]
        g_L, g_ls = _mix_adjoint(g_steps, latent, sigma[b], idx, L, g_z)
        grad[sl["log_sigma"].start + b] += g_ls
        if dL is not None:
            grad[csl] += (g_L[:, :, None] * dL).sum(axis=(0, 1))
    grad[sl["latent"]] = g_z.ravel() - lat_flat
    return lp, grad
