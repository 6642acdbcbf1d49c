"""Posterior sampling, convergence diagnostics and posterior summaries.

:func:`run_sampler` drives independent NUTS chains (see
:mod:`spikeevo.nuts`) over any differentiable log density and returns a
:class:`PosteriorChains` holding post-warmup draws on the constrained
scale.  When the target is a :class:`spikeevo.model.PosteriorModel` the
initial point, parameter names, constraining transform and mass matrix
are taken from the model.
"""

from __future__ import annotations

import json
import logging
import math
import multiprocessing as mp
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .diagnostics import effective_sample_size, split_rhat
from .nuts import NUTS

logger = logging.getLogger(__name__)

STAT_NAMES = ("accept_stat", "tree_depth", "n_leapfrog", "divergent", "step_size", "energy", "lp")


@dataclass
class SamplerConfig:
    """Settings of a multi-chain run.

    ``warmup`` defaults to half of ``iterations``.  ``workers`` greater
    than one runs chains in separate processes; results do not depend on
    it because every chain owns a random stream seeded by
    ``(seed, chain index)``.
    """

    chains: int = 4
    iterations: int = 5000
    warmup: int | None = None
    seed: int = 0
    target_accept: float = 0.8
    max_depth: int = 10
    max_delta_h: float = 1000.0
    divergence_warn: float = 0.01
    workers: int = 1

    def __post_init__(self):
        if self.warmup is None:
            self.warmup = self.iterations // 2
        if self.chains < 1:
            raise ValueError("chains must be at least 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("warmup must be nonnegative and below iterations")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_depth < 1:
            raise ValueError("max_depth must be positive")

    @property
    def kept(self) -> int:
        return self.iterations - self.warmup

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SamplerConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PosteriorChains:
    """Post-warmup draws of all chains.

    Attributes
    ----------
    draws : ndarray
        ``(chains, kept iterations, dim)`` on the constrained scale.
    names : list of str
        One name per column of ``draws``.
    groups : dict
        Parameter block name to a contiguous column slice.
    stats : dict
        Per-iteration sampler statistics, each ``(chains, kept)``.
    metadata : dict
        Free-form description of the model and run.
    warnings : list of str
    """

    draws: np.ndarray
    names: list
    groups: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 3:
            raise ValueError("draws must be (chains, iterations, dim)")
        if len(self.names) != self.draws.shape[2]:
            raise ValueError("one name per column required")
        if not np.all(np.isfinite(self.draws)):
            raise ValueError("draws contain non-finite values")
        self._index = {n: i for i, n in enumerate(self.names)}
        if not self.groups:
            self.groups = {"all": slice(0, len(self.names))}

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        """``(chains, draws)`` samples of one parameter."""
        return self.draws[:, :, self.index(name)]

    def group(self, name: str) -> np.ndarray:
        """``(chains, draws, k)`` samples of a parameter block."""
        return self.draws[:, :, self.groups[name]]

    def group_names(self, name: str) -> list:
        return self.names[self.groups[name]]

    def pooled(self, name: str) -> np.ndarray:
        return self.column(name).ravel()

    # ------------------------------------------------------------ I/O
    def save(self, directory, include_latent: bool = True) -> dict:
        """Write ``chains.csv`` (non-latent columns), ``latent.npz`` (latent
        block, if any), ``stats.csv`` and ``chains.json``.  Returns the
        paths written keyed by role."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        latent = self.groups.get("eps")
        keep = np.ones(len(self.names), dtype=bool)
        if latent is not None:
            keep[latent] = False
        cols = [n for n, k in zip(self.names, keep) if k]
        flat = self.draws.reshape(-1, self.draws.shape[2])
        frame = pd.DataFrame(flat[:, keep], columns=cols)
        chain_id = np.repeat(np.arange(1, self.n_chains + 1), self.n_draws)
        draw_id = np.tile(np.arange(1, self.n_draws + 1), self.n_chains)
        frame.insert(0, "draw", draw_id)
        frame.insert(0, "chain", chain_id)
        paths = {"chains": out / "chains.csv"}
        frame.to_csv(paths["chains"], index=False)
        if latent is not None and include_latent:
            paths["latent"] = out / "latent.npz"
            np.savez_compressed(paths["latent"], draws=self.draws[:, :, latent])
        stats = pd.DataFrame({k: np.asarray(v).ravel() for k, v in self.stats.items()})
        stats.insert(0, "draw", draw_id)
        stats.insert(0, "chain", chain_id)
        paths["stats"] = out / "stats.csv"
        stats.to_csv(paths["stats"], index=False)
        paths["index"] = out / "chains.json"
        with open(paths["index"], "w") as fh:
            json.dump({
                "names": self.names,
                "groups": {k: [v.start, v.stop] for k, v in self.groups.items()},
                "shape": list(self.draws.shape),
                "latent_saved": bool(latent is not None and include_latent),
                "metadata": self.metadata,
                "warnings": self.warnings,
            }, fh, indent=1)
        return paths

    @classmethod
    def load(cls, directory) -> "PosteriorChains":
        src = Path(directory)
        with open(src / "chains.json") as fh:
            index = json.load(fh)
        names = index["names"]
        groups = {k: slice(*v) for k, v in index["groups"].items()}
        chains, kept, dim = index["shape"]
        frame = pd.read_csv(src / "chains.csv", float_precision="round_trip")
        draws = np.zeros((chains, kept, dim))
        latent = groups.get("eps")
        keep = np.ones(dim, dtype=bool)
        if latent is not None:
            keep[latent] = False
            if index.get("latent_saved"):
                draws[:, :, latent] = np.load(src / "latent.npz")["draws"]
            else:
                # latent block not stored: drop it from the object
                names = [n for n, k in zip(names, keep) if k]
                groups = _drop_group(groups, "eps")
                draws = draws[:, :, keep]
                keep = np.ones(len(names), dtype=bool)
        values = frame[[n for n, k in zip(names, keep) if k]].to_numpy()
        draws[:, :, keep] = values.reshape(chains, kept, -1)
        stats = {}
        stats_path = src / "stats.csv"
        if stats_path.exists():
            sf = pd.read_csv(stats_path, float_precision="round_trip")
            for col in sf.columns:
                if col not in ("chain", "draw"):
                    stats[col] = sf[col].to_numpy().reshape(chains, kept)
        return cls(draws, names, groups, stats, index.get("metadata", {}),
                   index.get("warnings", []))


def _drop_group(groups: dict, name: str) -> dict:
    gone = groups[name]
    width = gone.stop - gone.start
    out = {}
    for k, sl in groups.items():
        if k == name:
            continue
        if sl.start >= gone.stop:
            sl = slice(sl.start - width, sl.stop - width)
        out[k] = sl
    return out


# ------------------------------------------------------------- sampling


def _run_chain(target, cfg: SamplerConfig, chain: int, dim: int, init, transform,
               metric_factory, progress, moves_factory=None):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, chain]))
    if callable(init):
        q0 = np.asarray(init(rng), dtype=float)
    elif init is not None:
        q0 = np.asarray(init, dtype=float)
    else:
        q0 = rng.uniform(-2.0, 2.0, size=dim)
    metric = metric_factory() if metric_factory is not None else None
    moves = moves_factory() if moves_factory is not None else None
    sampler = NUTS(target, dim, rng, max_depth=cfg.max_depth,
                   max_delta_h=cfg.max_delta_h, metric=metric, moves=moves)
    first = transform(q0)
    draws = np.empty((cfg.kept, first.size))
    stats = {k: np.empty(cfg.kept) for k in STAT_NAMES}
    t0 = time.perf_counter()

    def report(it, st):
        if progress and (it + 1) % progress == 0:
            logger.info("chain %d iteration %d/%d depth %d step %.3g (%.0fs)", chain + 1,
                        it + 1, cfg.iterations, st["tree_depth"], st["step_size"],
                        time.perf_counter() - t0)

    for k, (q, st) in enumerate(sampler.sample(q0, cfg.iterations, cfg.warmup,
                                                cfg.target_accept, callback=report)):
        draws[k] = transform(q)
        for name in STAT_NAMES:
            stats[name][k] = st[name]
    return draws, stats, {"step_size": sampler.step_size,
                          "seconds": time.perf_counter() - t0,
                          "moves": [m.to_dict() for m in sampler.moves]}


def run_sampler(target: Callable, cfg: SamplerConfig | None = None, *, dim: int | None = None,
                init=None, transform: Callable | None = None, names: Sequence[str] | None = None,
                groups: Mapping | None = None, metric_factory: Callable | None = None,
                metadata: Mapping | None = None, progress: int = 0) -> PosteriorChains:
    """Run ``cfg.chains`` NUTS chains on ``target``.

    Parameters
    ----------
    target : callable
        ``target(theta) -> (log_density, gradient)`` on an unconstrained
        vector.  A :class:`spikeevo.model.PosteriorModel` supplies every
        optional argument below by itself.
    cfg : SamplerConfig
    dim : int
        Dimension of ``theta``; required for plain callables.
    init : callable or array, optional
        ``init(rng)`` or a fixed start.  Defaults to uniform(-2, 2).
    transform : callable, optional
        Maps ``theta`` to the stored constrained vector (identity default).
    names, groups : optional
        Column names and contiguous blocks of the stored vector.
    metric_factory : callable, optional
        Returns a fresh mass-matrix object per chain.
    progress : int
        Log a progress line every ``progress`` iterations (0 disables).

    Raises
    ------
    FloatingPointError
        If the log density is not finite at a chain's initial point.
    """
    cfg = cfg or SamplerConfig()
    model_like = hasattr(target, "initial_point") and hasattr(target, "constrained_vector")
    if model_like:
        dim = target.dim if dim is None else dim
        if init is None:
            init = target.initial_point
            if hasattr(target, "refine"):
                init = _RefinedInit(target)
        transform = transform or target.constrained_vector
        names = list(target.names) if names is None else list(names)
        groups = dict(target.groups) if groups is None else dict(groups)
        metric_factory = metric_factory or target.make_metric
        moves_factory = getattr(target, "make_moves", None)
        meta = dict(target.metadata)
    else:
        meta = {}
        moves_factory = None
        if dim is None:
            raise ValueError("dim is required for a plain callable target")
    meta.update(metadata or {})
    transform = transform or _identity
    if names is None:
        names = [f"theta[{i}]" for i in range(dim)]
    args = [(target, cfg, c, dim, init, transform, metric_factory, progress, moves_factory)
            for c in range(cfg.chains)]
    t0 = time.perf_counter()
    if cfg.workers > 1 and cfg.chains > 1:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.chains), mp_context=ctx) as ex:
            results = list(ex.map(_run_chain_star, args))
    else:
        results = [_run_chain(*a) for a in args]
    draws = np.stack([r[0] for r in results])
    stats = {k: np.stack([r[1][k] for r in results]) for k in STAT_NAMES}
    meta["sampler"] = cfg.to_dict()
    meta["chain_info"] = [r[2] for r in results]
    meta["seconds"] = time.perf_counter() - t0
    chains = PosteriorChains(draws, list(names), dict(groups or {}), stats, meta)
    frac = float(stats["divergent"].mean())
    if frac > cfg.divergence_warn:
        msg = (f"{frac:.1%} of post-warmup transitions diverged "
               f"(threshold {cfg.divergence_warn:.1%})")
        chains.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    depth_hits = float((stats["tree_depth"] >= cfg.max_depth).mean())
    if depth_hits > 0.1:
        chains.warnings.append(f"{depth_hits:.1%} of transitions hit the maximum tree depth")
    return chains


def _identity(q) -> np.ndarray:
    return np.array(q, dtype=float)


class _RefinedInit:
    """Prior-drawn starting point moved towards the data (picklable)."""

    def __init__(self, model):
        self.model = model

    def __call__(self, rng):
        return self.model.refine(self.model.initial_point(rng))


def _run_chain_star(args):
    return _run_chain(*args)


# ---------------------------------------------------------- summaries


def parameter_diagnostics(chains: PosteriorChains, names: Sequence[str] | None = None) -> pd.DataFrame:
    """Split-R-hat and bulk ESS for each requested parameter."""
    names = list(names) if names is not None else chains.names
    rows = []
    for n in names:
        x = chains.column(n)
        if x.shape[1] >= 4:
            rows.append({"parameter": n, "rhat": split_rhat(x), "ess": effective_sample_size(x)})
        else:
            rows.append({"parameter": n, "rhat": math.nan, "ess": math.nan})
    return pd.DataFrame(rows)


def quantile(x, q, axis=None) -> np.ndarray:
    """Empirical quantile with linear interpolation between order
    statistics (type 7): position ``q (n - 1)`` in the sorted sample."""
    return np.quantile(np.asarray(x, dtype=float), q, axis=axis, method="linear")


def _rows_for(name: str, samples: np.ndarray, with_diag: bool, chain_view=None) -> dict:
    lo, hi = quantile(samples, [0.025, 0.975])
    row = {"parameter": name, "mean": float(np.mean(samples)), "sd": float(np.std(samples, ddof=1))
           if samples.size > 1 else 0.0, "q2.5": float(lo), "q97.5": float(hi)}
    if with_diag:
        if chain_view is not None and chain_view.shape[1] >= 4:
            row["rhat"] = split_rhat(chain_view)
            row["ess"] = effective_sample_size(chain_view)
        else:
            row["rhat"] = row["ess"] = math.nan
    return row


def summarize(chains: PosteriorChains, include_latent: bool = False,
              diagnostics: bool = True) -> pd.DataFrame:
    """Posterior mean, sd and central 95% interval per parameter.

    Draws from all chains are pooled.  For the cluster model the table
    contains, in order: growth rates, noise scales, day-1 proportions per
    country, pooled day-1 proportions ``p1[.,c]`` (the across-country mean
    in each draw), correlation entries and the covariance block entries
    ``Sigma[C][i,j] = sigma_C^2 Omega_C[i,j]`` for ``i <= j``.  Latent
    innovations are included only on request.

    Quantiles use linear interpolation between order statistics.
    """
    rows = []
    g = chains.groups
    is_model = all(k in g for k in ("alpha", "p1", "sigma", "omega"))
    if not is_model:
        for n in chains.names:
            rows.append(_rows_for(n, chains.pooled(n), diagnostics, chains.column(n)))
        return pd.DataFrame(rows)

    def add_group(key):
        for n in chains.group_names(key):
            rows.append(_rows_for(n, chains.pooled(n), diagnostics, chains.column(n)))

    add_group("alpha")
    add_group("sigma")
    add_group("p1")
    countries = chains.metadata.get("countries")
    n_clusters = chains.metadata.get("clusters")
    if countries and n_clusters:
        p1 = chains.group("p1").reshape(chains.n_chains, chains.n_draws, len(countries), n_clusters)
        pooled = p1.mean(axis=2)
        for c in range(n_clusters):
            rows.append(_rows_for(f"p1[.,{c + 1}]", pooled[:, :, c].ravel(), diagnostics,
                                  pooled[:, :, c]))
    add_group("omega")
    continents = chains.metadata.get("continents")
    if continents:
        for cname, members in continents.items():
            sig = chains.column(f"sigma[{cname}]")
            m = len(members)
            for i in range(m):
                for j in range(i, m):
                    if i == j:
                        val = sig ** 2
                    else:
                        val = sig ** 2 * chains.column(f"omega[{cname}][{i + 1},{j + 1}]")
                    rows.append(_rows_for(f"Sigma[{cname}][{i + 1},{j + 1}]", val.ravel(),
                                          diagnostics, val))
    if include_latent and "eps" in g:
        add_group("eps")
    return pd.DataFrame(rows)


def check_convergence(chains: PosteriorChains, names: Sequence[str], threshold: float = 1.05) -> list:
    """Names whose split-R-hat is not below ``threshold`` (nan counts as failure)."""
    bad = []
    for n in names:
        r = split_rhat(chains.column(n))
        if not r < threshold:
            bad.append(n)
    return bad
