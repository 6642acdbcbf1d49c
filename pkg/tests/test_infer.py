from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import special

from conftest import SMALL_CONTINENTS, small_counts
from spikeevo.diagnostics import effective_sample_size
from spikeevo.infer import (PosteriorChains, SamplerConfig, check_convergence, quantile,
                            run_sampler, summarize)
from spikeevo.model import Layout, PosteriorModel
from spikeevo.moves import ScaleMove
from spikeevo.nuts import DualAveraging, warmup_windows


def std_normal(q):
    return -0.5 * float(q @ q), -q


def test_sampler_config_validation():
    assert SamplerConfig(iterations=100).warmup == 50
    for bad in ({"chains": 0}, {"iterations": 10, "warmup": 10}, {"target_accept": 1.0},
                {"max_depth": 0}):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)
    cfg = SamplerConfig(chains=2, iterations=10, seed=3)
    assert SamplerConfig.from_dict({**cfg.to_dict(), "unused": 1}) == cfg


def test_warmup_windows_cover_slow_phase():
    w = warmup_windows(1000)
    assert w[0][0] == 75 and w[-1][1] == 950
    assert all(a[1] == b[0] for a, b in zip(w, w[1:]))
    assert warmup_windows(10) == [] or warmup_windows(10)[-1][1] <= 10


def test_dual_averaging_tracks_target():
    da = DualAveraging(1.0, 0.8)
    step = 1.0
    for _ in range(500):
        # acceptance falls as the step grows
        step = da.update(math.exp(-step))
    assert math.exp(-da.final) == pytest.approx(0.8, abs=0.05)


def test_standard_normal_10d():
    cfg = SamplerConfig(chains=4, iterations=3000, warmup=1000, seed=11)
    ch = run_sampler(std_normal, cfg, dim=10)
    assert ch.draws.shape == (4, 2000, 10)
    for k in range(10):
        x = ch.draws[:, :, k]
        ess = effective_sample_size(x)
        assert abs(x.mean()) < 3 * x.std() / math.sqrt(ess)
        assert x.var() == pytest.approx(1.0, abs=0.1)


def test_correlated_normal():
    r = 0.8
    prec = np.linalg.inv(np.array([[1, r], [r, 1]]))

    def target(q):
        g = -prec @ q
        return 0.5 * float(q @ g), g

    ch = run_sampler(target, SamplerConfig(chains=4, iterations=2000, seed=5), dim=2)
    x = ch.draws.reshape(-1, 2)
    assert np.corrcoef(x.T)[0, 1] == pytest.approx(r, abs=0.05)


def test_dirichlet_through_softmax():
    a = np.array([2.0, 5.0, 3.0])

    def target(v):
        full = np.concatenate([[0.0], v])
        logp = full - special.logsumexp(full)
        # Dirichlet density times the softmax Jacobian prod(p)
        lp = float((a * logp).sum())
        p = np.exp(logp)
        return lp, a[1:] - a.sum() * p[1:]

    def transform(v):
        return np.exp(np.concatenate([[0.0], v]) - special.logsumexp(np.concatenate([[0.0], v])))

    ch = run_sampler(target, SamplerConfig(chains=4, iterations=2000, seed=2), dim=2,
                     transform=transform, names=["p1", "p2", "p3"])
    p = ch.draws.reshape(-1, 3)
    np.testing.assert_allclose(p.mean(axis=0), a / a.sum(), atol=0.02)
    var = a / a.sum() * (1 - a / a.sum()) / (a.sum() + 1)
    np.testing.assert_allclose(p.var(axis=0), var, rtol=0.15)


def test_same_seed_is_bit_identical_and_serial_equals_parallel():
    cfg = SamplerConfig(chains=2, iterations=200, seed=9)
    a = run_sampler(std_normal, cfg, dim=3)
    b = run_sampler(std_normal, cfg, dim=3)
    np.testing.assert_array_equal(a.draws, b.draws)
    c = run_sampler(std_normal, SamplerConfig(chains=2, iterations=200, seed=9, workers=2), dim=3)
    np.testing.assert_array_equal(a.draws, c.draws)
    d = run_sampler(std_normal, SamplerConfig(chains=2, iterations=200, seed=10), dim=3)
    assert not np.array_equal(a.draws, d.draws)


def test_non_finite_start_raises():
    with pytest.raises(FloatingPointError):
        run_sampler(lambda q: (-math.inf, q), SamplerConfig(chains=1, iterations=10), dim=2)


def test_divergences_trigger_warning():
    def walled(q):
        # a hard wall makes trajectories that reach it diverge
        if q[0] > 0.5:
            return -math.inf, np.zeros_like(q)
        return std_normal(q)

    with pytest.warns(RuntimeWarning, match="diverged"):
        ch = run_sampler(walled, SamplerConfig(chains=1, iterations=400, seed=1), dim=2,
                         init=np.zeros(2))
    assert ch.warnings


def test_plain_target_requires_dim():
    with pytest.raises(ValueError):
        run_sampler(std_normal, SamplerConfig(chains=1, iterations=10))


# ------------------------------------------------------------ summaries


def _chains(values, names=None):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[None, :, None]
    return PosteriorChains(values, names or [f"x{i}" for i in range(values.shape[2])])


def test_summary_constant_draws():
    s = summarize(_chains(np.full(100, 2.5)), diagnostics=False)
    row = s.iloc[0]
    assert (row["mean"], row["q2.5"], row["q97.5"]) == (2.5, 2.5, 2.5)


def test_summary_of_one_to_thousand():
    s = summarize(_chains(np.arange(1, 1001)), diagnostics=False).iloc[0]
    assert s["mean"] == 500.5
    # type-7 interpolation puts the 2.5% point at order statistic 1 + 0.025 * 999
    assert s["q2.5"] == pytest.approx(25.975)
    assert s["q97.5"] == pytest.approx(975.025)
    assert abs(s["q2.5"] - 25.5) < 0.5 and abs(s["q97.5"] - 975.5) < 0.5


def test_quantile_convention():
    assert quantile([1.0, 2.0, 3.0, 4.0], 0.5) == 2.5
    np.testing.assert_allclose(quantile(np.arange(11.0), [0.1, 0.9]), [1.0, 9.0])


def test_chains_reject_bad_input():
    with pytest.raises(ValueError):
        PosteriorChains(np.zeros((1, 3, 2)), ["a"])
    with pytest.raises(ValueError):
        PosteriorChains(np.full((1, 3, 1), np.nan), ["a"])
    with pytest.raises(KeyError):
        _chains(np.arange(5.0)).column("nope")


@pytest.fixture(scope="module")
def model_fit():
    counts = small_counts(K=3, T=20, seed=4, high=120)
    model = PosteriorModel(counts, continents=SMALL_CONTINENTS)
    cfg = SamplerConfig(chains=2, iterations=300, seed=1)
    return model, run_sampler(model, cfg)


def test_model_draws_satisfy_invariants(model_fit):
    model, ch = model_fit
    flat = ch.draws.reshape(-1, ch.draws.shape[2])
    for row in flat[::25]:
        model.unflatten(row).validate()
    assert ch.metadata["countries"] == ["K0", "K1", "K2"]
    assert ch.metadata["chain_info"][0]["moves"][0]["kind"] == "scale"


def test_model_summary_layout(model_fit):
    _, ch = model_fit
    s = summarize(ch)
    names = s.parameter.tolist()
    assert names[:4] == ["alpha[2]", "alpha[3]", "alpha[4]", "alpha[5]"]
    assert "Sigma[A][1,2]" in names and "p1[.,1]" in names
    assert not any(n.startswith("eps") for n in names)
    assert (s["q2.5"] <= s["q97.5"]).all()
    sig = ch.pooled("sigma[A]")
    row = s.set_index("parameter").loc["Sigma[A][1,1]"]
    assert row["mean"] == pytest.approx((sig ** 2).mean())
    assert isinstance(check_convergence(ch, ["alpha[2]"]), list)


def test_save_load_round_trip(model_fit, tmp_path):
    _, ch = model_fit
    ch.save(tmp_path / "full")
    back = PosteriorChains.load(tmp_path / "full")
    np.testing.assert_array_equal(back.draws, ch.draws)
    assert back.names == ch.names and back.groups == ch.groups
    np.testing.assert_array_equal(back.stats["n_leapfrog"], ch.stats["n_leapfrog"])
    ch.save(tmp_path / "lean", include_latent=False)
    lean = PosteriorChains.load(tmp_path / "lean")
    assert "eps" not in lean.groups
    np.testing.assert_array_equal(lean.group("sigma"), ch.group("sigma"))
    assert summarize(lean).equals(summarize(ch))


def test_summary_reproducible_given_seed():
    counts = small_counts(K=3, T=12, seed=4, high=60)
    model = PosteriorModel(counts, continents=SMALL_CONTINENTS)
    cfg = SamplerConfig(chains=1, iterations=60, seed=7)
    assert summarize(run_sampler(model, cfg)).equals(summarize(run_sampler(model, cfg)))


# ------------------------------------------------------------ scale move


def _toy_model(n_levels=1):
    """One block: log-scale s ~ N(0,1), levels x | s ~ N(0, exp(2s))."""
    layout = Layout(1, 1 + n_levels, 2, (1,))

    def logp(theta):
        s = theta[layout.slices["log_sigma"]][0]
        x = np.concatenate([theta[layout.slices["p1"]], theta[layout.slices["latent"]]])
        lp = -0.5 * s * s - 0.5 * float(x @ x) * math.exp(-2 * s) - x.size * s
        return lp, None

    return SimpleNamespace(parameterization="centered", shape=(1, 1 + n_levels, 2),
                           layout=layout, blocks=[np.array([0])], __call__=logp), logp


class _Callable:
    def __init__(self, ns, fn):
        self.__dict__.update(ns.__dict__)
        self._fn = fn

    def __call__(self, theta):
        return self._fn(theta)


def test_scale_move_is_an_involution():
    ns, fn = _toy_model(3)
    model = _Callable(ns, fn)
    move = ScaleMove(model)
    rng = np.random.default_rng(0)
    q = rng.normal(size=model.layout.dim)
    move.update(rng.normal(size=(5, model.layout.dim)))
    idx = move.level_index[0]
    ref = move.reference[idx]
    delta = 0.37
    fwd = q.copy()
    fwd[move.sigma_index[0]] += delta
    fwd[idx] = ref + math.exp(delta) * (q[idx] - ref)
    back = fwd.copy()
    back[move.sigma_index[0]] -= delta
    back[idx] = ref + math.exp(-delta) * (fwd[idx] - ref)
    np.testing.assert_allclose(back, q, atol=1e-12)


def test_scale_move_preserves_target():
    # alternate the move with an exact Gibbs draw of the levels given the
    # scale; the scale marginal must stay N(0, 1)
    ns, fn = _toy_model(4)
    model = _Callable(ns, fn)
    move = ScaleMove(model, init_scale=0.6)
    move.update(np.zeros((1, model.layout.dim)))
    rng = np.random.default_rng(1)
    idx = move.level_index[0]
    si = move.sigma_index[0]
    q = np.zeros(model.layout.dim)
    out = np.empty(20000)
    for k in range(out.size):
        q[idx] = rng.normal(size=idx.size) * math.exp(q[si])
        q, _, _ = move.step(q, fn(q)[0], rng, adapt=False)
        out[k] = q[si]
    assert abs(out.mean()) < 0.06
    assert out.var() == pytest.approx(1.0, abs=0.08)


def test_scale_move_requires_centered():
    with pytest.raises(ValueError):
        ScaleMove(SimpleNamespace(parameterization="noncentered"))
