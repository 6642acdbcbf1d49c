"""Acceptance criteria, one test (or a few parts) per criterion.

Each part records PASS/FAIL/SKIP with its key numbers; the terminal
summary prints one line per criterion.  Expensive parts are marked
``slow`` so ``pytest -m "not slow"`` gives a quick run.

Computational budgets that differ from the criterion text are fixed here
and explained in the decisions ledger:

* criterion 1 coverage: 20 replicates, one chain of 800 iterations each
  (400 warmup) instead of four chains of 2000;
* criterion 9: scenarios 1-3 fitted with 2 chains x 1000 iterations and
  compared with the criterion-1 base fit.

The simulation seeds (1 for the main data set, 101-120 for replicates)
were fixed before any fit was run.
"""

from __future__ import annotations

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import SMALL_CONTINENTS, record_acceptance, small_counts
from oracles import multinomial_total_mass, ward_from_scratch
from spikeevo.cli import main as cli_main
from spikeevo.cli import sha256_file
from spikeevo.cluster import DistanceMatrix, ward_cluster
from spikeevo.diagnostics import effective_sample_size, split_rhat
from spikeevo.infer import SamplerConfig, run_sampler, summarize
from spikeevo.model import (SCENARIOS, PosteriorModel, alr, log_likelihood, propagate)
from spikeevo.simulate import paper_design, recovery_report, simulate_dataset
from spikeevo.structmetrics import Conformation, parse_backbone, rmsd

TRUE_ALPHA = np.array([-0.05, 0.00, 0.02, 0.03])
ALPHA_NAMES = [f"alpha[{c}]" for c in range(2, 6)]
MAIN_SEED = 1
REPLICATE_SEEDS = range(101, 121)


def check(criterion, part, ok, detail):
    record_acceptance(criterion, part, "PASS" if ok else "FAIL", detail)
    assert ok, detail


def skip(criterion, part, reason):
    record_acceptance(criterion, part, "SKIP", reason)
    pytest.skip(reason)


# ------------------------------------------------------------ shared fit


@pytest.fixture(scope="module")
def paper_fit():
    design = paper_design(seed=MAIN_SEED)
    counts, latent = simulate_dataset(design)
    model = PosteriorModel(counts)
    cfg = SamplerConfig(chains=4, iterations=2000, warmup=1000, seed=MAIN_SEED)
    t0 = time.perf_counter()
    chains = run_sampler(model, cfg)
    seconds = time.perf_counter() - t0
    return {"design": design, "counts": counts, "latent": latent, "model": model,
            "chains": chains, "summary": summarize(chains), "seconds": seconds}


def realized_drift(latent) -> np.ndarray:
    """Average daily change of the true log-ratios over countries: the drift
    the data actually carry, alpha plus the mean realized innovation."""
    lev = alr(latent.p)
    return ((lev[:, -1] - lev[:, 0]) / (lev.shape[1] - 1)).mean(axis=0)


@pytest.mark.slow
def test_c1_single_fit_recovery(paper_fit):
    s = paper_fit["summary"].set_index("parameter")
    chains = paper_fit["chains"]
    means = s.loc[ALPHA_NAMES, "mean"].to_numpy()
    sds = s.loc[ALPHA_NAMES, "sd"].to_numpy()
    errors = np.abs(means - TRUE_ALPHA)
    watched = ALPHA_NAMES + chains.group_names("sigma")
    rhat = {n: split_rhat(chains.column(n)) for n in watched}
    drift = realized_drift(paper_fit["latent"])
    minutes = paper_fit["seconds"] / 60
    detail = (f"alpha means {np.round(means, 4).tolist()} vs truth {TRUE_ALPHA.tolist()}, "
              f"max |error| {errors.max():.4f} (tol 0.01), posterior sd "
              f"{np.round(sds, 4).tolist()}, realized drift {np.round(drift, 4).tolist()}; "
              f"max R-hat {max(rhat.values()):.3f}; {minutes:.1f} min on "
              f"{os.cpu_count()} core(s)")
    ok = errors.max() <= 0.01 and max(rhat.values()) < 1.05 and minutes < 30
    check(1, "single fit", ok, detail)


def _replicate(seed):
    counts, _ = simulate_dataset(paper_design(seed=seed))
    model = PosteriorModel(counts)
    chains = run_sampler(model, SamplerConfig(chains=1, iterations=800, warmup=400, seed=seed))
    truth = {n: float(a) for n, a in zip(ALPHA_NAMES, TRUE_ALPHA)}
    return recovery_report(truth, summarize(chains, diagnostics=False))


@pytest.mark.slow
def test_c1_alpha_coverage_over_replicates():
    seeds = list(REPLICATE_SEEDS)[: int(os.environ.get("SPIKEEVO_REPLICATES", "20"))]
    covered, rows = [], []
    for seed in seeds:
        rep = _replicate(seed)
        covered.extend(rep.covered.tolist())
        rows.append({"seed": seed, "covered": int(rep.covered.sum()),
                     "mean": rep["mean"].round(4).tolist()})
    log = os.environ.get("SPIKEEVO_ACCEPTANCE_LOG")
    if log:
        Path(log).write_text(json.dumps(rows, indent=1))
    frac = float(np.mean(covered))
    check(1, "coverage", frac >= 0.8 and len(seeds) == 20,
          f"{sum(covered)}/{len(covered)} alpha intervals cover the truth ({frac:.2f}, "
          f"need >= 0.80) over {len(seeds)} replicates")


# ------------------------------------------------------------ criterion 2


def test_c2_gradient_finite_differences():
    counts = small_counts(K=3, T=20, seed=2)
    worst = 0.0
    for parameterization in ("centered", "noncentered"):
        model = PosteriorModel(counts, continents=SMALL_CONTINENTS,
                               parameterization=parameterization)
        rng = np.random.default_rng(20)
        h = 1e-5
        for _ in range(50):
            theta = model.initial_point(rng) + rng.normal(scale=0.3, size=model.dim)
            theta[model.layout.slices["log_sigma"]] = np.log(rng.uniform(0.3, 1.0, 2))
            _, g = model(theta)
            fd = np.empty(model.dim)
            for k in range(model.dim):
                e = np.zeros(model.dim)
                e[k] = h
                fd[k] = (model(theta + e)[0] - model(theta - e)[0]) / (2 * h)
            worst = max(worst, float((np.abs(g - fd) / np.maximum(1.0, np.abs(fd))).max()))
    check(2, "", worst < 1e-5, f"max relative error {worst:.2e} over 2 x 50 points "
          f"(denominator max(1, |fd|))")


# ------------------------------------------------------------ criterion 3


def test_c3_likelihood_normalization():
    rng = np.random.default_rng(3)
    worst = 0.0
    for n in range(5):
        for _ in range(5):
            p = rng.dirichlet(np.ones(3))
            total = sum(math.exp(log_likelihood(np.array([[[a, b, n - a - b]]]), p[None, None]))
                        for a in range(n + 1) for b in range(n + 1 - a))
            worst = max(worst, abs(total - 1), abs(multinomial_total_mass(n, p) - 1))
    check(3, "", worst < 1e-10, f"max |total mass - 1| = {worst:.1e} for n = 0..4, C = 3")


# ------------------------------------------------------------ criterion 4


def test_c4_dynamics_closed_form():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        C = int(rng.integers(2, 7))
        T = int(rng.integers(2, 60))
        p1 = rng.dirichlet(np.ones(C))
        alpha = rng.normal(scale=0.1, size=C - 1)
        traj = propagate(p1, alpha, np.zeros((T - 1, C - 1)))
        t = np.arange(T)[:, None]
        expect = p1 * np.exp(t * np.concatenate([[0.0], alpha]))
        expect /= expect.sum(axis=1, keepdims=True)
        worst = max(worst, float(np.abs(traj - expect).max()))
    check(4, "", worst <= 1e-12, f"max error {worst:.1e} over 200 random instances")


# ------------------------------------------------------------ criterion 5


def test_c5_clustering_oracle():
    rng = np.random.default_rng(5)
    mismatches, height_err, monotone = 0, 0.0, True
    for _ in range(50):
        n = int(rng.integers(2, 11))
        sq = np.triu(rng.uniform(0.1, 5.0, (n, n)), 1)
        sq = sq + sq.T
        dg = ward_cluster(DistanceMatrix.from_square(sq))
        oracle = ward_from_scratch(sq)
        mismatches += int(not np.array_equal(dg.merges[:, [0, 1, 3]], oracle[:, [0, 1, 3]]))
        height_err = max(height_err, float(np.abs(dg.heights - oracle[:, 2]).max()))
        monotone &= bool(np.all(np.diff(dg.heights) >= 0))
    check(5, "", mismatches == 0 and height_err < 1e-10 and monotone,
          f"{50 - mismatches}/50 merge sequences identical, max height difference "
          f"{height_err:.1e}, heights nondecreasing: {monotone}")


# ------------------------------------------------------------ criterion 6


def test_c6_sampler_calibration():
    def target(q):
        return -0.5 * float(q @ q), -q

    cfg = SamplerConfig(chains=4, iterations=3000, warmup=1000, seed=6)
    ch = run_sampler(target, cfg, dim=10)
    z, var_ok = [], True
    for k in range(10):
        x = ch.draws[:, :, k]
        z.append(abs(x.mean()) / (x.std() / math.sqrt(effective_sample_size(x))))
        var_ok &= 0.9 <= x.var() <= 1.1
    again = run_sampler(target, cfg, dim=10)
    same = np.array_equal(ch.draws, again.draws)
    check(6, "", max(z) < 3 and var_ok and same,
          f"max |mean| / (sd / sqrt(ESS)) = {max(z):.2f} (< 3), variances in "
          f"[{ch.draws.var(axis=(0, 1)).min():.3f}, {ch.draws.var(axis=(0, 1)).max():.3f}], "
          f"bit-identical rerun: {same}")


# ------------------------------------------------------------ criterion 7


def test_c7_rmsd_geometry():
    rng = np.random.default_rng(7)
    # coordinates on a 1/8 grid make the translated differences exact
    a = Conformation(np.arange(1, 16), rng.integers(-400, 400, (15, 4, 3)) / 8.0)
    b = Conformation(a.positions, a.coords + np.array([3.0, 4.0, 0.0]))
    exact = rmsd(a, b, "raw") == 5.0
    worst_rigid, order_ok = 0.0, True
    for k in range(1000):
        n = int(rng.integers(3, 20))
        p = Conformation(np.arange(n), rng.normal(scale=5, size=(n, 4, 3)))
        R = Rotation.random(random_state=k).as_matrix()
        moved = Conformation(p.positions, p.coords @ R.T + rng.normal(scale=20, size=3))
        worst_rigid = max(worst_rigid, rmsd(p, moved, "superposed"))
        q = Conformation(p.positions, rng.normal(scale=5, size=(n, 4, 3)))
        order_ok &= rmsd(p, q, "raw") >= rmsd(p, q, "superposed")
    check(7, "", exact and worst_rigid < 1e-8 and order_ok,
          f"translation raw RMSD exactly |v|: {exact}; max superposed RMSD after rigid "
          f"motion {worst_rigid:.1e}; raw >= superposed on 1000 pairs: {order_ok}")


# ------------------------------------------------------------ criterion 8


def _pdb(name):
    for base in (os.environ.get("SPIKEEVO_PDB_DIR"), Path(__file__).parent / "data"):
        if base:
            for suffix in (".pdb", ".PDB", ".ent"):
                for stem in (name.lower(), name.upper()):
                    path = Path(base) / f"{stem}{suffix}"
                    if path.exists():
                        return path
    return None


def test_c8_d614g_validation():
    ref, alt = _pdb("6xm0"), _pdb("6xs6")
    if ref is None or alt is None:
        skip(8, "", "PDB files 6XM0 and 6XS6 not available locally "
             "(set SPIKEEVO_PDB_DIR or place them in tests/data)")
    chain = os.environ.get("SPIKEEVO_PDB_CHAIN", "A")
    results = {}
    for mode in ("raw", "superposed"):
        local = rmsd(parse_backbone(ref, chain, 607, 620), parse_backbone(alt, chain, 607, 620),
                     mode)
        unit = rmsd(parse_backbone(ref, chain, 531, 620), parse_backbone(alt, chain, 531, 620),
                    mode)
        results[mode] = (local, unit, abs(local - 0.38) <= 0.15 and abs(unit - 2.61) <= 0.3)
    matching = [m for m, r in results.items() if r[2]]
    detail = "; ".join(f"{m}: 607-620 {r[0]:.3f}, 531-620 {r[1]:.3f}"
                       for m, r in results.items())
    check(8, "", bool(matching), f"{detail}; matching mode: {matching or 'none'}")


# ------------------------------------------------------------ criterion 9


@pytest.mark.slow
def test_c9_prior_sensitivity(paper_fit):
    base = paper_fit["summary"].set_index("parameter").loc[ALPHA_NAMES, "mean"].to_numpy()
    shifts = {}
    for scenario in ("1", "2", "3"):
        model = PosteriorModel(paper_fit["counts"], SCENARIOS[scenario])
        chains = run_sampler(model, SamplerConfig(chains=2, iterations=1000, seed=9))
        means = summarize(chains, diagnostics=False).set_index("parameter").loc[
            ALPHA_NAMES, "mean"].to_numpy()
        shifts[scenario] = float(np.abs(means - base).max())
    check(9, "", max(shifts.values()) < 0.01,
          "max |alpha mean shift| vs base: " + ", ".join(
              f"scenario {k} {v:.4f}" for k, v in shifts.items()) + " (tol 0.01)")


# ------------------------------------------------------------ criterion 10


def test_c10_cli_round_trip(tmp_path):
    design = {
        "countries": ["US", "CA", "UK"], "continents": {"NA": ["US", "CA"], "EU": ["UK"]},
        "days": 30, "alpha": [-0.05, 0.0, 0.02, 0.03], "p1": [3 / 45, 39 / 45, 1 / 45, 1 / 45,
                                                               1 / 45],
        "sigma": [0.24, 0.38], "omega": [[[1, -0.1], [-0.1, 1]], [[1]]],
        "totals": {"low": 0, "high": 600, "zero_fraction": 0.1}, "seed": 10,
    }
    (tmp_path / "design.json").write_text(json.dumps(design))
    (tmp_path / "fit.json").write_text(json.dumps(
        {"continents": design["continents"], "sampler": {"chains": 2, "iterations": 200}}))
    codes = [
        cli_main(["simulate", "--design", str(tmp_path / "design.json"),
                  "--out", str(tmp_path / "sim")]),
        cli_main(["fit", "--counts", str(tmp_path / "sim" / "counts.csv"), "--config",
                  str(tmp_path / "fit.json"), "--seed", "7", "--out", str(tmp_path / "fit")]),
        cli_main(["summarize", "--chains", str(tmp_path / "fit"),
                  "--out", str(tmp_path / "summary")]),
    ]
    complete = True
    for step in ("sim", "fit", "summary"):
        path = tmp_path / step / "manifest.json"
        if not path.exists():
            complete = False
            continue
        m = json.loads(path.read_text())
        keys = {"subcommand", "config_hash", "inputs", "outputs", "seed", "version",
                "started", "finished"}
        complete &= keys <= set(m) and bool(m["outputs"])
        complete &= all(sha256_file(tmp_path / step / n) == d for n, d in m["outputs"].items())
        complete &= all(sha256_file(p) == d for p, d in m["inputs"].items())
    check(10, "", codes == [0, 0, 0] and complete,
          f"exit codes {codes}; manifests complete and digests recomputable: {complete}")
