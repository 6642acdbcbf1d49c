from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from spikeevo import __version__
from spikeevo.cli import OUT_ENV, main, sha256_file

AA = "ACDEFGHIKLMNPQRSTVWY"


def run(*argv):
    return main([str(a) for a in argv])


def manifest(directory):
    with open(directory / "manifest.json") as fh:
        return json.load(fh)


@pytest.fixture
def fasta_inputs(tmp_path):
    rng = np.random.default_rng(0)
    ref = "".join(rng.choice(list(AA), 1273))
    (tmp_path / "ref.fasta").write_text(">ref\n" + ref + "\n")
    lines = []
    for k in range(120):
        seq = list(ref)
        group = k % 3
        for p in {0: [613], 1: [613, 221], 2: [100, 500]}[group]:
            seq[p] = "G" if ref[p] != "G" else "A"
        if rng.random() < 0.3:
            seq[rng.integers(1273)] = "W"
        country = ["US", "UK", "IN"][k % 3 if k % 5 else 0]
        date = f"2020-03-{1 + k % 20:02d}"
        lines.append(f">s{k}|{country}|{date}\n{''.join(seq)}\n")
    lines.append(">short|US|2020-03-02\nMFV\n")
    (tmp_path / "seqs.fasta").write_text("".join(lines))
    return tmp_path


def test_sequence_pipeline(fasta_inputs):
    d = fasta_inputs
    assert run("ingest", "--fasta", d / "seqs.fasta", "--reference", d / "ref.fasta",
               "--out", d / "ing") == 0
    report = json.loads((d / "ing" / "ingest_report.json").read_text())
    assert report["records"] == 121 and report["kept"] == 120
    m = manifest(d / "ing")
    assert m["subcommand"] == "ingest" and m["version"] == __version__
    assert m["inputs"][str(d / "seqs.fasta")] == sha256_file(d / "seqs.fasta")
    assert set(m["outputs"]) == {"variants.csv", "records.json", "ingest_report.json"}

    assert run("cluster", "--variants", d / "ing" / "variants.csv", "--reference",
               d / "ref.fasta", "-k", 3, "--out", d / "cl") == 0
    for name in ("dendrogram.json", "assignment.csv", "mutation_frequencies.csv",
                 "top_variants.csv", "cluster_sizes.csv"):
        assert (d / "cl" / name).exists()

    assert run("tabulate", "--records", d / "ing" / "records.json", "--variants",
               d / "ing" / "variants.csv", "--reference", d / "ref.fasta", "--assignment",
               d / "cl" / "assignment.csv", "--start", "2020-03-01", "--out", d / "tab") == 0
    counts = pd.read_csv(d / "tab" / "counts.csv")
    assert list(counts.columns) == ["country", "date", "cluster", "count"]
    assert counts["count"].sum() == 120 and counts.cluster.max() == 3

    assert run("explore", "--counts", d / "tab" / "counts.csv", "--span", 0.8, "--degree", 1,
               "--out", d / "ex") == 0
    comp = pd.read_csv(d / "ex" / "composition.csv")
    np.testing.assert_allclose(comp.groupby("country").proportion.sum(), 1.0)


@pytest.fixture
def tiny_design(tmp_path):
    design = {
        "countries": ["A", "B", "C"], "continents": {"X": ["A", "B"], "Y": ["C"]},
        "days": 25, "alpha": [-0.03, 0.0, 0.02, 0.03], "p1": [0.1, 0.6, 0.1, 0.1, 0.1],
        "sigma": [0.2, 0.3], "omega": [[[1, 0.2], [0.2, 1]], [[1]]],
        "totals": {"low": 50, "high": 300, "zero_fraction": 0.1}, "seed": 3,
    }
    (tmp_path / "d.json").write_text(json.dumps(design))
    (tmp_path / "fit.toml").write_text(
        '[continents]\nX = ["A", "B"]\nY = ["C"]\n\n[sampler]\nchains = 2\n'
        'iterations = 120\n')
    return tmp_path


def test_model_pipeline_and_reproducibility(tiny_design, monkeypatch):
    d = tiny_design
    assert run("simulate", "--design", d / "d.json", "--out", d / "sim") == 0
    monkeypatch.setenv(OUT_ENV, str(d / "fit"))
    assert run("fit", "--counts", d / "sim" / "counts.csv", "--config", d / "fit.toml",
               "--seed", 7, "--threads", 1) == 0
    for name in ("chains.csv", "summary.csv", "manifest.json", "latent.npz"):
        assert (d / "fit" / name).exists()
    m = manifest(d / "fit")
    assert m["seed"] == 7 and m["config"]["sampler"]["chains"] == 2
    assert m["outputs"]["summary.csv"] == sha256_file(d / "fit" / "summary.csv")
    monkeypatch.delenv(OUT_ENV)

    # same inputs and seed: byte-identical numeric outputs
    assert run("fit", "--counts", d / "sim" / "counts.csv", "--config", d / "fit.toml",
               "--seed", 7, "--out", d / "fit2") == 0
    for name in ("chains.csv", "summary.csv"):
        assert sha256_file(d / "fit" / name) == sha256_file(d / "fit2" / name)

    assert run("summarize", "--chains", d / "fit", "--out", d / "sum") == 0
    assert (d / "sum" / "summary.csv").read_bytes() == (d / "fit" / "summary.csv").read_bytes()
    assert run("forecast", "--chains", d / "fit", "--counts", d / "sim" / "counts.csv",
               "--horizon", 5, "--predict", "A:27:40", "--out", d / "fc") == 0
    bands = pd.read_csv(d / "fc" / "bands.csv")
    assert bands.day.max() == 30
    pred = pd.read_csv(d / "fc" / "predictive.csv")
    assert (pred.sum(axis=1) == 40).all()
    assert run("recover", "--truth", d / "sim" / "design.json", "--chains", d / "fit",
               "--out", d / "rec") == 0
    rec = pd.read_csv(d / "rec" / "recovery.csv")
    assert {"alpha[2]", "sigma[X]"} <= set(rec.parameter)


def test_rmsd_command(tmp_path, capsys):
    from test_structmetrics import pdb_text
    rng = np.random.default_rng(0)
    a = rng.normal(scale=4, size=(21, 4, 3)).round(3)
    (tmp_path / "a.pdb").write_text(pdb_text(a, start=600))
    (tmp_path / "b.pdb").write_text(pdb_text(a + [3.0, 4.0, 0.0], start=600, skip={619}))
    assert run("rmsd", "--ref", tmp_path / "a.pdb", "--alt", tmp_path / "b.pdb",
               "--range", "607:620", "--mode", "raw") == 0
    assert float(capsys.readouterr().out.strip()) == pytest.approx(5.0, abs=1e-9)
    assert run("rmsd", "--ref", tmp_path / "a.pdb", "--alt", tmp_path / "b.pdb",
               "--range", "607:620", "--mode", "superposed", "--out", tmp_path / "r") == 0
    row = pd.read_csv(tmp_path / "r" / "rmsd.csv").iloc[0]
    assert row["rmsd"] == pytest.approx(0.0, abs=1e-6) and str(row["missing"]) == "619"

    from spikeevo.structmetrics import Conformation, write_conformation_table
    confs = [Conformation(np.arange(1, 6), rng.normal(size=(5, 4, 3))) for _ in range(4)]
    write_conformation_table(tmp_path / "R.txt", confs[:2])
    write_conformation_table(tmp_path / "M.txt", confs[2:])
    assert run("rmsd", "--set-r", tmp_path / "R.txt", "--set-m", tmp_path / "M.txt",
               "--out", tmp_path / "pairs") == 0
    assert len(pd.read_csv(tmp_path / "pairs" / "d_RM.csv")) == 4
    assert len(pd.read_csv(tmp_path / "pairs" / "kde_RM.csv")) == 512
    # a single within-set pair has no density; the run notes it and goes on
    assert not (tmp_path / "pairs" / "kde_RR.csv").exists()
    assert any("d_RR" in n for n in manifest(tmp_path / "pairs")["notes"])


def test_exit_codes(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert run("fit", "--bogus") == 2
    assert "usage" in capsys.readouterr().err
    assert run("nonsense") == 2
    assert run() == 2
    missing = tmp_path / "nope.csv"
    assert run("explore", "--counts", missing, "--out", tmp_path / "o") == 1
    assert str(missing) in capsys.readouterr().err
    (tmp_path / "c.csv").write_text("country,date,cluster1\nA,2020-01-07,3\n")
    assert run("explore", "--counts", tmp_path / "c.csv") == 1
    assert OUT_ENV in capsys.readouterr().err
    assert run("rmsd", "--ref", tmp_path / "x.pdb", "--alt", tmp_path / "y.pdb") == 1
