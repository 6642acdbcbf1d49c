"""Command-line entry point: ``spikeevo <subcommand> ...``.

Every subcommand writes its outputs plus a ``manifest.json`` recording
the arguments, a hash of the resolved configuration, SHA-256 digests of
inputs and outputs, the seed and the package version.  Exit status is 0
on success, 1 on data errors (missing or malformed input) and 2 on usage
errors.  The output directory may be given with ``--out`` or, failing
that, the ``SPIKEEVO_OUT`` environment variable.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

logger = logging.getLogger("spikeevo")

OUT_ENV = "SPIKEEVO_OUT"


class DataError(Exception):
    """Bad or missing input data (exit status 1)."""


# ----------------------------------------------------------------- manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    argv: list
    config: dict
    config_hash: str
    seed: int | None
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    notes: list = field(default_factory=list)

    def write(self, outdir) -> Path:
        path = Path(outdir) / "manifest.json"
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, default=str)
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _need(path, what: str = "input") -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = _need(path, "config file")
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    with open(p) as fh:
        return json.load(fh)


def _outdir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise DataError(f"no output directory: pass --out or set {OUT_ENV}")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _set_threads(n: int | None) -> int:
    n = n or os.cpu_count() or 1
    try:
        import numba
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except Exception:  # pragma: no cover - numba is a hard dependency
        pass
    return n


# -------------------------------------------------------------- subcommands


def cmd_ingest(args, ctx):
    from .ingest import (DEFAULT_HEADER, deduplicate, filter_complete, open_text, parse_records,
                         read_reference, write_records_json, write_variants)
    ref = read_reference(_need(args.reference, "reference"))
    fasta = _need(args.fasta, "sequence file")
    ctx.inputs(fasta, args.reference)
    errors = []
    fields = tuple(args.header.split(",")) if args.header else DEFAULT_HEADER
    with open_text(fasta) as fh:
        records = parse_records(fh, fields, errors=errors)
    kept, report = filter_complete(records, ref)
    variants = deduplicate(kept, ref)
    out = ctx.out
    write_variants(out / "variants.csv", variants)
    write_records_json(out / "records.json", kept, variants)
    summary = {"records": len(records), "kept": len(kept), "unique": len(variants),
               "rejected": dict(report),
               "record_errors": [{"line": e.line, "reason": e.reason} for e in errors]}
    with open(out / "ingest_report.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    ctx.outputs("variants.csv", "records.json", "ingest_report.json")
    print(f"{len(records)} records, {len(kept)} complete, {len(variants)} unique")


def _variants(args):
    from .ingest import read_reference, read_variants
    ref = read_reference(_need(args.reference, "reference"))
    return read_variants(_need(args.variants, "variant table"), ref)


def cmd_cluster(args, ctx):
    from .cluster import cut_tree, distance_matrix, ward_cluster, write_outputs
    variants = _variants(args)
    ctx.inputs(args.variants, args.reference)
    if len(variants) < 2:
        raise DataError("need at least two unique variants to cluster")
    D = distance_matrix(variants)
    sizes = [v.count for v in variants] if args.weighted else None
    dg = ward_cluster(D, sizes)
    assignment = cut_tree(dg, args.k, variants=variants)
    paths = write_outputs(ctx.out, dg, assignment, variants, args.top_mutations, args.top_variants)
    ctx.outputs(*[p.name for p in paths.values()])
    print(f"{len(variants)} variants in {args.k} clusters")


def cmd_tabulate(args, ctx):
    from .cluster import read_assignment
    from .ingest import SequenceRecord, tabulate_counts
    variants = _variants(args)
    assignment = read_assignment(_need(args.assignment, "assignment"), variants)
    with open(_need(args.records, "record table")) as fh:
        rows = json.load(fh)
    ctx.inputs(args.variants, args.reference, args.assignment, args.records)
    records = [SequenceRecord(r["id"], r["country"], dt.date.fromisoformat(r["date"]),
                              variants[r["variant"]].residues) for r in rows]
    start = dt.date.fromisoformat(args.start)
    end = dt.date.fromisoformat(args.end) if args.end else max(r.date for r in records)
    countries = args.countries.split(",") if args.countries else None
    series = tabulate_counts(records, assignment, start, end, countries)
    series.to_csv(ctx.out / "counts.csv")
    with open(ctx.out / "counts.json", "w") as fh:
        json.dump(series.to_json(), fh)
    ctx.outputs("counts.csv", "counts.json")
    print(f"{len(series.countries)} countries x {series.days} days; "
          f"{sum(series.pre_start.values())} records before {start}")


def _model_from(config: dict, counts):
    from .model import PAPER_CONTINENTS, SCENARIOS, WINDOW, ContinentSpec, PosteriorModel, PriorConfig
    scenario = str(config.get("scenario", "base"))
    if scenario not in SCENARIOS:
        raise DataError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
    prior = SCENARIOS[scenario]
    if "prior" in config:
        prior = PriorConfig(**{**prior.to_dict(), **config["prior"]})
    continents = (ContinentSpec.from_mapping(config["continents"]) if "continents" in config
                  else PAPER_CONTINENTS)
    try:
        return PosteriorModel(counts, prior, continents, int(config.get("window", WINDOW)),
                              config.get("parameterization", "centered"))
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_fit(args, ctx):
    from .infer import SamplerConfig, check_convergence, run_sampler, summarize
    from .ingest import CountSeries
    config = ctx.config
    counts = CountSeries.from_csv(_need(args.counts, "counts"))
    ctx.inputs(args.counts)
    model = _model_from(config, counts)
    sampler = dict(config.get("sampler", {}))
    for key in ("chains", "iterations", "warmup"):
        if getattr(args, key) is not None:
            sampler[key] = getattr(args, key)
    sampler["seed"] = ctx.seed
    sampler["workers"] = min(ctx.threads, int(sampler.get("chains", 4)))
    cfg = SamplerConfig.from_dict(sampler)
    ctx.record_config({"model": model.metadata, "sampler": {k: v for k, v in cfg.to_dict().items()
                                                            if k != "workers"}})
    chains = run_sampler(model, cfg, progress=args.progress)
    chains.save(ctx.out, include_latent=not args.no_latent)
    summary = summarize(chains)
    summary.to_csv(ctx.out / "summary.csv", index=False)
    watched = chains.group_names("alpha") + chains.group_names("sigma")
    bad = check_convergence(chains, watched)
    for w in chains.warnings:
        ctx.note(w)
    if bad:
        ctx.note("split R-hat >= 1.05 for: " + ", ".join(bad))
    ctx.outputs(*[p for p in ("chains.csv", "latent.npz", "stats.csv", "chains.json",
                              "summary.csv") if (ctx.out / p).exists()])
    print(summary.head(len(watched)).to_string(index=False))


def _load_chains(path):
    from .infer import PosteriorChains
    src = _need(path, "chain directory")
    if not (src / "chains.json").exists():
        raise DataError(f"{src} holds no chains.json")
    return PosteriorChains.load(src)


def cmd_summarize(args, ctx):
    from .infer import summarize
    chains = _load_chains(args.chains)
    ctx.inputs(*(Path(args.chains) / n for n in ("chains.csv", "chains.json")))
    summary = summarize(chains, include_latent=args.latent)
    summary.to_csv(ctx.out / "summary.csv", index=False)
    ctx.outputs("summary.csv")
    print(summary.to_string(index=False, max_rows=40))


def cmd_forecast(args, ctx):
    from .forecast import latent_bands, posterior_predictive
    from .ingest import CountSeries
    chains = _load_chains(args.chains)
    if "eps" not in chains.groups:
        raise DataError("chains were saved without the latent block; refit without --no-latent")
    counts = CountSeries.from_csv(_need(args.counts, "counts")) if args.counts else None
    ctx.inputs(*(Path(args.chains) / n for n in ("chains.csv", "chains.json", "latent.npz")))
    if args.counts:
        ctx.inputs(args.counts)
    bands = latent_bands(chains, counts, horizon=args.horizon, windowed=args.windowed,
                         seed=ctx.seed)
    bands.to_csv(ctx.out / "bands.csv", index=False)
    ctx.outputs("bands.csv")
    if args.predict:
        country, day, n = args.predict.split(":")
        draws = posterior_predictive(chains, country, int(day), int(n), seed=ctx.seed)
        np.savetxt(ctx.out / "predictive.csv", draws, fmt="%d", delimiter=",",
                   header=",".join(f"cluster{c + 1}" for c in range(draws.shape[1])), comments="")
        ctx.outputs("predictive.csv")
    print(f"{len(bands)} band rows written")


def cmd_simulate(args, ctx):
    from .simulate import SimDesign, paper_design, simulate_dataset
    if args.design:
        design = SimDesign.load(_need(args.design, "design"))
        ctx.inputs(args.design)
        if args.seed is not None:
            design.seed = ctx.seed
    else:
        design = paper_design(seed=ctx.seed, days=args.days)
    ctx.record_config(design.to_dict())
    counts, latent = simulate_dataset(design)
    counts.to_csv(ctx.out / "counts.csv")
    design.save(ctx.out / "design.json")
    with open(ctx.out / "truth.json", "w") as fh:
        json.dump(design.truth(), fh, indent=1)
    np.savez_compressed(ctx.out / "latent.npz", p=latent.p, eps=latent.eps)
    ctx.outputs("counts.csv", "design.json", "truth.json", "latent.npz")
    print(f"simulated {len(design.countries)} countries x {design.days} days, "
          f"{int(counts.counts.sum())} sequences")


def cmd_recover(args, ctx):
    import pandas as pd
    from .infer import summarize
    from .simulate import SimDesign, recovery_report
    with open(_need(args.truth, "truth")) as fh:
        obj = json.load(fh)
    truth = SimDesign.from_dict(obj).truth() if "countries" in obj else obj
    if args.summary:
        summary = pd.read_csv(_need(args.summary, "summary"))
        ctx.inputs(args.summary)
    elif args.chains:
        summary = summarize(_load_chains(args.chains))
        ctx.inputs(Path(args.chains) / "chains.csv")
    else:
        raise DataError("pass --chains or --summary")
    ctx.inputs(args.truth)
    try:
        report = recovery_report(truth, summary)
    except KeyError as exc:
        raise DataError(str(exc)) from None
    report.to_csv(ctx.out / "recovery.csv", index=False)
    ctx.outputs("recovery.csv")
    alpha = report[report["parameter"].str.startswith("alpha")]
    print(report.to_string(index=False, max_rows=30))
    print(f"coverage {report.attrs['coverage']:.3f} overall, "
          f"{alpha['covered'].mean():.3f} for growth rates")


def cmd_explore(args, ctx):
    from .explore import SmoothSpec, composition_table, smoothed_curves
    from .ingest import CountSeries
    counts = CountSeries.from_csv(_need(args.counts, "counts"))
    ctx.inputs(args.counts)
    spec = SmoothSpec(args.span, args.degree)
    ctx.record_config({"span": spec.span, "degree": spec.degree, "proportions": args.proportions})
    composition_table(counts).to_csv(ctx.out / "composition.csv", index=False)
    smoothed_curves(counts, spec, args.proportions).to_csv(ctx.out / "loess.csv", index=False)
    ctx.outputs("composition.csv", "loess.csv")
    print("wrote composition.csv and loess.csv")


def _range(text):
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise DataError(f"range must look like START:END, got {text!r}") from None


def cmd_rmsd(args, ctx):
    import pandas as pd
    from .structmetrics import (kde, pairwise_rmsd, parse_backbone, read_conformations, rmsd)
    start, end = _range(args.range) if args.range else (None, None)
    if args.ref and args.alt:
        ctx.inputs(args.ref, args.alt)
        a = parse_backbone(_need(args.ref, "structure"), args.chain, start, end)
        b = parse_backbone(_need(args.alt, "structure"), args.alt_chain or args.chain, start, end)
        value = rmsd(a, b, args.mode)
        missing = sorted(set(a.missing) | set(b.missing))
        row = {"ref": str(args.ref), "alt": str(args.alt), "start": start, "end": end,
               "mode": args.mode, "rmsd": value, "missing": ";".join(map(str, missing))}
        if ctx.out_optional:
            pd.DataFrame([row]).to_csv(ctx.out / "rmsd.csv", index=False)
            ctx.outputs("rmsd.csv")
        print(repr(value))
        return
    if not args.set_r:
        raise DataError("pass --ref and --alt, or --set-r (and --set-m)")
    R = read_conformations(_need(args.set_r, "conformation set"), args.chain, start, end)
    ctx.inputs(args.set_r)
    samples = {"RR": pairwise_rmsd(R, kind="RR", mode=args.mode)}
    if args.set_m:
        M = read_conformations(_need(args.set_m, "conformation set"), args.chain, start, end)
        ctx.inputs(args.set_m)
        samples["MM"] = pairwise_rmsd(M, kind="MM", mode=args.mode)
        samples["RM"] = pairwise_rmsd(R, M, kind="RM", mode=args.mode)
    for kind, s in samples.items():
        s.to_csv(ctx.out / f"d_{kind}.csv")
        ctx.outputs(f"d_{kind}.csv")
        if len(s.values) >= 2 and np.ptp(s.values) > 0:
            kde(s).to_csv(ctx.out / f"kde_{kind}.csv")
            ctx.outputs(f"kde_{kind}.csv")
        else:
            ctx.note(f"d_{kind}: too few distinct values for a density estimate")
        print(f"d_{kind}: {len(s.values)} values, mean {s.values.mean()!r}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikeevo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV})")
        sp.add_argument("--config", help="JSON or TOML configuration file")
        sp.add_argument("--seed", type=int, default=None, help="seed for all randomness (default 0)")
        sp.add_argument("--threads", type=int, default=None, help="parallelism cap (default: all cores)")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(out_required=out_required)

    sp = sub.add_parser("ingest", help="parse, filter and deduplicate sequences")
    sp.add_argument("--fasta", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--header", help="comma-separated header field order (default id,country,date)")
    common(sp)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("cluster", help="Ward clustering of unique variants")
    sp.add_argument("--variants", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("-k", type=int, default=5)
    sp.add_argument("--weighted", action="store_true",
                    help="weight variants by their sequence counts in the linkage")
    sp.add_argument("--top-mutations", type=int, default=10)
    sp.add_argument("--top-variants", type=int, default=3)
    common(sp)
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("tabulate", help="daily cluster counts per country")
    sp.add_argument("--records", required=True)
    sp.add_argument("--variants", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--assignment", required=True)
    sp.add_argument("--start", default="2020-01-07")
    sp.add_argument("--end")
    sp.add_argument("--countries", help="comma-separated country order")
    common(sp)
    sp.set_defaults(func=cmd_tabulate)

    sp = sub.add_parser("fit", help="sample the posterior of the cluster model")
    sp.add_argument("--counts", required=True)
    sp.add_argument("--chains", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--no-latent", action="store_true", help="do not store innovation draws")
    sp.add_argument("--progress", type=int, default=0, help="log every N iterations")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("summarize", help="posterior summary table")
    sp.add_argument("--chains", required=True, help="directory written by fit")
    sp.add_argument("--latent", action="store_true", help="include innovations")
    common(sp)
    sp.set_defaults(func=cmd_summarize)

    sp = sub.add_parser("forecast", help="credible bands of cluster proportions")
    sp.add_argument("--chains", required=True)
    sp.add_argument("--counts")
    sp.add_argument("--horizon", type=int, default=0)
    sp.add_argument("--windowed", action="store_true",
                    help="report window-averaged instead of daily proportions")
    sp.add_argument("--predict", help="COUNTRY:DAY:N posterior predictive counts")
    common(sp)
    sp.set_defaults(func=cmd_forecast)

    sp = sub.add_parser("simulate", help="synthetic counts from known parameters")
    sp.add_argument("--design", help="design JSON (default: the nine-country recovery design)")
    sp.add_argument("--days", type=int, default=282)
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("recover", help="compare a fit with the simulation truth")
    sp.add_argument("--truth", required=True, help="design.json or truth.json")
    sp.add_argument("--chains")
    sp.add_argument("--summary")
    common(sp)
    sp.set_defaults(func=cmd_recover)

    sp = sub.add_parser("explore", help="composition and LOESS curves")
    sp.add_argument("--counts", required=True)
    sp.add_argument("--span", type=float, default=0.75)
    sp.add_argument("--degree", type=int, default=2, choices=(1, 2))
    sp.add_argument("--proportions", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_explore)

    sp = sub.add_parser("rmsd", help="backbone RMSD and pairwise RMSD distributions")
    sp.add_argument("--ref", help="reference structure (PDB)")
    sp.add_argument("--alt", help="structure to compare (PDB)")
    sp.add_argument("--set-r", help="reference-sequence conformations (PDB models or table)")
    sp.add_argument("--set-m", help="mutated-sequence conformations")
    sp.add_argument("--range", help="residue range START:END (inclusive)")
    sp.add_argument("--chain", default="A")
    sp.add_argument("--alt-chain")
    sp.add_argument("--mode", choices=("raw", "superposed"), default="raw")
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_rmsd)
    return p


class _Context:
    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.seed = 0 if args.seed is None else args.seed
        self.threads = _set_threads(args.threads)
        self.config = _load_config(args.config)
        self.out_optional = bool(args.out or os.environ.get(OUT_ENV))
        self.out = _outdir(args) if (args.out_required or self.out_optional) else None
        self._inputs, self._outputs, self._notes = {}, [], []
        self._config = dict(self.config)
        self.started = _now()
        if args.config:
            self.inputs(args.config)

    def inputs(self, *paths):
        for p in paths:
            if p is not None:
                self._inputs[str(p)] = sha256_file(_need(p))

    def outputs(self, *names):
        self._outputs.extend(names)

    def note(self, text):
        logger.warning(text)
        self._notes.append(text)

    def record_config(self, extra: dict):
        self._config = {**self.config, **extra}

    def finish(self):
        if self.out is None:
            return
        manifest = RunManifest(
            subcommand=self.args.command, argv=self.argv, config=self._config,
            config_hash=config_hash(self._config), seed=self.seed,
            inputs=self._inputs,
            outputs={n: sha256_file(self.out / n) for n in dict.fromkeys(self._outputs)},
            started=self.started, finished=_now(), notes=self._notes)
        manifest.write(self.out)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        ctx = _Context(args, argv)
        args.func(args, ctx)
        ctx.finish()
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logger.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
