"""Command-line entry point: simulate, impute, pool, metrics, diagnose."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, SchemaError, load_dataset, missing_summary, parse_schema, write_dataset, write_mask, read_mask
from .diagnostics import export_traces, overlay_tables, read_traces, rhat_table, write_overlay_csv, write_rhat_csv
from .gibbs import ChainConfig, ChainError, Priors
from .imputation import imputation_filename, multiple_impute, priors_json
from .pooling import PoolingError, mean_estimate, pool_from_csv, pool_mean, write_pooled_csv
from .simulation import SimConfig, accuracy_metrics, generate_complete, impose_mar, marginal_draw_imputations

log = logging.getLogger("mlcopula")

MANIFEST = "manifest.json"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, seed, inputs: dict, started: float, extra=None) -> None:
    path = out / MANIFEST
    manifest = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    manifest.update(extra or {})
    manifest.update(
        {
            "command": command,
            "resolved_config": config,
            "seed": seed,
            "input_hashes": {k: _sha256(v) for k, v in inputs.items()},
            "artifact_version": __version__,
            "wall_clock_seconds": round(time.perf_counter() - started, 3),
        }
    )
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- simulate ---------------------------------------------------------------


def cmd_simulate(args, started) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SimConfig(m=args.clusters, n_i=args.size, rho=args.rho, target_missing=args.missing,
                    seed=args.seed, gamma_scale=args.gamma_scale)
    complete, truth = generate_complete(cfg)
    observed, intercepts = impose_mar(complete, cfg.target_missing, seed=cfg.seed + 1)
    write_dataset(complete, out / "truth.csv")
    write_dataset(observed, out / "observed.csv")
    write_mask(observed, out / "mask.csv")
    (out / "schema.json").write_text(json.dumps(complete.schema.to_json(), indent=2) + "\n", encoding="utf-8")
    params = truth.to_json() | {"mar_intercepts": intercepts, "mar_slope": 1.0}
    (out / "truth-params.json").write_text(json.dumps(params, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    summary = missing_summary(observed)
    write_manifest(out, "simulate", asdict(cfg), cfg.seed, {}, started, {"missing_percent": summary})
    return 0


# -- impute -----------------------------------------------------------------

IMPUTE_DEFAULTS = {
    "m": 10,
    "burnin": 1000,
    "iter_thin": 100,
    "seed": 0,
    "nu_gamma": None,
    "nu_psi": None,
    "paper_df": False,
    "max_retries": 1000,
    "chains": 1,
    "jobs": 1,
    "random_effects": True,
    "sweep": "blocked",
}


def resolve_impute_config(args) -> dict:
    """Flags override the config file, which overrides built-in defaults."""
    resolved = dict(IMPUTE_DEFAULTS)
    if args.config:
        from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        unknown = set(from_file) - set(IMPUTE_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown keys in config file: {', '.join(sorted(unknown))}")
        resolved.update(from_file)
    for key in IMPUTE_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = val
    return resolved


def cmd_impute(args, started) -> int:
    out = Path(args.out)
    resolved = resolve_impute_config(args)
    schema = parse_schema(Path(args.schema))
    tokens = ("",) + tuple(args.missing_token or ())
    ds = load_dataset(args.data, schema, missing_tokens=tokens)
    d = len(ds.ordered_idx) + sum(ds.columns[j].levels - 1 for j in ds.nominal_idx)
    priors = Priors.default(d)
    if resolved["nu_gamma"] is not None:
        priors.nu_gamma = float(resolved["nu_gamma"])
    if resolved["nu_psi"] is not None:
        priors.nu_psi = float(resolved["nu_psi"])
    config = ChainConfig(
        burn_in=int(resolved["burnin"]),
        n_keep=int(resolved["m"]),
        thin=int(resolved["iter_thin"]),
        seed=int(resolved["seed"]),
        max_retries=int(resolved["max_retries"]),
        paper_df=bool(resolved["paper_df"]),
        random_effects=bool(resolved["random_effects"]),
        sweep=str(resolved["sweep"]),
    )
    imputed = multiple_impute(ds, priors, config, out_dir=out, n_chains=int(resolved["chains"]), jobs=int(resolved["jobs"]))
    traces = {}
    for res in imputed.chains:
        name = "trace.csv" if len(imputed.chains) == 1 else f"trace_chain{res.chain + 1}.csv"
        export_traces(res.trace, out / name)
        traces[name] = res.stats.exhausted
    resolved["priors"] = priors_json(priors)
    write_manifest(out, "impute", resolved, config.seed, {"data": args.data, "schema": args.schema}, started,
                   {"traces": sorted(traces)})
    return 0


# -- pool -------------------------------------------------------------------


def cmd_pool(args, started) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pooled = pool_from_csv(args.estimates)
    write_pooled_csv(pooled, out / "pooled.csv")
    write_manifest(out, "pool", {"estimates": str(args.estimates)}, None, {"estimates": args.estimates}, started)
    return 0


# -- metrics ----------------------------------------------------------------


def _schema_with_labels(schema_json: dict, truth) -> dict:
    """Pin nominal codes to the truth file's labels so every file agrees."""
    cols = []
    for c in schema_json["columns"]:
        c = dict(c)
        if c["kind"] == "nominal":
            c["levels"] = list(truth.category_labels[c["name"]])
        cols.append(c)
    return {"cluster": schema_json["cluster"], "columns": cols}


def cmd_metrics(args, started) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    imp_dir = Path(args.imputed_dir)
    if args.schema:
        schema_json = parse_schema(Path(args.schema)).to_json()
    else:
        manifest_path = imp_dir / MANIFEST
        if not manifest_path.exists():
            raise FileNotFoundError(f"{manifest_path} not found; pass --schema")
        schema_json = json.loads(manifest_path.read_text(encoding="utf-8"))["schema"]
    truth = load_dataset(args.truth, schema_json)
    schema = parse_schema(_schema_with_labels(schema_json, truth))
    truth = load_dataset(args.truth, schema)
    mask = read_mask(args.mask, schema)
    if mask.shape != truth.values.shape:
        raise DataError("mask and truth differ in shape")
    files = sorted(imp_dir.glob("imp_*.csv"))
    if not files:
        raise FileNotFoundError(f"no imp_*.csv files in {imp_dir}")
    imputed = [load_dataset(f, schema).values for f in files]
    M = len(imputed)

    observed = truth.with_values(np.where(mask, truth.values, np.nan), mask)
    baseline = marginal_draw_imputations(observed, M, seed=args.baseline_seed)
    reports = {"copula": accuracy_metrics(truth, imputed, mask), "marginal_draw": accuracy_metrics(truth, baseline, mask)}

    with open(out / "accuracy.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "metric", "method", "value"])
        for method, rep in reports.items():
            for name, kind, v in rep.rows():
                w.writerow([name, kind, method, "" if v is None else repr(v)])

    with open(out / "means.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "truth", "complete_case", "copula_q_bar", "copula_T", "marginal_draw_q_bar", "marginal_draw_T"])
        for j in truth.ordered_idx:
            j = int(j)
            cc = mean_estimate(truth.values[mask[:, j], j])[0] if mask[:, j].sum() >= 2 else float("nan")
            pc = pool_mean(imputed, j) if M >= 2 else None
            pm = pool_mean(baseline, j) if M >= 2 else None
            w.writerow([
                truth.names[j],
                repr(float(truth.values[:, j].mean())),
                repr(cc),
                "" if pc is None else repr(pc.q_bar),
                "" if pc is None else repr(pc.T),
                "" if pm is None else repr(pm.q_bar),
                "" if pm is None else repr(pm.T),
            ])
    inputs = {"truth": args.truth, "mask": args.mask} | {f.name: f for f in files}
    write_manifest(out, "metrics", {"imputed_dir": str(imp_dir), "baseline_seed": args.baseline_seed, "M": M},
                   args.baseline_seed, inputs, started)
    return 0


# -- diagnose ---------------------------------------------------------------


def cmd_diagnose(args, started) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traces = [read_traces(Path(t)) for t in args.trace]
    table = rhat_table(traces, discard=args.discard, segments=args.segments)
    write_rhat_csv(table, out / "rhat.csv")
    inputs = {f"trace{k + 1}": t for k, t in enumerate(args.trace)}
    if args.imputed_dir:
        if not (args.data and args.schema):
            raise ValueError("--imputed-dir needs --data and --schema")
        schema = parse_schema(Path(args.schema))
        ds = load_dataset(args.data, schema)
        schema = parse_schema(_schema_with_labels(schema.to_json(), ds))
        ds = load_dataset(args.data, schema)
        methods = {}
        for spec in args.imputed_dir:
            label, _, path = spec.rpartition("=")
            label = label or Path(path).name
            files = sorted(Path(path).glob("imp_*.csv"))
            if not files:
                raise FileNotFoundError(f"no imp_*.csv files in {path}")
            methods[label] = [load_dataset(f, schema).values for f in files]
        write_overlay_csv(overlay_tables(ds, methods), out / "overlay.csv")
        inputs["data"] = args.data
    write_manifest(out, "diagnose", {"discard": args.discard, "segments": args.segments}, None, inputs, started)
    return 0


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlcopula", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a clustered mixed-type dataset with MAR deletions")
    s.add_argument("--clusters", type=int, default=20)
    s.add_argument("--size", type=int, default=50)
    s.add_argument("--rho", type=float, default=0.2)
    s.add_argument("--missing", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gamma-scale", action="store_true", help="read Gamma(3, 0.5) as shape/scale")
    s.add_argument("--out", required=True)

    s = sub.add_parser("impute", help="fit the copula sampler and write M completed datasets")
    s.add_argument("--data", required=True)
    s.add_argument("--schema", required=True)
    s.add_argument("--config", help="JSON file of defaults; flags take precedence")
    s.add_argument("--m", type=int)
    s.add_argument("--burnin", type=int)
    s.add_argument("--iter-thin", dest="iter_thin", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--nu-gamma", dest="nu_gamma", type=float)
    s.add_argument("--nu-psi", dest="nu_psi", type=float)
    s.add_argument("--paper-df", dest="paper_df", action="store_const", const=True,
                   help="use nu - 1 + N degrees of freedom for the correlation update")
    s.add_argument("--max-retries", dest="max_retries", type=int)
    s.add_argument("--chains", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--no-random-effects", dest="random_effects", action="store_const", const=False)
    s.add_argument("--sweep", choices=["blocked", "sequential"])
    s.add_argument("--missing-token", action="append", help="extra cell text meaning missing (e.g. NA)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("pool", help="combine per-imputation estimates")
    s.add_argument("--estimates", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("metrics", help="imputation accuracy against known truth")
    s.add_argument("--truth", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--imputed-dir", dest="imputed_dir", required=True)
    s.add_argument("--schema")
    s.add_argument("--baseline-seed", dest="baseline_seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("diagnose", help="split R-hat and observed-vs-imputed overlays")
    s.add_argument("--trace", required=True, nargs="+")
    s.add_argument("--discard", type=float, default=0.5)
    s.add_argument("--segments", type=int, default=2)
    s.add_argument("--data")
    s.add_argument("--schema")
    s.add_argument("--imputed-dir", dest="imputed_dir", nargs="+", help="[label=]directory of imp_*.csv")
    s.add_argument("--out", required=True)
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "impute": cmd_impute,
    "pool": cmd_pool,
    "metrics": cmd_metrics,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        return COMMANDS[args.command](args, started)
    except (SchemaError, DataError, PoolingError, ChainError, ValueError, OSError) as exc:
        print(f"mlcopula {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
