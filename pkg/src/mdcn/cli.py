"""Command-line entry point: generate, train, eval, verify, heatmap, summary, oracle, config."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import theory
from .datagen import (CircularConfig, DataValidationError, SemiSynthConfig, gen_circular,
                      gen_semisynth, read_dataset, write_dataset)
from .evaluation import (SimilarityMatrix, append_result, evaluate,
                         read_results, similarity_from_weights, summary_table, surrogate_weights)
from .losses import off_diagonal_to_full
from .networks import OracleModel, _atomic_write, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, load_config, train, write_config

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
OUTPUT_ENV = "MDCN_OUTPUT_DIR"
DATA_KINDS = {"circular": CircularConfig, "semisynth": SemiSynthConfig}
MODEL_FILE, TRACE_FILE, WEIGHTS_FILE, CONFIG_FILE = "model.ckpt", "trace.csv", "weights.csv", "config.txt"
MANIFEST_FILE = "manifest.json"


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------------

def default_out_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "mdcn_output"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, argv, config, seed, inputs, outputs, started) -> None:
    """Record how a run was produced; written atomically once the run has finished."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "duration_seconds": round(time.perf_counter() - started, 3),
    }
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def parse_dataclass_config(path, cls, overrides=None):
    """Build ``cls`` from a ``key=value`` file; unknown keys are an error."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}; valid keys: {', '.join(fields)}")
            kind = type(fields[key].default)
            try:
                values[key] = kind(raw) if kind is not bool else raw.lower() in ("1", "true", "yes")
            except ValueError:
                raise UsageError(f"{path}:{lineno}: cannot parse {raw!r} as {kind.__name__}") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return cls(**values)


def write_weights(state, domains, path) -> None:
    full = off_diagonal_to_full(state.w)
    lines = ["domain," + ",".join(str(d) for d in domains)]
    for d, row in zip(domains, full):
        lines.append(f"{d}," + ",".join(format(float(v), ".17g") for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_weights(path):
    rows = [line.split(",") for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    domains = tuple(int(d) for d in rows[0][1:])
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return domains, values


def _train_config(args) -> TrainConfig:
    overrides = {"variant": args.variant, "seed": args.seed, "n_iter": args.n_iter}
    if args.config is not None:
        required = [f.name for f in dataclasses.fields(TrainConfig) if overrides.get(f.name) is None]
        return load_config(args.config, overrides, required=required)
    return load_config(None, overrides)


# -- commands --------------------------------------------------------------------------

def cmd_generate(args, argv) -> int:
    started = time.perf_counter()
    cls = DATA_KINDS[args.kind]
    config = parse_dataclass_config(args.config, cls, {"seed": args.seed})
    dataset = gen_circular(config) if args.kind == "circular" else gen_semisynth(config)
    out = Path(args.out) if args.out else default_out_dir() / f"{args.kind}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out)
    inputs = [args.config] if args.config else []
    write_manifest(out.with_name(out.name + ".manifest.json"), "generate", argv,
                   {"kind": args.kind, **dataclasses.asdict(config)}, config.seed, inputs, [out], started)
    print(f"wrote {len(dataset)} rows ({len(dataset.domains)} domains) to {out}")
    return EXIT_OK


def _train_one(dataset, config, target, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    masked = dataset.mask_outcomes(target)
    model = train(masked, config, target=target)
    reads = masked.outcome_reads.get(target, 0)
    if reads:
        raise RuntimeError(f"target domain {target} outcomes were read {reads} times during training")
    outputs = [out_dir / MODEL_FILE, out_dir / TRACE_FILE, out_dir / CONFIG_FILE]
    save_checkpoint(model.bundle, outputs[0])
    model.write_trace(outputs[1])
    write_config(config, outputs[2])
    if model.state is not None:
        write_weights(model.state, model.bundle.domains, out_dir / WEIGHTS_FILE)
        outputs.append(out_dir / WEIGHTS_FILE)
    return model, outputs


def cmd_train(args, argv) -> int:
    started = time.perf_counter()
    config = _train_config(args)
    dataset = read_dataset(args.dataset)
    out = Path(args.out) if args.out else default_out_dir()
    if args.all_targets:
        targets = list(dataset.domains)
    else:
        if args.target is None:
            raise UsageError("train needs --target DOMAIN or --all-targets")
        if args.target not in dataset.domains:
            raise DataValidationError(f"{args.dataset}: target domain {args.target} not in {dataset.domains}")
        targets = [args.target]
    outputs = []
    for target in targets:
        run_dir = out / f"target_{target}" if args.all_targets else out
        model, files = _train_one(dataset, config, target, run_dir)
        outputs += files
        if args.all_targets:
            res = evaluate(model, dataset, target, variant=config.variant, seed=config.seed)
            append_result(res, out / "results.csv")
            print(f"target {target}: PEHE {res.pehe:.6f}")
        else:
            print(f"trained {config.variant} with target {target} -> {run_dir}")
    if args.all_targets:
        outputs.append(out / "results.csv")
    write_manifest(out / MANIFEST_FILE, "train", argv, dict(config.to_items()), config.seed,
                   [args.dataset] + ([args.config] if args.config else []), outputs, started)
    return EXIT_OK


def _load_model(path):
    path = Path(path)
    return load_checkpoint(path / MODEL_FILE if path.is_dir() else path)


def cmd_eval(args, argv) -> int:
    started = time.perf_counter()
    model = _load_model(args.model)
    dataset = read_dataset(args.dataset)
    target = args.target if args.target is not None else getattr(model, "target", None)
    if target is None:
        raise UsageError("eval needs --target for a model trained without a held-out domain")
    if target not in dataset.domains:
        raise DataValidationError(f"{args.dataset}: target domain {target} not in {dataset.domains}")
    res = evaluate(model, dataset, target, seed=args.seed)
    out = Path(args.out) if args.out else default_out_dir() / "results.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    append_result(res, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "eval", argv, {"target": target},
                   res.seed, [Path(args.dataset)], [out], started)
    print(f"{res.variant} target={res.target} seed={res.seed} pehe={res.pehe:.17g}")
    return EXIT_OK


def cmd_verify(args, argv) -> int:
    started = time.perf_counter()
    reports = theory.audit(args.mode, args.n_instances, args.seed, rhs_reduction=args.inject_violation or 0.0)
    out = Path(args.out) if args.out else default_out_dir() / f"verify_{args.mode}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(out, theory.reports_to_csv(reports))
    bad = [r for r in reports if r.violated()]
    write_manifest(out.with_name(out.name + ".manifest.json"), "verify", argv,
                   {"mode": args.mode, "n_instances": args.n_instances,
                    "inject_violation": args.inject_violation}, args.seed, [], [out], started)
    worst = min(r.slack for r in reports)
    print(f"{args.mode}: {len(reports)} checks, {len(bad)} violations, minimum slack {worst:.6g}")
    return EXIT_VIOLATION if bad else EXIT_OK


def cmd_heatmap(args, argv) -> int:
    started = time.perf_counter()
    model_path = Path(args.model)
    run_dir = model_path if model_path.is_dir() else model_path.parent
    bundle = _load_model(model_path)
    weights_path = run_dir / WEIGHTS_FILE
    inputs = [run_dir / MODEL_FILE if model_path.is_dir() else model_path]
    if weights_path.exists():
        domains, full = read_weights(weights_path)
        sim = SimilarityMatrix(domains, similarity_from_weights(full), "learned")
        inputs.append(weights_path)
    else:
        if args.dataset is None:
            raise UsageError("model has no learned domain weights; pass --dataset for the projection surrogate")
        dataset = read_dataset(args.dataset)
        w = surrogate_weights(bundle, dataset.X, dataset.domain)
        sim = SimilarityMatrix(tuple(bundle.domains), similarity_from_weights(w), "projection")
        inputs.append(Path(args.dataset))
    out = Path(args.out) if args.out else default_out_dir() / "similarity.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    sim.save(out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "heatmap", argv,
                   {"source": sim.source,
                    "projection": "first principal component" if sim.source == "projection" else None},
                   bundle.seed, inputs, [out], started)
    print(f"wrote {sim.source} similarity ({len(sim.domains)} domains) to {out}")
    return EXIT_OK


def cmd_summary(args, argv) -> int:
    started = time.perf_counter()
    results = []
    for path in args.results:
        results += read_results(path)
    if not results:
        raise DataValidationError("no results to summarize")
    table = summary_table(results)
    out = Path(args.out) if args.out else default_out_dir() / "summary.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    text = table.to_text(args.digits)
    _atomic_write(out, text)
    csv_out = out.with_suffix(".csv")
    _atomic_write(csv_out, table.to_csv())
    write_manifest(out.with_name(out.name + ".manifest.json"), "summary", argv, {"digits": args.digits},
                   None, args.results, [out, csv_out], started)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_oracle(args, argv) -> int:
    started = time.perf_counter()
    dataset = read_dataset(args.dataset)
    if not dataset.has_truth:
        raise DataValidationError(f"{args.dataset}: no true effects stored; cannot build an oracle")
    out = Path(args.out) if args.out else default_out_dir() / "oracle.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    OracleModel(dataset.X, dataset.tau).save(out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "oracle", argv, {}, None,
                   [args.dataset], [out], started)
    print(f"wrote oracle model for {len(dataset)} rows to {out}")
    return EXIT_OK


def cmd_config(args, argv) -> int:
    config = load_config(None, {"variant": args.variant, "seed": args.seed, "n_iter": args.n_iter})
    if args.out:
        write_config(config, args.out)
    else:
        sys.stdout.write("".join(f"{k}={v}\n" for k, v in config.to_items()))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mdcn", description="Multi-domain treatment-effect experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a benchmark dataset")
    p.add_argument("kind", choices=sorted(DATA_KINDS), help="dataset family")
    p.add_argument("--config", help="key=value file of generator settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train with one domain held out")
    p.add_argument("dataset")
    p.add_argument("--config", help="key=value training config; must list every key not given as a flag")
    p.add_argument("--variant")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-iter", type=int, dest="n_iter")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--target", type=int)
    g.add_argument("--all-targets", action="store_true", help="hold out each domain in turn and evaluate")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PEHE of a model on its target domain")
    p.add_argument("model", help="run directory or checkpoint file")
    p.add_argument("dataset")
    p.add_argument("--target", type=int)
    p.add_argument("--seed", type=int, help="seed recorded in the results row (default: model seed)")
    p.add_argument("--out", help="results CSV (rows are added or replaced)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="audit the error bounds on random instances")
    p.add_argument("--mode", choices=("prop-bt", "theorem"), required=True)
    p.add_argument("--n-instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-violation", type=float, metavar="AMOUNT",
                   help="subtract AMOUNT from every right-hand side (negative control)")
    p.add_argument("--out", help="report CSV path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("heatmap", help="export a domain similarity matrix")
    p.add_argument("model", help="run directory or checkpoint file")
    p.add_argument("--dataset", help="needed for models without learned domain weights")
    p.add_argument("--out", help="similarity CSV path")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("summary", help="mean and standard error table of results")
    p.add_argument("results", nargs="+")
    p.add_argument("--digits", type=int, default=2)
    p.add_argument("--out", help="text table path (a CSV is written next to it)")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("oracle", help="store a dataset's true effects as a model")
    p.add_argument("dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("config", help="print or write a complete training config")
    p.add_argument("--variant")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-iter", type=int, dest="n_iter")
    p.add_argument("--out")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args, argv)
    except (DataValidationError, FileNotFoundError) as exc:
        print(f"mdcn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, KeyError, ValueError, theory.CertificationError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mdcn {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
