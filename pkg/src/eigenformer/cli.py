"""Command-line entry point: precompute, train, eval, inspect, selfcheck.

Exit codes: 0 success, 1 usage, 2 data or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, restore_model, save_checkpoint
from .config import ConfigError, load_config
from .data import (
    DataError,
    SpectraCache,
    VerificationError,
    compute_record,
    load_graphs,
    write_cache,
    write_graph_lines,
)
from .diagnostics import write_attention_csvs, write_phi_csv, write_sigma_profile_csv
from .graph import GraphError
from .model import HeadMismatchError
from .selfcheck import run_selfcheck
from .spectral import SOLVER_TOL, EigenSolverError, spectral_distances
from .training import (
    MissingSpectraError,
    NonFiniteGradientError,
    TrainingDivergedError,
    evaluate,
    fit,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eigenformer", description="Spectrum-aware graph transformer toolkit.")
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness (default 0)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    seed_kw = dict(type=int, default=argparse.SUPPRESS, help="same as the global --seed")

    pc = sub.add_parser("precompute", help="compute and cache Laplacian spectra")
    pc.add_argument("--input", required=True, help="graph file or gen:<kind>:k=v,... spec")
    pc.add_argument("--output", required=True, help="cache file to write")
    pc.add_argument("--workers", type=int, default=1)
    pc.add_argument("--tol", type=float, default=SOLVER_TOL)
    pc.add_argument("--graphs-out", help="also write the graphs as a graph file")
    pc.add_argument("--seed", **seed_kw)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True, help="training graphs (file or generator spec)")
    tr.add_argument("--cache", action="append", default=[], help="spectra cache (repeatable)")
    tr.add_argument("--val-data")
    tr.add_argument("--test-data")
    tr.add_argument("--out", required=True, help="run directory")
    tr.add_argument("--seed", **seed_kw)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--cache", action="append", default=[])
    ev.add_argument("--config", help="config the checkpoint must have been trained with")
    ev.add_argument("--out", help="metrics file (default: eval_metrics.json beside the checkpoint)")
    ev.add_argument("--seed", **seed_kw)

    ins = sub.add_parser("inspect", help="dump frequency weights, attention and distance profiles")
    ins.add_argument("--checkpoint", required=True)
    ins.add_argument("--data", required=True)
    ins.add_argument("--graph", type=int, required=True, help="index of the graph to inspect")
    ins.add_argument("--cache", action="append", default=[])
    ins.add_argument("--out", required=True)
    ins.add_argument("--seed", **seed_kw)

    sc = sub.add_parser("selfcheck", help="run the built-in invariant suite")
    sc.add_argument("--inject-sigma-perturbation", type=float, default=0.0, help=argparse.SUPPRESS)
    sc.add_argument("--inject-gradient-bug", action="store_true", help=argparse.SUPPRESS)
    sc.add_argument("--seed", **seed_kw)
    return p


def _attach(graphs, cache_paths, label: str):
    if cache_paths:
        cache = SpectraCache.load(cache_paths)
        out = []
        for k, g in enumerate(graphs):
            try:
                out.append((g, cache.get(g)))
            except DataError as exc:
                raise DataError(f"{label} graph {k}: {exc}") from None
        return out
    return [(g, spectral_distances(g)[1]) for g in graphs]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _record_or_error(g, tol):
    """Worker body; failures come back as plain tuples so they survive pickling."""
    try:
        return compute_record(g, tol)
    except EigenSolverError as exc:
        return ("solver", str(exc), exc.off_norm)
    except VerificationError as exc:
        return ("verify", str(exc), 0.0)
    except GraphError as exc:
        return ("graph", str(exc), 0.0)


def cmd_precompute(args) -> int:
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    t0 = time.perf_counter()
    graphs, _ = load_graphs(args.input)
    tols = [args.tol] * len(graphs)
    if args.workers > 1 and len(graphs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(_record_or_error, graphs, tols, chunksize=8))
    else:
        outcomes = [_record_or_error(g, args.tol) for g in graphs]
    records = []
    for k, item in enumerate(outcomes):
        if isinstance(item, tuple):
            kind, message, off_norm = item
            where = f"{args.input}: graph {k}: {message}"
            if kind == "solver":
                raise EigenSolverError(where, off_norm)
            if kind == "verify":
                raise VerificationError(where)
            raise DataError(where)
        records.append(item)
    write_cache(args.output, records)
    if args.graphs_out:
        write_graph_lines(args.graphs_out, graphs)
    max_res = max((r.residual for r in records), default=0.0)
    max_sigma = max((float(r.sigma.max()) for r in records if r.sigma.size), default=0.0)
    print(f"graphs processed: {len(records)}")
    print(f"max residual: {max_res:.6e}")
    print(f"max sigma: {max_sigma!r}")
    print(f"wall time: {time.perf_counter() - t0:.3f} s")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    config.check()
    graphs, manifest = load_graphs(args.data, config.task)
    if not graphs:
        raise DataError(f"{args.data}: training set is empty")
    train = _attach(graphs, args.cache, "train")
    splits = {"train": len(train)}
    val = test = []
    if args.val_data:
        val = _attach(load_graphs(args.val_data, config.task)[0], args.cache, "val")
        splits["val"] = len(val)
    if args.test_data:
        test = _attach(load_graphs(args.test_data, config.task)[0], args.cache, "test")
        splits["test"] = len(test)
    manifest.splits = splits

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    _write_json(out / "manifest.json", manifest.to_dict())
    try:
        result = fit(config, manifest.schema, train, val, test,
                     log_path=out / "log.jsonl", timing_path=out / "timing.jsonl")
    except TrainingDivergedError as exc:
        if exc.last_good is not None:
            save_checkpoint(out / "best.ckpt", config, manifest.schema, exc.last_good)
        raise
    save_checkpoint(out / "best.ckpt", config, manifest.schema, result.best_state)
    metrics = {"best_epoch": result.best_epoch, "epochs_run": len(result.history), **result.metrics}
    _write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    expect = None
    if args.config:
        head = load_checkpoint(args.checkpoint)
        expect = (load_config(args.config), head.schema)
    ckpt = load_checkpoint(args.checkpoint, expect)
    model = restore_model(ckpt)
    graphs, _ = load_graphs(args.data, ckpt.config.task)
    data = _attach(graphs, args.cache, "eval")
    if not data:
        raise DataError(f"{args.data}: evaluation set is empty")
    metrics = evaluate(model, data, ckpt.config.batch_size)
    path = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval_metrics.json"
    _write_json(path, metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    graphs, _ = load_graphs(args.data, ckpt.config.task)
    if not 0 <= args.graph < len(graphs):
        raise DataError(f"--graph {args.graph} out of range for {len(graphs)} graphs")
    data = _attach(graphs, args.cache, "inspect")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g, sd = data[args.graph]
    write_phi_csv(out / "phi.csv", model, sd.lambdas)
    files = write_attention_csvs(out, model, g, sd)
    write_sigma_profile_csv(out / "sigma_profile.csv", [d[0] for d in data], [d[1] for d in data])
    print(f"wrote phi.csv, sigma_profile.csv and {len(files)} attention files to {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(perturb_sigma=args.inject_sigma_perturbation,
                            gradient_bug=args.inject_gradient_bug)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.seconds:.2f} s): {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print("selfcheck " + ("failed: " + ", ".join(failed) if failed else "passed"))
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "precompute": cmd_precompute,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "selfcheck": cmd_selfcheck,
}

_NUMERIC = (EigenSolverError, VerificationError, TrainingDivergedError, NonFiniteGradientError,
            FloatingPointError)
_DATA = (DataError, GraphError, ConfigError, CheckpointError, HeadMismatchError,
         MissingSpectraError, OSError, ValueError, KeyError)


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print("invalid config:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_DATA
    except _DATA as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
