"""Command-line entry point.

Exit codes: 0 success, 1 a verification check failed, 2 configuration
error, 3 data or checkpoint error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .cell import CELL_TYPES, Genotype, Network, derive_genotype
from .config import ConfigError, RunConfig, load_config
from .data import DataError
from .pipeline import Prepared, prepare, search, write_run
from .trainer import METRICS_HEADER, NumericalError, evaluate, train_child

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--mode", help="snas, darts_attention or reinforce_constant")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--data-dir", help="directory or file with CIFAR-10 binary batches")
    p.add_argument("--take", type=int, help="use only the first N records")
    p.add_argument("--resize", type=int, help="downsample images to this size")
    p.add_argument("--eta", type=float, help="resource penalty weight (overrides the preset)")
    p.add_argument("--constraint", help="none, mild, moderate or aggressive")


def _overrides(args) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    flags = {"mode": args.mode, "seed": args.seed, "epochs": args.epochs, "data_dir": args.data_dir,
             "take": args.take, "resize": args.resize, "eta": args.eta, "constraint": args.constraint}
    for k, v in flags.items():
        if v is not None:
            out[k] = str(v)
    if args.data_dir is not None and "dataset" not in out:
        out["dataset"] = "cifar"
    if getattr(args, "out", None):
        out["out_dir"] = args.out
    return out


def _resolve(args, run_dir: Path | None = None) -> RunConfig:
    path = args.config
    if path is None and run_dir is not None:
        path = run_dir / "config.txt"
        if not path.exists():
            raise ConfigError(f"{run_dir}: no config.txt; pass --config")
    return load_config(path, _overrides(args))


def _load_checkpoint(run_dir: Path) -> dict[str, np.ndarray]:
    path = run_dir / "checkpoint.bin" if run_dir.is_dir() else run_dir
    try:
        return checkpoint.load(path)
    except FileNotFoundError:
        raise DataError(f"{path}: checkpoint not found") from None


def _genotype_from(arrays: dict, cfg: RunConfig) -> Genotype:
    try:
        alpha = {ct: arrays[f"alpha.{ct}"] for ct in CELL_TYPES}
    except KeyError:
        raise DataError("checkpoint has no architecture logits") from None
    g = cfg.graph()
    for a in alpha.values():
        if a.shape != (g.num_edges, g.num_ops):
            raise DataError(f"checkpoint logits have shape {a.shape}, config expects {(g.num_edges, g.num_ops)}")
    return derive_genotype(alpha, g)


# ----------------------------------------------------------------------------
# subcommands


def cmd_search(args) -> int:
    cfg = _resolve(args)
    prepared = prepare(cfg)
    out = Path(cfg.out_dir)
    print(f"# mode={cfg.mode} seed={cfg.seed} eta={cfg.resource().eta:g} train={len(prepared.train)} "
          f"val={len(prepared.val)} out={out}")
    print(METRICS_HEADER, flush=True)
    result = search(cfg, prepared, on_epoch=lambda row, _s: print(row.to_csv(), flush=True))
    write_run(out, cfg, result, prepared)
    print(result.genotype.to_text(), end="")
    return EXIT_OK


def cmd_derive(args) -> int:
    run = Path(args.run)
    cfg = _resolve(args, run if run.is_dir() else run.parent)
    geno = _genotype_from(_load_checkpoint(run), cfg)
    print(geno.to_text(), end="")
    if args.dot:
        Path(args.dot).write_text(geno.to_dot())
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg = _resolve(args, run if run.is_dir() else run.parent)
    arrays = _load_checkpoint(run)
    geno = _genotype_from(arrays, cfg)
    net = Network(cfg.network_spec(), np.random.default_rng(0), dtype=np.dtype(cfg.dtype).type)
    theta = {k[len("theta."):]: v for k, v in arrays.items() if k.startswith("theta.")}
    try:
        net.load_state_dict(theta)
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint does not match the configured network: {exc}") from None
    prepared = prepare(cfg)
    acc = evaluate(net, prepared.val, cfg.batch_size, genotype=geno)
    print("metric,value")
    print(f"child_val_acc,{acc:.6f}")
    return EXIT_OK


def cmd_retrain(args) -> int:
    cfg = _resolve(args, Path(args.run) if args.run else None)
    if args.run:
        run = Path(args.run)
        geno = _genotype_from(_load_checkpoint(run), cfg)
    elif args.genotype:
        geno = Genotype.from_text(Path(args.genotype).read_text())
    else:
        raise ConfigError("retrain needs a run directory or --genotype")
    spec = cfg.network_spec()
    if args.cells:
        cfg.update({"num_cells": str(args.cells)}, "--cells")
        spec = cfg.network_spec()
    prepared = prepare(cfg)
    _, accs = train_child(spec, geno, cfg.train_config(), prepared.train, prepared.val,
                          dtype=np.dtype(cfg.dtype).type)
    print("epoch,child_val_acc")
    for e, a in enumerate(accs, 1):
        print(f"{e},{a:.6f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    print("check,value,tolerance,status,note")
    failed = 0

    def show(c):
        nonlocal failed
        failed += not c.passed
        print(f"{c.row()},{c.note}", flush=True)

    checks = run_checks(seed=args.seed, cells=args.cells, num_samples=args.samples, on_check=show)
    print(f"# {len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_calibrate_eta(args) -> int:
    base = _resolve(args)
    etas = [float(v) for v in args.etas.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]
    print("eta,seed,zero_edges,expected_cost,child_val_acc,genotype")
    zeros: dict[float, list[int]] = {}
    for eta in etas:
        for seed in seeds:
            cfg = RunConfig(dict(base.values))
            cfg.update({"eta": str(eta), "seed": str(seed)}, "calibrate-eta")
            prepared = prepare(cfg)
            res = search(cfg, prepared)
            used = sorted(set(cfg.network_spec().cell_types))
            nz = sum(op == "zero" for ct in used for op in res.genotype.ops_for(ct))
            zeros.setdefault(eta, []).append(nz)
            ops = ";".join(f"{ct}:" + "|".join(res.genotype.ops_for(ct)) for ct in used)
            print(f"{eta:g},{seed},{nz},{res.rows[-1].expected_cost:.6f},{res.rows[-1].child_val_acc:.6f},{ops}",
                  flush=True)
    clean = [e for e in etas if max(zeros[e]) == 0]
    full = [e for e in etas if min(zeros[e]) > 0]
    mild = max(clean) if clean else None
    aggressive = min((e for e in full if mild is None or e > mild), default=None)
    if mild is not None and aggressive is not None:
        print(f"# suggested: mild={mild:g} moderate={float(np.sqrt(max(mild, 1e-12) * aggressive)):g} "
              f"aggressive={aggressive:g}")
    else:
        print("# no bracket found: widen the eta range")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render, summary_rows

    run = Path(args.run)
    if not (run / "metrics.csv").exists():
        raise DataError(f"{run}: no metrics.csv")
    paths = render(run, args.out)
    print("key,value")
    for k, v in summary_rows(run):
        print(f"{k},{v}")
    for p in paths:
        print(f"figure,{p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snas", description="Stochastic architecture search at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run a search and write a run directory")
    _add_config_flags(p)
    p.add_argument("--out", help="run directory")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("derive", help="print the genotype stored in a run")
    p.add_argument("run", help="run directory or checkpoint file")
    _add_config_flags(p)
    p.add_argument("--dot", help="also write a graph-description file")
    p.set_defaults(fn=cmd_derive)

    p = sub.add_parser("eval", help="validation accuracy of the derived child")
    p.add_argument("run", help="run directory or checkpoint file")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the numerical self-checks at 64-bit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cells", type=int, default=5, help="random cells for the gradient checks")
    p.add_argument("--samples", type=int, default=100_000, help="Monte Carlo samples per estimator check")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("retrain", help="train a fixed child from scratch (desk-scale stub)")
    p.add_argument("run", nargs="?", help="run directory holding the genotype")
    _add_config_flags(p)
    p.add_argument("--genotype", help="genotype text file instead of a run")
    p.add_argument("--cells", type=int, help="stack this many cells")
    p.set_defaults(fn=cmd_retrain)

    p = sub.add_parser("calibrate-eta", help="sweep the resource weight and suggest presets")
    _add_config_flags(p)
    p.add_argument("--etas", default="0,0.1,0.3,1,3")
    p.add_argument("--seeds", default="0,1")
    p.set_defaults(fn=cmd_calibrate_eta)

    p = sub.add_parser("report", help="render figures and a summary for a run")
    p.add_argument("run")
    p.add_argument("--out", help="figure directory (default: the run directory)")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, checkpoint.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        if exc.dump and getattr(args, "out", None):
            Path(args.out).mkdir(parents=True, exist_ok=True)
            checkpoint.save(Path(args.out) / "numerical_dump.bin", exc.dump)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
