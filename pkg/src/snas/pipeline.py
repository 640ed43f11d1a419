"""Glue between a resolved run configuration and the search loop.

Shared by the command line and the acceptance suite so both exercise the
same path from config to run directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .cell import CELL_TYPES, Genotype
from .config import RunConfig
from .data import Dataset, PlantedTask, load_cifar_binary, make_planted_task
from .trainer import METRICS_HEADER, MetricsRow, SearchResult, run_search

__all__ = ["Prepared", "prepare", "search", "write_run", "recovery_epoch", "RUN_FILES", "genotype_matches"]

RUN_FILES = ("manifest.json", "config.txt", "metrics.csv", "genotype.txt", "checkpoint.bin", "credits.csv")


@dataclass
class Prepared:
    train: Dataset
    val: Dataset
    task: PlantedTask | None
    init_state: dict | None


def prepare(cfg: RunConfig) -> Prepared:
    """Load or synthesise the dataset and split it."""
    dtype = np.dtype(cfg.dtype).type
    task = None
    init_state = None
    if cfg.dataset == "planted":
        task, data = make_planted_task(
            cfg.planted_genotype(), cfg.network_spec(), cfg.planted_seed, n=cfg.planted_n,
            latent_dim=cfg.planted_latent, keep=cfg.planted_keep, noise=cfg.planted_noise,
            margin_target=cfg.planted_margin, dtype=dtype)
        if cfg.inherit_teacher:
            init_state = task.teacher.state_dict()
    else:
        data = load_cifar_binary(cfg.data_dir, take=cfg.take or None, resize_to=cfg.resize, dtype=dtype)
    train, val = data.split(cfg.val_fraction)
    return Prepared(train, val, task, init_state)


def genotype_matches(found: Genotype, planted: Genotype, cell_types) -> bool:
    """Equality on the cell types the network actually uses."""
    return all(found.ops_for(ct) == planted.ops_for(ct) for ct in set(cell_types))


def recovery_epoch(genotypes: list[Genotype], planted: Genotype, cell_types) -> int:
    """First epoch from which the derived genotype stays equal to the planted one.

    Runs that never settle on it are censored at ``len(genotypes) + 1``.
    """
    n = len(genotypes)
    first = n + 1
    for e in range(n - 1, -1, -1):
        if not genotype_matches(genotypes[e], planted, cell_types):
            break
        first = e + 1
    return first


def search(cfg: RunConfig, prepared: Prepared | None = None, on_epoch=None) -> SearchResult:
    prepared = prepared or prepare(cfg)
    return run_search(cfg.network_spec(), cfg.train_config(), prepared.train, prepared.val, on_epoch=on_epoch,
                      dtype=np.dtype(cfg.dtype).type, init_state=prepared.init_state)


def write_run(out_dir, cfg: RunConfig, result: SearchResult, prepared: Prepared) -> Path:
    """Write manifest, config snapshot, metrics, genotype and checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    lines = [METRICS_HEADER] + [r.to_csv() for r in result.rows]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    (out / "genotype.txt").write_text(result.genotype.to_text())
    credit_lines = ["epoch,cell,i,j,credit"] + [f"{e},{c},{i},{j},{r:.9g}" for e, c, i, j, r in result.credits]
    (out / "credits.csv").write_text("\n".join(credit_lines) + "\n")
    arrays = {f"theta.{k}": v for k, v in result.net.state_dict().items()}
    arrays.update({f"alpha.{ct}": result.alpha[ct] for ct in CELL_TYPES})
    checkpoint.save(out / "checkpoint.bin", arrays)
    manifest = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.values.items()},
        "mode": cfg.mode,
        "seed": cfg.seed,
        "resolved_eta": cfg.resource().eta,
        "cell_types": list(cfg.network_spec().cell_types),
        "train_size": len(prepared.train),
        "val_size": len(prepared.val),
        "data_meta": prepared.train.meta,
        "final_genotype": result.genotype.to_text().splitlines(),
        "epochs_run": len(result.rows),
    }
    if prepared.task is not None:
        manifest["planted_recovery_epoch"] = recovery_epoch(result.genotypes, prepared.task.genotype,
                                                            cfg.network_spec().cell_types)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_metrics(path) -> list[MetricsRow]:
    rows = []
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected metrics header")
    for line in lines[1:]:
        if line.strip():
            p = line.split(",")
            rows.append(MetricsRow(int(p[0]), *(float(v) for v in p[1:])))
    return rows
