"""Acceptance criteria C1 to C10, each at its stated tolerance.

Every test prints one ``Cn PASS`` or ``Cn FAIL`` line (also repeated in the
terminal summary) and then asserts, so a failing criterion fails the suite
honestly. The behavioural criteria (C7 to C9) run real searches on the
planted task and take most of the time.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import ACCEPTANCE_LINES
from snas.cli import main
from snas.config import load_config
from snas.data import load_cifar_binary, read_cifar_records, write_cifar_records
from snas.pipeline import prepare, recovery_epoch, search, write_run
from snas.verify import (bias_checks, concrete_limit_check, estimator_checks, network_gradcheck, resource_checks,
                         taylor_checks)

ROOT = Path(__file__).resolve().parents[1]
PLANTED = ROOT / "configs" / "planted.conf"
SEEDS = range(10)

# The consistency protocol trains weights harder and longer than the recovery
# protocol: at lr 0.001 both relaxations barely leave the teacher and their
# gaps tie at zero, which says nothing about either.
CONSISTENCY = {"lr": "0.05", "arch_lr": "0.3", "arch_weight_decay": "0"}


def record(name: str, passed: bool, detail: str) -> None:
    line = f"{name} {'PASS' if passed else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def planted_cfg(seed: int, **overrides):
    # paired seeds: seed s draws planted task 1000 + s and the search RNG s
    values = {"seed": str(seed), "planted_seed": str(1000 + seed)}
    values.update({k: str(v) for k, v in overrides.items()})
    return load_config(PLANTED, values, env={})


_RUNS: dict = {}


def planted_run(seed: int, **overrides):
    key = (seed, tuple(sorted(overrides.items())))
    if key not in _RUNS:
        cfg = planted_cfg(seed, **overrides)
        prepared = prepare(cfg)
        _RUNS[key] = (cfg, prepared, search(cfg, prepared))
    return _RUNS[key]


class TestNumericalCriteria:
    """C1 to C6: oracle comparisons in 64-bit."""

    def test_c1_gradient_correctness(self):
        """100 random cells: FD on alpha and theta, closed form against autodiff."""
        rng = np.random.default_rng(0)
        t0 = time.perf_counter()
        errs = np.array([network_gradcheck(rng) for _ in range(100)])
        secs = time.perf_counter() - t0
        theta, alpha, closed = errs.max(axis=0)
        ok = theta < 1e-4 and alpha < 1e-4 and closed < 1e-10 and secs < 120
        record("C1", ok, f"theta_fd={theta:.2e} alpha_fd={alpha:.2e} closed_form={closed:.2e} time={secs:.0f}s")
        assert ok

    def test_c2_estimator_equivalence(self):
        """Score-function and reparameterised means against quadrature and enumeration."""
        t0 = time.perf_counter()
        checks = estimator_checks(np.random.default_rng(0), num_samples=100_000)
        secs = time.perf_counter() - t0
        worst = max(c.value for c in checks)
        ok = all(c.passed for c in checks) and secs < 300
        record("C2", ok, f"problems={len(checks)} worst_z={worst:.2f} (tol 3) time={secs:.0f}s")
        assert ok

    def test_c3_taylor_conservation(self):
        checks = taylor_checks(np.random.default_rng(0))
        worst = max(c.value for c in checks)
        ok = all(c.passed for c in checks)
        record("C3", ok, f"checks={len(checks)} worst_abs={worst:.1e} (tol 1e-10)")
        assert ok

    def test_c4_concrete_limit(self):
        c = concrete_limit_check(np.random.default_rng(0))
        record("C4", c.passed, f"max_freq_dev={c.value:.4f} (tol 0.01, lambda 0.01, 1e5 samples)")
        assert c.passed

    def test_c5_resource_decomposition(self):
        checks = resource_checks(np.random.default_rng(0), samples=1000)
        ok = all(c.passed for c in checks)
        record("C5", ok, " ".join(f"{c.name.split('.')[-1]}={c.value:.3g}" for c in checks))
        assert ok

    def test_c6_darts_bias(self):
        checks = bias_checks(np.random.default_rng(0))
        ok = all(c.passed for c in checks)
        record("C6", ok, " ".join(f"{c.name.split('.')[-1]}={c.value:.3g}" for c in checks))
        assert ok


class TestBehaviouralCriteria:
    """C7 to C9: searches on the planted task."""

    def test_c7_consistency(self):
        """SNAS keeps its search-time accuracy after deriving the child; attention does not."""
        t0 = time.perf_counter()
        gaps = {}
        for mode in ("snas", "darts_attention"):
            gaps[mode] = []
            for s in SEEDS:
                row = planted_run(s, mode=mode, **CONSISTENCY)[2].rows[-1]
                gaps[mode].append(abs(row.search_val_acc - row.child_val_acc))
        secs = time.perf_counter() - t0
        snas, darts = np.array(gaps["snas"]), np.array(gaps["darts_attention"])
        wins = int((snas < darts).sum())
        ok = bool(snas.max() < 0.02) and wins >= 8 and secs < 1800
        record("C7", ok, f"snas_max_gap={snas.max():.3f} (tol 0.02) wins={wins}/10 (need 8) "
                         f"darts_median_gap={np.median(darts):.3f} time={secs:.0f}s")
        assert ok

    def test_c8_efficiency(self):
        """Median epochs until the planted genotype is found and kept."""
        med = {}
        for mode in ("snas", "reinforce_constant"):
            recs = []
            for s in SEEDS:
                cfg, prepared, res = planted_run(s, mode=mode)
                recs.append(recovery_epoch(res.genotypes, prepared.task.genotype, cfg.network_spec().cell_types))
            med[mode] = (float(np.median(recs)), recs)
        ok = med["snas"][0] < med["reinforce_constant"][0]
        record("C8", ok, f"median_recovery snas={med['snas'][0]:g} reinforce={med['reinforce_constant'][0]:g} "
                         f"(censored at 21) snas={med['snas'][1]} reinforce={med['reinforce_constant'][1]}")
        assert ok

    def test_c9_sparsification(self):
        """Aggressive eta prunes an edge that mild eta keeps; entropy falls."""
        pruned, rhos, drops = [], [], []
        for s in (0, 1):
            runs = {c: planted_run(s, constraint=c) for c in ("mild", "aggressive")}
            cfg = runs["mild"][0]
            for ct in sorted(set(cfg.network_spec().cell_types)):
                mild_ops = runs["mild"][2].genotype.ops_for(ct)
                aggr_ops = runs["aggressive"][2].genotype.ops_for(ct)
                pruned += [(s, ct, e) for e, (m, a) in enumerate(zip(mild_ops, aggr_ops)) if a == "zero" and m != "zero"]
            for _, _, res in runs.values():
                h = [r.mean_entropy for r in res.rows]
                rhos.append(spearmanr(np.arange(len(h)), h)[0])
                drops.append(h[-1] < h[0])
        ok = len(pruned) >= 1 and max(rhos) <= -0.8 and all(drops)
        record("C9", ok, f"pruned_edges={pruned} entropy_spearman_max={max(rhos):.2f} (need <= -0.8)")
        assert ok


class TestEngineeringContract:
    """C10: reproducibility, self-check and the CIFAR binary format."""

    def test_c10_contract(self, tmp_path, capsys):
        dirs = []
        for name in ("a", "b"):
            cfg = planted_cfg(0)
            prepared = prepare(cfg)
            dirs.append(write_run(tmp_path / name, cfg, search(cfg, prepared), prepared))
        same = all((dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()
                   for f in ("checkpoint.bin", "genotype.txt", "credits.csv", "config.txt", "manifest.json"))
        strip = lambda p: [line.rsplit(",", 1)[0] for line in (p / "metrics.csv").read_text().splitlines()]  # noqa: E731
        same = same and strip(dirs[0]) == strip(dirs[1])

        verify_code = main(["verify", "--seed", "0"])
        capsys.readouterr()

        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, (50, 3, 32, 32), dtype=np.uint8)
        labels = rng.integers(0, 10, 50)
        write_cifar_records(tmp_path / "data_batch_1.bin", images, labels)
        raw_images, raw_labels = read_cifar_records(tmp_path / "data_batch_1.bin")
        ds = load_cifar_binary(tmp_path / "data_batch_1.bin", resize_to=32, dtype=np.float64)
        mean, std = (np.array(ds.meta[k])[None, :, None, None] for k in ("norm_mean", "norm_std"))
        pixels = np.rint((ds.images * std + mean) * 255).astype(np.uint8)
        cifar = bool(np.array_equal(raw_images, images) and np.array_equal(raw_labels, labels)
                     and np.array_equal(pixels, images) and np.array_equal(ds.labels, labels))

        ok = same and verify_code == 0 and cifar
        record("C10", ok, f"bit_reproducible={same} verify_exit={verify_code} cifar_round_trip={cifar}")
        assert ok
