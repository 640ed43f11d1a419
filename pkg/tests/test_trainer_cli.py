"""Search loop, run directories and the command line."""

import json

import numpy as np
import pytest

from snas import checkpoint
from snas.cli import main
from snas.config import load_config
from snas.pipeline import RUN_FILES, prepare, read_metrics, recovery_epoch, search, write_run
from snas.trainer import METRICS_HEADER, NumericalError, Search, TrainConfig, run_search

TINY = {
    "num_cells": "3", "num_intermediate": "1", "channels": "4", "planted_n": "192", "epochs": "2",
    "batch_size": "32", "ops": "sep_conv_3x3,max_pool_3x3,skip,zero", "planted_normal": "sep_conv_3x3,skip",
    "planted_reduce": "max_pool_3x3,sep_conv_3x3", "lr": "0.01", "arch_lr": "0.05",
}


def tiny_cfg(**extra):
    return load_config(None, {**TINY, **{k: str(v) for k, v in extra.items()}}, env={})


def tiny_args(tmp_path, *more):
    args = []
    for k, v in TINY.items():
        args += ["--set", f"{k}={v}"]
    return args + ["--out", str(tmp_path / "run"), *more]


class TestSearchLoop:
    @pytest.mark.parametrize("mode", ["snas", "darts_attention", "reinforce_constant"])
    def test_modes_share_schema(self, mode):
        cfg = tiny_cfg(mode=mode)
        res = search(cfg, prepare(cfg))
        assert len(res.rows) == 2 and len(res.genotypes) == 2
        row = res.rows[-1]
        assert 0 <= row.child_val_acc <= 1 and 0 <= row.search_val_acc <= 1
        assert row.to_csv().count(",") == METRICS_HEADER.count(",")
        assert len(res.credits) == 2 * 3 * 2

    def test_single_backward_per_step(self):
        cfg = tiny_cfg()
        p = prepare(cfg)
        s = Search(cfg.network_spec(), cfg.train_config(), 1)
        out = s.train_step(p.train.images[:8], p.train.labels[:8], 1.0)
        assert out.sweeps == 1
        assert set(out.alpha_grads) == {"normal", "reduce"}

    def test_resource_term_moves_logits_towards_cheap_ops(self):
        cfg = tiny_cfg(eta=50.0, epochs=1)
        res = search(cfg, prepare(cfg))
        zero = cfg.graph().op_index("zero")
        assert all(np.argmax(res.alpha[ct], axis=1).tolist().count(zero) >= 1 for ct in ("normal", "reduce"))

    def test_entropy_drops_with_annealing(self):
        cfg = tiny_cfg(epochs=4, arch_lr=0.1)
        rows = search(cfg, prepare(cfg)).rows
        assert rows[-1].mean_entropy < rows[0].mean_entropy

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_aborts(self):
        cfg = tiny_cfg()
        p = prepare(cfg)
        bad = p.train.subset(slice(0, 64))
        bad.images[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericalError):
            run_search(cfg.network_spec(), cfg.train_config(), bad, p.val)

    def test_reinforce_needs_validation_batch(self):
        cfg = tiny_cfg(mode="reinforce_constant")
        p = prepare(cfg)
        s = Search(cfg.network_spec(), cfg.train_config(), 1)
        with pytest.raises(ValueError):
            s.train_step(p.train.images[:8], p.train.labels[:8], 1.0)

    def test_recovery_epoch(self):
        cfg = tiny_cfg()
        g = cfg.planted_genotype()
        other = type(g)(g.edges, ("zero", "zero"), g.reduce)
        types = cfg.network_spec().cell_types
        assert recovery_epoch([other, g, g], g, types) == 2
        assert recovery_epoch([g, other, g], g, types) == 3
        assert recovery_epoch([g, other], g, types) == 3


class TestRunDirectory:
    def test_contract_and_reproducibility(self, tmp_path):
        for name in ("a", "b"):
            cfg = tiny_cfg(seed=5)
            p = prepare(cfg)
            write_run(tmp_path / name, cfg, search(cfg, p), p)
        for f in RUN_FILES:
            assert (tmp_path / "a" / f).exists()
            if f != "metrics.csv":
                assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
        # metrics match except the wall-clock column
        strip = lambda p: [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]  # noqa: E731
        assert strip(tmp_path / "a" / "metrics.csv") == strip(tmp_path / "b" / "metrics.csv")
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 5 and "planted_recovery_epoch" in manifest
        assert read_metrics(tmp_path / "a" / "metrics.csv")[-1].epoch == 2


class TestCli:
    def test_search_derive_eval_report(self, tmp_path, capsys):
        assert main(["search", *tiny_args(tmp_path), "--mode", "darts_attention"]) == 0
        run = tmp_path / "run"
        assert json.loads((run / "manifest.json").read_text())["mode"] == "darts_attention"
        capsys.readouterr()
        assert main(["derive", str(run), "--dot", str(tmp_path / "g.dot")]) == 0
        assert capsys.readouterr().out == (run / "genotype.txt").read_text()
        assert (tmp_path / "g.dot").read_text().startswith("digraph")
        assert main(["eval", str(run)]) == 0
        acc = float(capsys.readouterr().out.splitlines()[-1].split(",")[1])
        assert acc == pytest.approx(read_metrics(run / "metrics.csv")[-1].child_val_acc, abs=1e-6)
        assert main(["report", str(run)]) == 0
        out = capsys.readouterr().out
        assert out.startswith("key,value") and (run / "entropy.png").stat().st_size > 0

    def test_missing_config_exit_2(self, tmp_path, capsys):
        assert main(["search", "--config", str(tmp_path / "missing.conf")]) == 2
        assert "missing.conf" in capsys.readouterr().err

    def test_bad_set_exit_2(self, tmp_path):
        assert main(["search", "--set", "nonsense=1", "--out", str(tmp_path)]) == 2

    def test_data_error_exit_3(self, tmp_path):
        assert main(["search", "--data-dir", str(tmp_path), "--out", str(tmp_path / "r")]) == 3

    def test_corrupt_checkpoint_exit_3(self, tmp_path):
        assert main(["search", *tiny_args(tmp_path), "--epochs", "1"]) == 0
        ck = tmp_path / "run" / "checkpoint.bin"
        ck.write_bytes(ck.read_bytes()[:-10])
        assert main(["derive", str(tmp_path / "run")]) == 3
        assert main(["eval", str(tmp_path / "run")]) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_abort_exit_4(self, tmp_path):
        assert main(["search", *tiny_args(tmp_path), "--set", "lr=1e30", "--set", "grad_clip=0"]) == 4

    def test_cifar_fixture_search(self, tmp_path):
        from snas.data import write_cifar_records
        rng = np.random.default_rng(0)
        d = tmp_path / "cifar"
        d.mkdir()
        write_cifar_records(d / "data_batch_1.bin", rng.integers(0, 256, (80, 3, 32, 32), dtype=np.uint8),
                            rng.integers(0, 10, 80))
        args = ["search", "--data-dir", str(d), "--take", "80", "--resize", "8", "--epochs", "1",
                "--set", "channels=4", "--set", "num_intermediate=1", "--set", "batch_size=32",
                "--out", str(tmp_path / "run")]
        assert main(args) == 0
        assert checkpoint.load(tmp_path / "run" / "checkpoint.bin")["alpha.normal"].shape == (2, 8)

    def test_retrain_stub(self, tmp_path, capsys):
        assert main(["search", *tiny_args(tmp_path), "--epochs", "1"]) == 0
        capsys.readouterr()
        assert main(["retrain", str(tmp_path / "run"), "--epochs", "1"]) == 0
        assert capsys.readouterr().out.startswith("epoch,child_val_acc")

    def test_calibrate_eta(self, tmp_path, capsys):
        args = ["calibrate-eta", *tiny_args(tmp_path)[:-2], "--epochs", "1", "--etas", "0,100", "--seeds", "0"]
        assert main(args) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("eta,seed,zero_edges")
        rows = [line.split(",") for line in out[1:3]]
        assert int(rows[0][2]) <= int(rows[1][2])


class TestVerify:
    def test_verify_green(self, capsys):
        assert main(["verify", "--samples", "20000", "--cells", "2"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "check,value,tolerance,status,note"
        assert all(",PASS," in line for line in out[1:-1])

    def test_verify_catches_flipped_credit_sign(self, monkeypatch, capsys):
        import snas.credit as cr

        orig = cr.credit_value
        monkeypatch.setattr(cr, "credit_value", lambda *a, **kw: -orig(*a, **kw))
        assert main(["verify", "--samples", "20000", "--cells", "2"]) == 1
        failed = {line.split(",")[0] for line in capsys.readouterr().out.splitlines() if ",FAIL," in line}
        assert "credit.sign" in failed
        assert any(name.startswith("estimator.score_function") for name in failed)
