"""Data loading, planted tasks, configuration, checkpoints and optimisers."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from snas import checkpoint
from snas.cell import Genotype, NetworkSpec, ParentGraph
from snas.config import ConfigError, load_config, parse_text
from snas.data import (RECORD_BYTES, DataError, Dataset, augment, batches, box_downsample, load_cifar_binary,
                       make_planted_task, read_cifar_records, write_cifar_records)
from snas.optim import SGD, Adam, clip_grad_norm, cosine_lr
from snas.tensor import Tensor


def _records(rng, n):
    return rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, size=n)


class TestCifarBinary:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        x, y = _records(rng, 7)
        write_cifar_records(tmp_path / "data_batch_1.bin", x, y)
        assert (tmp_path / "data_batch_1.bin").stat().st_size == 7 * RECORD_BYTES
        x2, y2 = read_cifar_records(tmp_path / "data_batch_1.bin")
        assert np.array_equal(x, x2) and np.array_equal(y, y2)

    def test_take_across_files_and_resize(self, tmp_path, rng):
        for i in (1, 2):
            write_cifar_records(tmp_path / f"data_batch_{i}.bin", *_records(rng, 5))
        d = load_cifar_binary(tmp_path, take=8, resize_to=8)
        assert d.images.shape == (8, 3, 8, 8)
        np.testing.assert_allclose(d.images.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        assert d.meta["resize"] == 8 and len(d.meta["norm_mean"]) == 3

    def test_truncated_file(self, tmp_path, rng):
        x, y = _records(rng, 2)
        write_cifar_records(tmp_path / "b.bin", x, y)
        (tmp_path / "b.bin").write_bytes((tmp_path / "b.bin").read_bytes()[:-5])
        with pytest.raises(DataError, match="truncated"):
            read_cifar_records(tmp_path / "b.bin")

    def test_missing_and_short(self, tmp_path, rng):
        with pytest.raises(DataError):
            load_cifar_binary(tmp_path)
        write_cifar_records(tmp_path / "data_batch_1.bin", *_records(rng, 2))
        with pytest.raises(DataError):
            load_cifar_binary(tmp_path, take=3)

    def test_box_downsample_averages(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_allclose(box_downsample(x, 2)[0, 0], [[2.5, 4.5], [10.5, 12.5]])
        with pytest.raises(DataError):
            box_downsample(x, 3)


class TestBatching:
    def test_split_head_tail(self, rng):
        d = Dataset(rng.standard_normal((10, 3, 4, 4)), np.arange(10) % 2, 2)
        tr, va = d.split(0.2)
        assert len(tr) == 8 and np.array_equal(va.labels, d.labels[8:])

    def test_batches_cover_once(self, rng):
        d = Dataset(rng.standard_normal((10, 1, 2, 2)), np.zeros(10, int), 2)
        seen = np.concatenate([x[:, 0, 0, 0] for x, _ in batches(d, 3, rng, drop_last=False)])
        assert sorted(seen) == sorted(d.images[:, 0, 0, 0])
        assert sum(1 for _ in batches(d, 3, None)) == 3

    def test_augment_shape_and_determinism(self):
        x = np.random.default_rng(0).standard_normal((4, 3, 8, 8))
        a = augment(x, np.random.default_rng(1))
        b = augment(x, np.random.default_rng(1))
        assert a.shape == x.shape and np.array_equal(a, b)

    def test_label_range_checked(self, rng):
        with pytest.raises(DataError):
            Dataset(rng.standard_normal((2, 1, 2, 2)), np.array([0, 5]), 2)


class TestPlanted:
    def spec(self):
        return NetworkSpec(ParentGraph(1, ("sep_conv_3x3", "max_pool_3x3", "skip", "zero")), num_cells=3,
                           channels=8, num_classes=4, image_size=8)

    def geno(self, spec):
        return Genotype(spec.graph.edges, ("sep_conv_3x3", "skip"), ("max_pool_3x3", "sep_conv_3x3"))

    def test_teacher_labels_own_data(self):
        spec = self.spec()
        task, data = make_planted_task(self.geno(spec), spec, seed=3, n=256)
        assert len(data) == 256
        assert np.mean(task.label(data.images.astype(np.float64)) == data.labels) == 1.0
        counts = np.bincount(data.labels, minlength=4)
        assert counts.min() >= 256 // 4 - 1

    def test_seeds_give_different_teachers(self):
        spec = self.spec()
        _, a = make_planted_task(self.geno(spec), spec, seed=1, n=64)
        _, b = make_planted_task(self.geno(spec), spec, seed=2, n=64)
        assert not np.array_equal(a.images, b.images)


class TestConfig:
    def test_parse_comments_and_unknown_keys(self):
        assert parse_text("# hi\nseed = 3  # trailing\n\n") == {"seed": "3"}
        with pytest.raises(ConfigError, match="unknown key"):
            parse_text("bogus = 1\n")
        with pytest.raises(ConfigError):
            parse_text("seed 3\n")

    def test_precedence(self, tmp_path):
        p = tmp_path / "c.conf"
        p.write_text("seed = 1\nepochs = 4\nlr = 0.5\n")
        cfg = load_config(p, {"seed": "3"}, env={"SNAS_SEED": "2", "SNAS_EPOCHS": "7"})
        assert (cfg.seed, cfg.epochs, cfg.lr) == (3, 7, 0.5)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(ConfigError, match="nope.conf"):
            load_config(tmp_path / "nope.conf", env={})

    def test_env_unknown_key(self):
        with pytest.raises(ConfigError):
            load_config(None, env={"SNAS_WHAT": "1"})

    @pytest.mark.parametrize("key,value", [("mode", "ppo"), ("constraint", "huge"), ("ops", "skip,conv9"),
                                           ("epochs", "zero"), ("dtype", "float16"), ("planted_normal", "skip")])
    def test_invalid_values(self, key, value):
        with pytest.raises(ConfigError):
            load_config(None, {key: value}, env={})

    def test_text_round_trip(self, tmp_path):
        cfg = load_config(None, {"mode": "darts_attention", "eta": "0.2"}, env={})
        p = tmp_path / "snap.conf"
        p.write_text(cfg.to_text())
        assert load_config(p, env={}).values == cfg.values

    def test_eta_preset_resolution(self):
        cfg = load_config(None, {"constraint": "aggressive"}, env={})
        assert cfg.resource().eta > 0
        assert load_config(None, {"constraint": "aggressive", "eta": "0.0"}, env={}).resource().eta == 0.0


class TestCheckpoint:
    @given(st.lists(st.tuples(st.sampled_from(["f4", "f8", "i8"]), st.lists(st.integers(0, 3), max_size=3)),
                    max_size=4))
    def test_round_trip(self, entries):
        rng = np.random.default_rng(0)
        arrays = {f"a{i}": (rng.standard_normal(shape) * 100).astype(dt) for i, (dt, shape) in enumerate(entries)}
        back = checkpoint.loads(checkpoint.dumps(arrays))
        assert back.keys() == arrays.keys()
        for k in arrays:
            assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])

    def test_corruption_detected(self, tmp_path):
        buf = checkpoint.dumps({"x": np.arange(5.0)})
        for bad in (b"XXXX" + buf[4:], buf[:-3], buf + b"\0"):
            with pytest.raises(checkpoint.CheckpointError):
                checkpoint.loads(bad)

    def test_atomic_save(self, tmp_path):
        checkpoint.save(tmp_path / "c.bin", {"x": np.ones(2)})
        assert [p.name for p in tmp_path.iterdir()] == ["c.bin"]


class TestOptim:
    def test_cosine_endpoints(self):
        assert cosine_lr(0.1, 0, 10) == 0.1
        assert cosine_lr(0.1, 10, 10, 0.01) == pytest.approx(0.01)
        assert cosine_lr(0.1, 5, 10) == pytest.approx(0.05)

    def test_clip(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == 5.0
        assert math.isclose(np.linalg.norm(p.grad), 1.0, rel_tol=1e-9)

    def test_sgd_momentum_and_decay(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.5, weight_decay=0.1)
        for _ in range(2):
            p.grad = np.array([1.0])
            opt.step()
        # b1 = 1.1, p = 0.89; b2 = 0.55 + 1.089 = 1.639, p = 0.89 - 0.1639
        assert p.data[0] == pytest.approx(0.89 - 0.1639)

    def test_adam_first_step_is_lr_sized(self):
        p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        opt = Adam([p], lr=0.01)
        p.grad = np.array([5.0, -0.1])
        opt.step()
        np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)

    def test_minimises_quadratic(self):
        p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(300):
            p.grad = 2 * p.data
            opt.step()
        assert np.abs(p.data).max() < 0.05
