"""Cost model, penalty gradients and the comparison baselines."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from snas import archdist as ad
from snas import functional as F
from snas.baselines import (MovingAverageBaseline, darts_masks, enumerate_expectation, expectation_gap,
                            reinforce_constant_step, relu_bias_example)
from snas.cell import Genotype, NetworkSpec, ParentGraph
from snas.ops import FULL_OPS, REDUCED_OPS
from snas.resource import (PRESETS, CostModel, ResourceConfig, expected_cost, expected_cost_grad, mc_cost_grad,
                           sample_cost, walk_cost)
from snas.tensor import Tensor


def _spec(ops=FULL_OPS):
    return NetworkSpec(ParentGraph(2, ops), num_cells=3, channels=4, num_classes=4, image_size=8)


class TestCostModel:
    @given(st.integers(0, 2**31))
    def test_masked_sum_equals_walk(self, seed):
        rng = np.random.default_rng(seed)
        spec = _spec()
        model, g = CostModel(spec), spec.graph
        idx = [rng.integers(0, g.num_ops, size=g.num_edges) for _ in range(3)]
        per_cell = [tuple(g.ops[k] for k in row) for row in idx]
        masks = [np.eye(g.num_ops, dtype=np.int64)[row] for row in idx]
        assert sample_cost(masks, model, raw=True) == walk_cost(
            Genotype(g.edges, per_cell[0], per_cell[0]), spec, per_cell).as_tuple()

    def test_normalised_scale(self):
        tab = CostModel(_spec(REDUCED_OPS)).scalar[0]
        # per criterion the costliest candidate scores one, zero scores nothing
        assert np.all(tab[:, 3] == 0) and np.all(tab <= 3.0 + 1e-12)

    def test_raw_needs_hard_masks(self):
        spec = _spec(REDUCED_OPS)
        with pytest.raises(ValueError):
            sample_cost([np.full((5, 4), 0.25)] * 3, CostModel(spec), raw=True)

    def test_expected_cost_and_gradient(self, rng):
        spec = _spec(REDUCED_OPS)
        tab = CostModel(spec).by_type()
        a = {ct: rng.standard_normal((5, 4)) for ct in ("normal", "reduce")}
        h = 1e-6
        for ct in a:
            num = np.zeros((5, 4))
            for idx in np.ndindex(5, 4):
                ap, am = {k: v.copy() for k, v in a.items()}, {k: v.copy() for k, v in a.items()}
                ap[ct][idx] += h
                am[ct][idx] -= h
                num[idx] = (expected_cost(ap, tab) - expected_cost(am, tab)) / (2 * h)
            np.testing.assert_allclose(expected_cost_grad(a[ct], tab[ct]), num, atol=1e-7)

    def test_mc_gradient_unbiased(self, rng):
        a, cost = rng.standard_normal((3, 4)), rng.uniform(0, 2, size=(3, 4))
        est = np.stack([mc_cost_grad(a, cost, 64, np.random.default_rng(s)) for s in range(300)])
        se = est.std(axis=0) / np.sqrt(300)
        assert np.all(np.abs(est.mean(axis=0) - expected_cost_grad(a, cost)) < 4 * se + 1e-12)

    def test_presets_increase(self):
        vals = [PRESETS[k] for k in ("none", "mild", "moderate", "aggressive")]
        assert vals == sorted(vals) and len(set(vals)) == 4

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ResourceConfig(eta=-1)
        with pytest.raises(ValueError):
            ResourceConfig.from_preset("extreme")


class TestBaselines:
    def test_relu_example(self):
        r = relu_bias_example()
        assert (r.expected_loss, r.loss_of_expectation, r.gap) == (0.5, 0.25, 0.25)

    def test_linear_ops_no_gap(self, rng):
        ws = [Tensor(rng.standard_normal((3, 3))) for _ in range(3)]
        c = Tensor(rng.standard_normal((1, 3)))
        gap = expectation_gap([lambda t, w=w: F.matmul(t, w) for w in ws], rng.standard_normal((1, 3)),
                              lambda y: F.sum(F.mul(y, c)), rng.dirichlet(np.ones(3)))
        assert gap.gap < 1e-12

    def test_enumeration(self):
        p = [np.array([0.25, 0.75]), np.array([0.5, 0.5])]
        assert enumerate_expectation(p, lambda ks: ks[0] + 2 * ks[1]) == pytest.approx(0.75 + 1.0)

    def test_darts_masks_are_softmax(self, rng):
        a = {"normal": rng.standard_normal((2, 3)), "reduce": rng.standard_normal((2, 3))}
        m = darts_masks(a, ("normal", "reduce", "normal"))
        assert m[0] is m[2]
        np.testing.assert_allclose(m[1].data, ad.probs(a["reduce"]))

    def test_moving_average_baseline(self):
        b = MovingAverageBaseline(0.5)
        assert b.advantage(1.0) == 0.0
        assert b.advantage(3.0) == 2.0
        assert b.value == 2.0
        with pytest.raises(ValueError):
            MovingAverageBaseline(1.0)

    def test_reinforce_step_direction(self):
        a = np.zeros((2, 3))
        g = reinforce_constant_step(a, np.array([0, 2]), reward=1.0)
        # a descent step on a positive reward raises the chosen logits
        new = a - 0.1 * g
        assert new[0, 0] > new[0, 1] and new[1, 2] > new[1, 0]
        assert np.allclose(g.sum(axis=1), 0)
