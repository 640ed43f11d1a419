"""Candidate operations, cells, networks and genotypes."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from snas import functional as F
from snas.cell import (Genotype, Network, NetworkSpec, ParentGraph, cell_forward, derive_genotype,
                       genotype_masks, onehot_masks)
from snas.gradcheck import check_gradients
from snas.ops import FULL_OPS, OPS, REDUCED_OPS, apply_op, conv_cost, init_op_params, op_cost
from snas.tensor import ShapeError, Tensor


def _params(op, c, rng):
    return {k: Tensor(v, requires_grad=True) for k, v in init_op_params(op, c, rng, np.float64).items()}


class TestOps:
    @pytest.mark.parametrize("op", FULL_OPS)
    @pytest.mark.parametrize("stride", [1, 2])
    def test_shapes(self, rng, op, stride):
        x = Tensor(rng.standard_normal((2, 4, 8, 8)))
        y = apply_op(op, x, _params(op, 4, rng), stride)
        assert y.shape == (2, 4, 8 // stride, 8 // stride)

    def test_zero_and_skip(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        assert not apply_op("zero", x, {}).data.any()
        assert apply_op("skip", x, {}) is x

    def test_odd_size_stride_two_rejected(self, rng):
        with pytest.raises(ShapeError):
            apply_op("max_pool_3x3", Tensor(np.zeros((1, 2, 5, 5))), {}, 2)

    @pytest.mark.parametrize("op", ["sep_conv_3x3", "dil_conv_3x3"])
    def test_conv_op_gradients(self, rng, op):
        x = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
        p = _params(op, 2, rng)
        c = Tensor(rng.standard_normal((3, 2, 4, 4)))
        assert check_gradients(lambda: F.sum(F.mul(apply_op(op, x, p), c)), [x] + list(p.values())) < 1e-4


class TestCosts:
    def test_reference_conv_triple(self):
        assert conv_cost(8, 8, 3, 3, 16, 16).as_tuple() == (2304, 147456, 4352)

    def test_zero_and_skip_costs(self):
        assert op_cost("zero", 8, 8, 16, 16).as_tuple() == (0, 0, 0)
        assert op_cost("skip", 8, 8, 16, 16).as_tuple() == (0, 0, 64 * 32)

    def test_sep_conv_is_two_depthwise_pointwise_pairs(self):
        h, c = 4, 8
        one = conv_cost(h, h, 3, 3, c, c, c) + conv_cost(h, h, 1, 1, c, c)
        assert op_cost("sep_conv_3x3", h, h, c, c) == one + one

    @given(st.sampled_from(FULL_OPS), st.integers(1, 8), st.integers(1, 16))
    def test_costs_nonnegative_and_params_size_free(self, op, h, c):
        a, b = op_cost(op, h, h, c, c), op_cost(op, 2 * h, 2 * h, c, c)
        assert min(a.as_tuple()) >= 0
        assert a.params == b.params
        assert b.flops == 4 * a.flops


class TestGenotype:
    @given(st.integers(1, 3), st.data())
    def test_text_round_trip(self, n, data):
        g = ParentGraph(n, FULL_OPS)
        normal = tuple(data.draw(st.sampled_from(FULL_OPS)) for _ in g.edges)
        reduce = tuple(data.draw(st.sampled_from(FULL_OPS)) for _ in g.edges)
        geno = Genotype(g.edges, normal, reduce)
        assert Genotype.from_text(geno.to_text()) == geno

    def test_text_format(self):
        g = ParentGraph(1, REDUCED_OPS)
        text = Genotype(g.edges, ("skip", "zero"), ("avg_pool_3x3", "sep_conv_3x3")).to_text()
        assert text.splitlines()[0] == "normal edge(0,2) skip"

    def test_bad_lines_rejected(self):
        with pytest.raises(ValueError):
            Genotype.from_text("normal edge(0,2) conv_7x7\n")
        with pytest.raises(ValueError):
            Genotype.from_text("weird edge(0,2) skip\n")

    def test_dot_parses(self):
        pydot = pytest.importorskip("pydot")
        g = ParentGraph(2, REDUCED_OPS)
        geno = Genotype(g.edges, ("skip", "zero", "sep_conv_3x3", "skip", "zero"), ("avg_pool_3x3",) * 5)
        graphs = pydot.graph_from_dot_data(geno.to_dot())
        assert graphs and len(graphs[0].get_subgraphs()) == 2
        # zero edges are dropped; two node-to-output edges per cell
        assert [len(s.get_edges()) for s in graphs[0].get_subgraphs()] == [3 + 2, 5 + 2]

    def test_derive_picks_argmax_including_zero(self):
        g = ParentGraph(1, ("skip", "zero"))
        a = {"normal": np.array([[0.0, 1.0], [2.0, 1.0]]), "reduce": np.zeros((2, 2))}
        geno = derive_genotype(a, g)
        assert geno.normal == ("zero", "skip")
        assert geno.reduce == ("skip", "skip")


class TestNetwork:
    def spec(self, ops=REDUCED_OPS, n=3):
        return NetworkSpec(ParentGraph(2, ops), num_cells=n, channels=4, num_classes=3, image_size=8)

    def test_layout(self):
        s = self.spec()
        assert s.cell_types == ("normal", "reduce", "reduce")
        assert s.cell_channels() == [4, 8, 16]
        assert s.cell_spatial() == [(8, 8), (8, 4), (4, 2)]

    def test_logit_shape(self, rng):
        s = self.spec()
        net = Network(s, rng, np.float64)
        masks = [Tensor(rng.dirichlet(np.ones(4), size=5)) for _ in range(3)]
        assert net(rng.standard_normal((2, 3, 8, 8)), masks=masks).shape == (2, 3)

    def test_hard_mask_equals_child(self, rng):
        s = self.spec()
        net = Network(s, rng, np.float64)
        g = s.graph
        geno = Genotype(g.edges, ("sep_conv_3x3", "skip", "zero", "avg_pool_3x3", "skip"),
                        ("avg_pool_3x3", "sep_conv_3x3", "skip", "zero", "zero"))
        x = rng.standard_normal((4, 3, 8, 8))
        a = net(x, masks=genotype_masks(geno, s, np.float64)).data
        b = net(x, genotype=geno).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_cell_linear_in_mask(self, rng):
        s = self.spec(n=1)
        net = Network(s, rng, np.float64)
        x = Tensor(rng.standard_normal((2, 4, 8, 8)))
        g = s.graph
        base = rng.dirichlet(np.ones(4), size=g.num_edges)
        z1, z2 = base.copy(), base.copy()
        z1[0], z2[0] = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
        lam = 0.35

        def run(m):
            # node 2 occupies the first block of output channels
            return cell_forward(g, (x, x), Tensor(m), net.params, "cells.0", reduction=True).data[:, :4]

        np.testing.assert_allclose(run(lam * z1 + (1 - lam) * z2), lam * run(z1) + (1 - lam) * run(z2), atol=1e-10)

    def test_mask_shape_checked(self, rng):
        s = self.spec(n=1)
        net = Network(s, rng, np.float64)
        with pytest.raises(ShapeError):
            net(rng.standard_normal((2, 3, 8, 8)), masks=[onehot_masks(np.zeros(3, int), 4, np.float64)])

    def test_state_dict_round_trip(self, rng):
        s = self.spec(n=2)
        a, b = Network(s, np.random.default_rng(0)), Network(s, np.random.default_rng(1))
        b.load_state_dict(a.state_dict())
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        geno = Genotype(s.graph.edges, ("skip",) * 5, ("sep_conv_3x3",) * 5)
        assert np.array_equal(a(x, genotype=geno).data, b(x, genotype=geno).data)

    def test_graph_requires_zero(self):
        with pytest.raises(ValueError):
            ParentGraph(1, ("skip", "sep_conv_3x3"))
