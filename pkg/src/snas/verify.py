"""Self-contained numerical checks run by the ``verify`` subcommand.

Each check compares an implementation against an independent oracle
(finite differences, enumeration, quadrature or a hand-derived number) at
64-bit precision and reports the discrepancy next to its tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import archdist as ad
from . import credit as cr
from . import functional as F
from .baselines import darts_masks, enumerate_expectation, expectation_gap, relu_bias_example
from .cell import Genotype, Network, NetworkSpec, ParentGraph, onehot_masks
from .gradcheck import numeric_grad_at, relative_error
from .ops import FULL_OPS, conv_cost
from .resource import CostModel, expected_cost, sample_cost, walk_cost
from .tensor import Tape, Tensor

__all__ = [
    "Check", "run_checks", "format_table", "network_gradcheck", "random_search_network",
    "estimator_checks", "quadrature_expectation", "CHECK_NAMES",
]


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool
    note: str = ""

    def row(self) -> str:
        return f"{self.name},{self.value:.6g},{self.tol:.3g},{'PASS' if self.passed else 'FAIL'}"


def _below(name: str, value: float, tol: float, note: str = "") -> Check:
    return Check(name, float(value), tol, bool(np.isfinite(value) and value < tol), note)


# ----------------------------------------------------------------------------
# gradients on random search networks


def random_search_network(rng: np.random.Generator, channels: int = 2, image_size: int = 4):
    """A tiny 64-bit search network with a random candidate set and depth."""
    others = [o for o in FULL_OPS if o != "zero"]
    k = int(rng.integers(1, 3))
    ops = tuple(str(o) for o in rng.choice(others, size=k, replace=False)) + ("zero",)
    graph = ParentGraph(int(rng.integers(1, 3)), ops)
    spec = NetworkSpec(graph, num_cells=int(rng.integers(1, 4)), channels=channels, in_channels=3,
                       num_classes=3, image_size=image_size)
    net = Network(spec, rng, dtype=np.float64)
    alpha = {ct: Tensor(rng.standard_normal((graph.num_edges, graph.num_ops)), requires_grad=True)
             for ct in ("normal", "reduce")}
    return spec, net, alpha


def network_gradcheck(rng: np.random.Generator, theta_entries: int = 8, eps: float = 1e-6):
    """(theta FD error, alpha FD error, closed-form vs autodiff error) for one random cell stack."""
    spec, net, alpha = random_search_network(rng)
    lam = float(rng.uniform(0.3, 1.5))
    x = rng.standard_normal((3, 3, spec.image_size, spec.image_size))
    y = rng.integers(0, spec.num_classes, size=3)
    u = [ad.uniform(rng, alpha[ct].shape) for ct in spec.cell_types]

    def loss_fn(trace=None):
        masks = [ad.sample(alpha[ct], lam, u=u[c]).z for c, ct in enumerate(spec.cell_types)]
        return F.cross_entropy(net(x, masks=masks, trace=trace), y)

    params = net.parameters()
    for t in params + list(alpha.values()):
        t.grad = None
    trace: list = []
    with Tape() as tape:
        loss = loss_fn(trace)
    tape.backward(loss)

    # theta: a random handful of coordinates across all tensors
    sizes = np.array([p.data.size for p in params])
    picks = rng.choice(int(sizes.sum()), size=min(theta_entries, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    an, nu = [], []
    for flat in np.sort(picks):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, i = params[pi], int(flat - offsets[pi])
        g = p.grad.reshape(-1)[i] if p.grad is not None else 0.0
        an.append(g)
        nu.append(numeric_grad_at(loss_fn, p, [i], eps)[0])
    theta_err = relative_error(np.array(an), np.array(nu))

    used = sorted(set(spec.cell_types))
    a_an = np.concatenate([alpha[ct].grad.reshape(-1) for ct in used])
    a_nu = np.concatenate([numeric_grad_at(loss_fn, alpha[ct], range(alpha[ct].data.size), eps) for ct in used])
    alpha_err = relative_error(a_an, a_nu)

    closed = cr.analytic_alpha_grad(trace, lam, spec.graph.num_edges, spec.graph.num_ops)
    c = np.concatenate([closed[ct].reshape(-1) for ct in used])
    closed_err = relative_error(c, a_an, floor=1e-300)
    # the direct-alpha form is the log form divided by alpha
    direct = cr.analytic_alpha_grad(trace, lam, spec.graph.num_edges, spec.graph.num_ops, form="direct",
                                    alpha={ct: np.exp(alpha[ct].data) for ct in alpha})
    d = np.concatenate([direct[ct].reshape(-1) for ct in used])
    ea = np.concatenate([np.exp(alpha[ct].data).reshape(-1) for ct in used])
    direct_err = relative_error(d * ea, a_an, floor=1e-300)
    return theta_err, alpha_err, max(closed_err, direct_err)


def gradient_checks(rng: np.random.Generator, cells: int = 5) -> list[Check]:
    errs = np.array([network_gradcheck(rng) for _ in range(cells)])
    return [
        _below("grad.theta_fd", errs[:, 0].max(), 1e-4, f"{cells} random cells"),
        _below("grad.alpha_fd", errs[:, 1].max(), 1e-4, f"{cells} random cells"),
        _below("grad.alpha_closed_form", errs[:, 2].max(), 1e-10, "vs autodiff"),
    ]


# ----------------------------------------------------------------------------
# estimator equivalence on enumerable vector cells


def _row_losses(cell: cr.VectorCell, x: np.ndarray, zs) -> np.ndarray:
    keep: dict = {}
    cell.forward(x, [Tensor(np.asarray(z, dtype=np.float64)) for z in zs], keep)
    last = keep["nodes"][-1].data
    act = np.maximum(last, 0.0) if cell.readout == "relu" else last
    return (act * cell.w).sum(axis=-1)


def quadrature_expectation(cell: cr.VectorCell, x: np.ndarray, logits: np.ndarray, lam: float,
                           nodes: int = 400) -> float:
    """E[L] for two-way concrete edges by Gauss-Legendre quadrature over the uniforms.

    With two candidates the sample on an edge is ``sigmoid((d + l) / lam)`` where
    ``d`` is the logit difference and ``l`` a standard logistic variable,
    ``l = log(u / (1 - u))`` for uniform ``u``.
    """
    a = np.asarray(logits, dtype=np.float64)
    e_count, k = a.shape
    if k != 2:
        raise ValueError("quadrature oracle handles two candidates per edge")
    t, w = np.polynomial.legendre.leggauss(nodes)
    u = 0.5 * (t + 1.0)
    w = 0.5 * w
    logistic = np.log(u) - np.log1p(-u)
    grids = np.meshgrid(*[logistic] * e_count, indexing="ij")
    weights = np.prod(np.meshgrid(*[w] * e_count, indexing="ij"), axis=0).reshape(-1)
    zs = []
    for e in range(e_count):
        z1 = 1.0 / (1.0 + np.exp(-(a[e, 0] - a[e, 1] + grids[e].reshape(-1)) / lam))
        zs.append(np.stack([z1, 1.0 - z1], axis=-1))
    xb = np.broadcast_to(x, (weights.size,) + np.shape(x)).copy()
    return float(np.dot(weights, _row_losses(cell, xb, zs)))


def quadrature_grad(cell, x, logits, lam, h: float = 1e-4, nodes: int = 400) -> np.ndarray:
    """Derivative of the quadrature expectation by central differences in the logits."""
    a = np.asarray(logits, dtype=np.float64)
    out = np.zeros_like(a)
    for idx in np.ndindex(*a.shape):
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        out[idx] = (quadrature_expectation(cell, x, ap, lam, nodes)
                    - quadrature_expectation(cell, x, am, lam, nodes)) / (2 * h)
    return out


def enumeration_grad(cell: cr.VectorCell, x: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Exact gradient of E[L] over categorical one-hot outcomes."""
    a = np.asarray(logits, dtype=np.float64)
    e_count, k = a.shape
    p = ad.probs(a)
    eye = np.eye(k)
    grad = np.zeros_like(a)
    for e in range(e_count):
        for j in range(k):
            # d p(ks) / d a[e, j] = p(ks) * (1[k_e = j] - p[e, j])
            grad[e, j] = enumerate_expectation(
                list(p), lambda ks: cell.loss_at(x, [eye[kk] for kk in ks]) * ((ks[e] == j) - p[e, j]))
    return grad


def _z_scores(samples: np.ndarray, exact: np.ndarray) -> float:
    s = samples.reshape(samples.shape[0], -1)
    se = s.std(axis=0, ddof=1) / math.sqrt(s.shape[0])
    dev = np.abs(s.mean(axis=0) - exact.reshape(-1))
    return float(np.max(np.where(se > 0, dev / np.maximum(se, 1e-300), np.where(dev > 1e-12, np.inf, 0.0))))


def estimator_problems(rng: np.random.Generator):
    """Fixed 1- and 2-edge chain cells with two candidates per edge."""
    out = []
    for e_count in (1, 2):
        cell = cr.VectorCell.random(rng, num_edges=e_count, dim=3, num_ops=2, chain=True,
                                    kinds=("linear", "relu_linear"))
        x = rng.standard_normal(3)
        out.append((cell, x, rng.normal(0.0, 0.7, size=(e_count, 2))))
    return out


def estimator_checks(rng: np.random.Generator, num_samples: int = 100_000, lam: float = 0.7) -> list[Check]:
    """Score-function and pathwise means against quadrature and enumeration oracles."""
    checks = []
    var_ratio = []
    for cell, x, a in estimator_problems(rng):
        e = a.shape[0]
        exact = quadrature_grad(cell, x, a, lam)
        _, sf = cr.score_function_grad(a, lam, cell, x, num_samples, rng, per_sample=True)
        rp = cr.reparam_grad_samples(a, lam, cell, x, num_samples, rng)
        checks.append(_below(f"estimator.score_function.{e}edge", _z_scores(sf, exact), 3.0, "std errors"))
        checks.append(_below(f"estimator.reparam.{e}edge", _z_scores(rp, exact), 3.0, "std errors"))
        exact0 = enumeration_grad(cell, x, a)
        _, hs = cr.hard_score_grad(a, cell, x, num_samples, rng, per_sample=True)
        checks.append(_below(f"estimator.categorical.{e}edge", _z_scores(hs, exact0), 3.0, "std errors"))
        var_ratio.append(rp.reshape(num_samples, -1).var(axis=0).sum() / sf.reshape(num_samples, -1).var(axis=0).sum())
    checks.append(_below("estimator.variance_ratio", max(var_ratio), 1.0, "pathwise / score-function"))
    return checks


def credit_sign_check(rng: np.random.Generator) -> Check:
    """A candidate whose output raises the loss must get a negative credit."""
    cell = cr.VectorCell([(0, 1)], [[("identity",), ("zero",)]], np.ones(3), readout="linear")
    x = np.abs(rng.standard_normal(3)) + 0.1
    keep = cell.node_grads(x, [np.array([1.0, 0.0])])
    r = cr.credit_value(keep["nodes"][1].grad, keep["mixed"][0].data)
    loss = keep["loss"]
    return Check("credit.sign", r + loss, 1e-12, bool(abs(r + loss) < 1e-12 and r < 0), "R = -L on a linear edge")


# ----------------------------------------------------------------------------
# Taylor credits


def taylor_checks(rng: np.random.Generator, trials: int = 20) -> list[Check]:
    worst_node = worst_cut = worst_int = 0.0
    for _ in range(trials):
        d = 4
        def lin():
            return ("relu_linear", Tensor(rng.standard_normal((d, d))))
        # chain with a skip connection around the middle layer
        dag = cr.LayerDAG({(0, 1): lin(), (1, 2): lin(), (1, 3): ("identity",), (2, 3): lin()},
                          rng.standard_normal(d))
        rep = cr.taylor_credits(dag, rng.standard_normal(d))
        worst_cut = max(worst_cut, max(abs(c - rep.f) for c in rep.cuts))
        # nodes 0, 1 and 3 each carry the whole signal; node 2 is bypassed by the skip
        for j in (0, 1, 3):
            worst_node = max(worst_node, abs(rep.node[j] - rep.f))
        # a node's credit equals the credit flowing out through its successor edges
        for i, v in rep.integrated.items():
            worst_int = max(worst_int, abs(v - rep.node[i]))
    return [
        _below("taylor.cut_sum", worst_cut, 1e-10, "edge credits across each cut"),
        _below("taylor.node_sum", worst_node, 1e-10, "nodes every path crosses"),
        _below("taylor.integrated", worst_int, 1e-10, "skip connection"),
    ]


# ----------------------------------------------------------------------------
# sampling limit and resource model


def concrete_limit_check(rng: np.random.Generator, num_samples: int = 100_000) -> Check:
    a = rng.normal(0.0, 1.0, size=6)
    z = ad.sample(np.broadcast_to(a, (num_samples, a.size)).copy(), 0.01, rng).z.data
    freq = np.bincount(z.argmax(axis=-1), minlength=a.size) / num_samples
    return _below("concrete.argmax_frequency", np.abs(freq - ad.probs(a)).max(), 0.01, "lambda = 0.01")


def resource_checks(rng: np.random.Generator, samples: int = 1000) -> list[Check]:
    spec = NetworkSpec(ParentGraph(2, FULL_OPS), num_cells=3, channels=4, num_classes=4, image_size=8)
    model = CostModel(spec)
    g = spec.graph
    mismatches = 0
    for _ in range(samples):
        per_cell = [tuple(g.ops[k] for k in rng.integers(0, g.num_ops, size=g.num_edges))
                    for _ in range(spec.num_cells)]
        masks = [np.eye(g.num_ops, dtype=np.int64)[[g.op_index(o) for o in ops]] for ops in per_cell]
        masked = sample_cost(masks, model, raw=True)
        walked = walk_cost(Genotype(g.edges, per_cell[0], per_cell[0]), spec, per_cell=per_cell).as_tuple()
        mismatches += masked != walked
    logits = {ct: rng.normal(0, 1, size=(g.num_edges, g.num_ops)) for ct in ("normal", "reduce")}
    table = model.by_type()
    analytic = expected_cost(logits, table)
    draws = []
    for _ in range(4000):
        idx = [ad.hard_sample(logits[ct], rng) for ct in spec.cell_types]
        draws.append(sample_cost([np.eye(g.num_ops)[k] for k in idx], model))
    draws = np.array(draws)
    z = abs(draws.mean() - analytic) / (draws.std(ddof=1) / math.sqrt(draws.size))
    ref = conv_cost(8, 8, 3, 3, 16, 16).as_tuple()
    return [
        _below("resource.masked_vs_walk", mismatches, 0.5, f"{samples} hard samples, exact integers"),
        _below("resource.expected_vs_mc", z, 3.0, "std errors"),
        Check("resource.reference_conv", float(sum(abs(np.array(ref) - (2304, 147456, 4352)))), 0.0,
              ref == (2304, 147456, 4352), "3x3 conv, 16->16 channels, 8x8 output"),
    ]


# ----------------------------------------------------------------------------
# attention bias


def bias_checks(rng: np.random.Generator, trials: int = 20) -> list[Check]:
    relu = relu_bias_example()
    worst_out = worst_loss = 0.0
    for _ in range(trials):
        k, d = 3, 4
        ws = [Tensor(rng.standard_normal((d, d))) for _ in range(k)]
        ops = [lambda t, w=w: F.matmul(t, w) for w in ws]
        p = ad.probs(rng.standard_normal(k))
        x = rng.standard_normal((2, d))
        c = rng.standard_normal((2, d))
        gap = expectation_gap(ops, x, lambda y: F.sum(F.mul(y, Tensor(c))), p)
        worst_loss = max(worst_loss, gap.gap)
        # network-level: mixture forward vs the mean of every one-hot forward
        mixed = F.mix(Tensor(p), [op(Tensor(x)) for op in ops]).data
        outs = sum(p[j] * ops[j](Tensor(x)).data for j in range(k))
        worst_out = max(worst_out, float(np.abs(mixed - outs).max()))
    return [
        Check("bias.relu_gap", relu.gap, 1e-12, abs(relu.gap - 0.25) < 1e-12,
              f"E[L]={relu.expected_loss:g} L(E)={relu.loss_of_expectation:g}; expected 0.25"),
        _below("bias.linear_loss_gap", worst_loss, 1e-10, "linear ops, linear loss"),
        _below("bias.linear_output_gap", worst_out, 1e-10, "linear ops, forward outputs"),
    ]


def darts_network_consistency(rng: np.random.Generator) -> Check:
    """The attention mixture mask equals the softmax of the logits on every edge."""
    g = ParentGraph(1, ("skip", "zero"))
    alpha = {ct: rng.standard_normal((g.num_edges, g.num_ops)) for ct in ("normal", "reduce")}
    m = darts_masks(alpha, ("normal", "reduce"))
    err = max(np.abs(m[0].data - ad.probs(alpha["normal"])).max(), np.abs(m[1].data - ad.probs(alpha["reduce"])).max())
    hard = onehot_masks(np.array([1, 0]), 2, np.float64).data
    return _below("darts.mask_softmax", err + abs(hard.sum() - 2), 1e-12)


CHECK_NAMES = (
    "grad.theta_fd", "grad.alpha_fd", "grad.alpha_closed_form",
    "estimator.*", "credit.sign", "taylor.*", "concrete.argmax_frequency",
    "resource.*", "bias.*", "darts.mask_softmax",
)


def run_checks(seed: int = 0, cells: int = 5, num_samples: int = 100_000,
               on_check: Callable[[Check], None] | None = None) -> list[Check]:
    """Run every check with one fixed seed; ``on_check`` sees each result as it lands."""
    rng = np.random.default_rng(seed)
    groups = [
        lambda: gradient_checks(rng, cells),
        lambda: estimator_checks(rng, num_samples),
        lambda: [credit_sign_check(rng)],
        lambda: taylor_checks(rng),
        lambda: [concrete_limit_check(rng, num_samples)],
        lambda: resource_checks(rng),
        lambda: bias_checks(rng),
        lambda: [darts_network_consistency(rng)],
    ]
    out: list[Check] = []
    for make in groups:
        with np.errstate(over="ignore", under="ignore"):
            for c in make():
                out.append(c)
                if on_check is not None:
                    on_check(c)
    return out


def format_table(checks) -> str:
    lines = ["check,value,tolerance,status"] + [c.row() for c in checks]
    return "\n".join(lines) + "\n"
