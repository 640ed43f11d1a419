"""Closed-form search gradients, per-edge credits and Taylor credits.

Everything here is computed from quantities the tape already holds after one
forward/backward pass: the candidate outputs ``O_k`` cached on each edge and
the gradient ``g_j`` reaching each node.  With ``d_k = <g_j, O_k>`` the
gradient of a concrete sample ``Z = softmax((a + G) / lam)`` is

    dL/da_k = Z_k (d_k - Z . d) / lam

and dividing by ``alpha_k`` gives the derivative with respect to
``alpha = exp(a)`` directly.

The module also carries a tiny vector-valued DAG (``VectorCell``) whose
operations are positively homogeneous; on it the score-function and Taylor
identities hold exactly, which makes them testable against enumeration and
quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import archdist as ad
from . import functional as F
from .tensor import Tape, Tensor

__all__ = [
    "CreditReport", "credit_value", "alpha_grad_from_outputs", "analytic_alpha_grad", "edge_credit",
    "score_function_grad", "VectorCell", "HOMOGENEOUS_OPS", "taylor_credits",
    "TaylorReport", "LayerDAG", "reparam_grad_samples", "hard_score_grad",
]


# ----------------------------------------------------------------------------
# search gradient from cached activations


def _inner(g: np.ndarray, outs: Sequence[np.ndarray], per_row: bool) -> np.ndarray:
    if per_row:
        b = g.shape[0]
        return np.stack([(g * o).reshape(b, -1).sum(axis=1) for o in outs], axis=-1)
    return np.array([np.vdot(g, o) for o in outs], dtype=np.float64)


def alpha_grad_from_outputs(z: np.ndarray, outs: Sequence[np.ndarray], g: np.ndarray, lam: float,
                            form: str = "log", alpha: np.ndarray | None = None) -> np.ndarray:
    """Closed-form gradient for one edge.

    ``z`` is the sampled row (K,) or per-sample rows (B, K); ``g`` the
    gradient at the receiving node.  ``form="log"`` differentiates with
    respect to the logits, ``form="direct"`` with respect to ``alpha``
    itself (then ``alpha`` must be given).  Per-row input returns per-row
    gradients.
    """
    z = np.asarray(z, dtype=np.float64)
    d = _inner(np.asarray(g, dtype=np.float64), [np.asarray(o, dtype=np.float64) for o in outs], z.ndim == 2)
    grad = z * (d - (z * d).sum(axis=-1, keepdims=True)) / lam
    if form == "direct":
        if alpha is None:
            raise ValueError("direct form needs alpha")
        grad = grad / np.asarray(alpha, dtype=np.float64)
    elif form != "log":
        raise ValueError(f"unknown form {form!r}")
    return grad


def analytic_alpha_grad(traces, lam: float, num_edges: int, num_ops: int, form: str = "log",
                        alpha: dict | None = None) -> dict[str, np.ndarray]:
    """Sum of closed-form edge gradients over every traced cell, per cell type.

    ``traces`` are the ``CellTrace`` records of a masked network forward
    followed by a backward pass (node tensors then hold their gradients).
    """
    out: dict[str, np.ndarray] = {}
    for cell in traces:
        acc = out.setdefault(cell.cell_type, np.zeros((num_edges, num_ops)))
        for et in cell.edges:
            node = cell.nodes[et.edge[1]]
            if node.grad is None:
                raise ValueError(f"no gradient cached at node {et.edge[1]} of cell {cell.index}")
            if any(o.data is None for o in et.outputs):
                raise ValueError("missing cached activations")
            a_row = None if alpha is None else np.asarray(alpha[cell.cell_type])[et.row]
            acc[et.row] += alpha_grad_from_outputs(et.z, [o.data for o in et.outputs], node.grad, lam,
                                                   form, a_row)
    return out


def credit_value(g: np.ndarray, mixed: np.ndarray, per_row: bool = False):
    """Edge credit ``R = -[<g_j, O~_ij>]_c``; one value per row with ``per_row``.

    The arrays are plain values, so no gradient can flow back through them.
    """
    g = np.asarray(g, dtype=np.float64)
    mixed = np.asarray(mixed, dtype=np.float64)
    if per_row:
        return -(g * mixed).reshape(g.shape[0], -1).sum(axis=1)
    return -float(np.vdot(g, mixed))


@dataclass
class CreditReport:
    """Per-edge credits ``R = -<g_j, O~>`` and node credits ``<g_j, x_j>``."""

    edge: dict[tuple[int, int, int], float] = field(default_factory=dict)  # (cell, i, j) -> R
    node: dict[tuple[int, int], float] = field(default_factory=dict)  # (cell, j) -> <g, x>
    sample_id: int = 0

    def as_rows(self) -> list[tuple[int, int, int, float]]:
        return [(c, i, j, r) for (c, i, j), r in sorted(self.edge.items())]


def edge_credit(traces, sample_id: int = 0) -> CreditReport:
    """Credits from one forward/backward pass; batch credit is the batch mean.

    The loss is already a batch mean, so summing ``g * O~`` over the batch
    gives the mean of the per-sample credits.
    """
    rep = CreditReport(sample_id=sample_id)
    for cell in traces:
        for et in cell.edges:
            i, j = et.edge
            g = cell.nodes[j].grad
            if g is None:
                g = np.zeros_like(cell.nodes[j].data)
            zt = np.asarray(et.z, dtype=np.float64)
            mixed = sum(zt[k] * np.asarray(o.data, dtype=np.float64) for k, o in enumerate(et.outputs))
            rep.edge[(cell.index, i, j)] = credit_value(g, mixed)
        for j in range(2, len(cell.nodes)):
            node = cell.nodes[j]
            g = node.grad if node.grad is not None else np.zeros_like(node.data)
            rep.node[(cell.index, j)] = float(np.vdot(g, node.data))
    return rep


# ----------------------------------------------------------------------------
# a small homogeneous vector DAG for estimator checks

HOMOGENEOUS_OPS = ("linear", "relu_linear", "relu", "neg_relu", "identity", "zero")
REJECTED_OPS = ("bias", "sigmoid", "batchnorm", "tanh")


def _apply_vec(op: tuple, x: Tensor) -> Tensor:
    kind = op[0]
    if kind == "linear":
        return F.matmul(x, op[1])
    if kind == "relu_linear":
        return F.relu(F.matmul(x, op[1]))
    if kind == "relu":
        return F.relu(x)
    if kind == "neg_relu":
        return F.relu(F.neg(x))
    if kind == "identity":
        return x
    if kind == "zero":
        return F.mul(x, 0.0)
    raise ValueError(f"operation {kind!r} is not positively homogeneous")


class VectorCell:
    """DAG over vector nodes: node 0 is the input, each later node sums its
    incoming edges, each edge mixes K candidate operations with weights Z.

    The readout is ``sum(w * relu(x_last))`` (or linear with
    ``readout="linear"``), positively homogeneous of degree one, so
    ``L = <dL/dx_j, x_j>`` at every node.
    """

    def __init__(self, edges: Sequence[tuple[int, int]], ops: Sequence[Sequence[tuple]], w: np.ndarray,
                 readout: str = "relu"):
        if len(edges) != len(ops):
            raise ValueError("one candidate list per edge")
        for cands in ops:
            for op in cands:
                if op[0] not in HOMOGENEOUS_OPS:
                    raise ValueError(f"operation {op[0]!r} is not positively homogeneous")
        if readout not in ("relu", "linear"):
            raise ValueError(f"unknown readout {readout!r}")
        self.edges = list(edges)
        self.ops = [list(c) for c in ops]
        self.w = np.asarray(w, dtype=np.float64)
        self.readout = readout
        self.num_nodes = max(j for _, j in self.edges) + 1

    @property
    def num_ops(self) -> int:
        return len(self.ops[0])

    @classmethod
    def random(cls, rng: np.random.Generator, num_edges: int = 2, dim: int = 3, num_ops: int = 2,
               chain: bool = True, kinds: Sequence[str] = ("linear", "relu_linear"), readout: str = "relu"):
        """Random cell: a chain 0->1->2.. or a fan of parallel edges 0->1."""
        edges = [(e, e + 1) for e in range(num_edges)] if chain else [(0, 1)] * num_edges
        ops = []
        for _ in range(num_edges):
            cands = []
            for k in range(num_ops):
                kind = kinds[k % len(kinds)]
                cands.append((kind, Tensor(rng.standard_normal((dim, dim)))) if "linear" in kind else (kind,))
            ops.append(cands)
        return cls(edges, ops, rng.standard_normal(dim), readout)

    def forward(self, x, z: Sequence[Tensor], keep: dict | None = None) -> Tensor:
        """Summed loss over the batch rows of ``x``; ``z[e]`` is (K,) or (B, K)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        nodes: list[Tensor | None] = [x] + [None] * (self.num_nodes - 1)
        mixed: list[Tensor] = []
        outs: list[list[Tensor]] = []
        for e, (i, j) in enumerate(self.edges):
            o = [_apply_vec(op, nodes[i]) for op in self.ops[e]]
            y = F.mix(z[e], o)
            outs.append(o)
            mixed.append(y)
            nodes[j] = y if nodes[j] is None else F.add(nodes[j], y)
        last = nodes[-1]
        act = F.relu(last) if self.readout == "relu" else last
        loss = F.sum(F.mul(act, Tensor(np.broadcast_to(self.w, act.shape).copy())))
        if keep is not None:
            keep.update(nodes=nodes, mixed=mixed, outs=outs)
        return loss

    def loss_at(self, x, zs: Sequence[np.ndarray]) -> float:
        return float(self.forward(x, [Tensor(np.asarray(z, dtype=np.float64)) for z in zs]).data)

    def node_grads(self, x, zs: Sequence[np.ndarray]) -> dict:
        """Forward and backward at fixed masks; returns the kept intermediates."""
        keep: dict = {}
        zt = [Tensor(np.asarray(z, dtype=np.float64)) for z in zs]
        with Tape() as tape:
            loss = self.forward(x, [Tensor(z.data, requires_grad=True) for z in zt], keep)
        tape.backward(loss)
        keep["loss"] = float(loss.data)
        return keep


def score_function_grad(logits: np.ndarray, lam: float, cell: VectorCell, x: np.ndarray, num_samples: int,
                        rng: np.random.Generator, per_sample: bool = False):
    """Score-function estimate of d E[L] / d logits with local edge credits.

    For each edge the estimator multiplies the concrete score of that edge's
    sample by ``[<dL/dx_j, O~_ij>]_c``, the negated credit, read off one
    backward pass with every sample of the batch evaluated side by side.
    No baseline is subtracted.  Returns the mean (and per-sample values).
    """
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    a = np.asarray(logits, dtype=np.float64)
    e_count, k = a.shape
    s = num_samples
    u = ad.uniform(rng, (s, e_count, k))
    g = ad.gumbel(u)
    y = (a[None] + g) / lam
    y = y - y.max(axis=-1, keepdims=True)
    z = np.exp(y)
    z /= z.sum(axis=-1, keepdims=True)
    xb = np.broadcast_to(np.asarray(x, dtype=np.float64), (s,) + np.shape(x)).copy()
    keep = cell.node_grads(xb, [z[:, e] for e in range(e_count)])
    est = np.zeros((s, e_count, k))
    for e, (_, j) in enumerate(cell.edges):
        gj = keep["nodes"][j].grad
        credit = credit_value(gj, keep["mixed"][e].data, per_row=True)
        est[:, e] = ad.concrete_score(a[e], lam, z[:, e]) * (-credit)[:, None]
    return (est.mean(axis=0), est) if per_sample else est.mean(axis=0)


def hard_score_grad(logits: np.ndarray, cell: VectorCell, x: np.ndarray, num_samples: int,
                    rng: np.random.Generator, per_sample: bool = False):
    """Zero-temperature counterpart: exact categorical draws, categorical score."""
    a = np.asarray(logits, dtype=np.float64)
    e_count, k = a.shape
    s = num_samples
    idx = ad.hard_sample(a, rng, size=s)  # (S, E)
    z = np.zeros((s, e_count, k))
    np.put_along_axis(z, idx[..., None], 1.0, axis=-1)
    xb = np.broadcast_to(np.asarray(x, dtype=np.float64), (s,) + np.shape(x)).copy()
    keep = cell.node_grads(xb, [z[:, e] for e in range(e_count)])
    est = np.zeros((s, e_count, k))
    for e, (_, j) in enumerate(cell.edges):
        credit = credit_value(keep["nodes"][j].grad, keep["mixed"][e].data, per_row=True)
        est[:, e] = ad.log_prob_grad(a[e], idx[:, e]) * (-credit)[:, None]
    return (est.mean(axis=0), est) if per_sample else est.mean(axis=0)


def reparam_grad_samples(logits: np.ndarray, lam: float, cell: VectorCell, x: np.ndarray, num_samples: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Per-sample pathwise gradients (S, E, K) via the closed form."""
    a = np.asarray(logits, dtype=np.float64)
    e_count, k = a.shape
    s = num_samples
    u = ad.uniform(rng, (s, e_count, k))
    y = (a[None] + ad.gumbel(u)) / lam
    y = y - y.max(axis=-1, keepdims=True)
    z = np.exp(y)
    z /= z.sum(axis=-1, keepdims=True)
    xb = np.broadcast_to(np.asarray(x, dtype=np.float64), (s,) + np.shape(x)).copy()
    keep = cell.node_grads(xb, [z[:, e] for e in range(e_count)])
    out = np.zeros((s, e_count, k))
    for e, (_, j) in enumerate(cell.edges):
        out[:, e] = alpha_grad_from_outputs(z[:, e], [o.data for o in keep["outs"][e]], keep["nodes"][j].grad, lam)
    return out


# ----------------------------------------------------------------------------
# Taylor credits on ReLU networks without biases


class LayerDAG:
    """Scalar-output DAG with one fixed operation per edge.

    ``edges`` maps (i, j) to an operation tuple as in ``VectorCell``; node 0
    is the input and the highest node feeds the readout ``f = w . x_out``.
    """

    def __init__(self, edges: dict[tuple[int, int], tuple], w: np.ndarray):
        for (i, j), op in edges.items():
            if i >= j:
                raise ValueError("edges must point from lower to higher nodes")
            if op[0] in REJECTED_OPS or op[0] not in HOMOGENEOUS_OPS:
                raise ValueError(f"Taylor credits need ReLU bias-free layers; got {op[0]!r}")
        self.edges = dict(sorted(edges.items(), key=lambda kv: (kv[0][1], kv[0][0])))
        self.w = np.asarray(w, dtype=np.float64)
        self.num_nodes = max(j for _, j in self.edges) + 1


@dataclass
class TaylorReport:
    f: float
    node: dict[int, float]  # <df/dx_j, x_j>
    edge: dict[tuple[int, int], float]  # <df/dx_j, O_ij(x_i)>
    integrated: dict[int, float]  # sum over successor edges of the VJP credit at x_i
    cuts: list[float]  # f decomposed across every topological cut


def taylor_credits(dag: LayerDAG, x: np.ndarray) -> TaylorReport:
    """First-order credits at the origin of every node and edge.

    For positively homogeneous layers these are exact: every topological cut
    of the DAG distributes ``f(x)`` over the edges crossing it.
    """
    x = np.asarray(x, dtype=np.float64)
    nodes: list[Tensor | None] = [Tensor(x.copy(), requires_grad=True)] + [None] * (dag.num_nodes - 1)
    edge_out: dict[tuple[int, int], Tensor] = {}
    with Tape() as tape:
        for (i, j), op in dag.edges.items():
            y = _apply_vec(op, nodes[i])
            edge_out[(i, j)] = y
            nodes[j] = y if nodes[j] is None else F.add(nodes[j], y)
        f = F.sum(F.mul(nodes[-1], Tensor(dag.w)))
    tape.backward(f)
    fv = float(f.data)

    def grad_of(t: Tensor) -> np.ndarray:
        return t.grad if t.grad is not None else np.zeros_like(t.data)

    node = {j: float(np.vdot(grad_of(nodes[j]), nodes[j].data)) for j in range(dag.num_nodes) if nodes[j] is not None}
    edge = {e: float(np.vdot(grad_of(nodes[e[1]]), y.data)) for e, y in edge_out.items()}
    integrated: dict[int, float] = {}
    for (i, j), op in dag.edges.items():
        # vector-Jacobian product of this edge alone, contracted with x_i
        xi = Tensor(nodes[i].data.copy(), requires_grad=True)
        with Tape() as t2:
            local = F.sum(F.mul(_apply_vec(op, xi), Tensor(grad_of(nodes[j]))))
        t2.backward(local)
        vjp = xi.grad if xi.grad is not None else np.zeros_like(xi.data)
        integrated[i] = integrated.get(i, 0.0) + float(np.vdot(vjp, xi.data))
    cuts = [sum(v for (i, j), v in edge.items() if i <= t < j) for t in range(dag.num_nodes - 1)]
    return TaylorReport(fv, node, edge, integrated, cuts)
