"""Resource penalty over sampled child graphs.

The cost of a child graph is linear in the per-edge one-hot choices, so the
network-level cost splits into local per-edge costs and its expectation under
the factorised distribution has a closed form.  Costs carry no dependence on
the operation weights; the penalty only ever moves the logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .archdist import hard_sample, probs
from .cell import CELL_TYPES, Genotype, NetworkSpec
from .ops import OpCost, op_cost

__all__ = [
    "PRESETS", "ResourceConfig", "CostModel", "walk_cost", "sample_cost",
    "expected_cost", "expected_cost_grad", "mc_cost_grad",
]

# Penalty weights for the named constraint levels.  Values come from the
# calibrate-eta sweep on the default planted task; they are not universal.
PRESETS: dict[str, float] = {"none": 0.0, "mild": 0.01, "moderate": 0.03, "aggressive": 0.1}


@dataclass(frozen=True)
class ResourceConfig:
    eta: float = 0.0
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    preset: str | None = None
    samples: int = 16

    def __post_init__(self):
        if self.eta < 0 or any(w < 0 for w in self.weights):
            raise ValueError("eta and criterion weights must be nonnegative")
        if self.samples < 1:
            raise ValueError("need at least one cost sample")

    @classmethod
    def from_preset(cls, name: str, **kw) -> "ResourceConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown constraint preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(eta=PRESETS[name], preset=name, **kw)


def _edge_geometry(spec: NetworkSpec):
    """Yield (cell index, cell type, edge row, edge, out h, out w, channels)."""
    g = spec.graph
    for c, (ct, ch, (_, s_out)) in enumerate(zip(spec.cell_types, spec.cell_channels(), spec.cell_spatial())):
        for r, e in enumerate(g.edges):
            yield c, ct, r, e, s_out, s_out, ch


class CostModel:
    """Per-cell, per-edge, per-op cost tables for one network layout.

    ``raw[c]`` holds integer (params, flops, mac) triples with shape (E, K, 3);
    ``scalar[c]`` folds them into one number per op by dividing every
    criterion by its maximum over the edge's candidate set and taking the
    weighted sum.
    """

    def __init__(self, spec: NetworkSpec, weights=(1.0, 1.0, 1.0)):
        self.spec = spec
        self.weights = np.asarray(weights, dtype=np.float64)
        g = spec.graph
        n = spec.num_cells
        self.raw = [np.zeros((g.num_edges, g.num_ops, 3), dtype=np.int64) for _ in range(n)]
        for c, _, r, _, h, w, ch in _edge_geometry(spec):
            for k, op in enumerate(g.ops):
                self.raw[c][r, k] = op_cost(op, h, w, ch, ch).as_tuple()
        self.scalar = []
        for tab in self.raw:
            top = tab.max(axis=1, keepdims=True).astype(np.float64)
            norm = np.divide(tab, top, out=np.zeros(tab.shape), where=top > 0)
            self.scalar.append(norm @ self.weights)

    @property
    def cell_types(self) -> tuple[str, ...]:
        return self.spec.cell_types

    def by_type(self) -> dict[str, np.ndarray]:
        """Scalar cost tables summed over all cells that share a logit matrix."""
        g = self.spec.graph
        out = {ct: np.zeros((g.num_edges, g.num_ops)) for ct in CELL_TYPES}
        for ct, tab in zip(self.cell_types, self.scalar):
            out[ct] = out[ct] + tab
        return out


def walk_cost(genotype: Genotype, spec: NetworkSpec, per_cell: list | None = None) -> OpCost:
    """Cost of a materialised child graph, found by visiting its surviving edges.

    ``per_cell`` optionally gives one tuple of op names per cell, overriding
    the genotype (cells of one type may then differ).
    """
    total = OpCost(0, 0, 0)
    chosen = per_cell or [genotype.ops_for(ct) for ct in spec.cell_types]
    for c, _, r, _, h, w, ch in _edge_geometry(spec):
        op = chosen[c][r]
        if op != "zero":
            total = total + op_cost(op, h, w, ch, ch)
    return total


def sample_cost(masks, model: CostModel, raw: bool = False):
    """Masked cost sum over every cell and edge for per-cell (E, K) masks.

    With ``raw`` the result is the (params, flops, mac) integer triple and
    masks must be hard one-hot.
    """
    if len(masks) != len(model.scalar):
        raise ValueError(f"expected {len(model.scalar)} masks, got {len(masks)}")
    if raw:
        total = np.zeros(3, dtype=np.int64)
        for m, tab in zip(masks, model.raw):
            m = np.asarray(m)
            if not np.all((m == 0) | (m == 1)):
                raise ValueError("raw cost needs hard one-hot masks")
            total = total + np.einsum("ek,ekc->c", m.astype(np.int64), tab)
        return tuple(int(v) for v in total)
    total = 0.0
    for m, tab in zip(masks, model.scalar):
        m = np.asarray(m, dtype=np.float64)
        for r in range(tab.shape[0]):
            total += float(np.dot(m[r], tab[r]))
    return total


def expected_cost(logits: dict, table: dict[str, np.ndarray]) -> float:
    """Closed form sum over edges of softmax(logits) . cost."""
    return float(sum((probs(logits[ct]) * table[ct]).sum() for ct in table))


def expected_cost_grad(logits, cost: np.ndarray) -> np.ndarray:
    """Exact d E[C] / d logits for one (E, K) logit matrix."""
    p = probs(logits)
    return p * (cost - (p * cost).sum(axis=-1, keepdims=True))


def mc_cost_grad(logits, cost: np.ndarray, num_samples: int, rng: np.random.Generator,
                 lam: float | None = None) -> np.ndarray:
    """Score-function estimate of d E[C] / d logits with local per-edge rewards.

    Every edge is rewarded with its own sampled cost only.  Samples are exact
    categorical draws, i.e. the zero-temperature limit; ``lam`` is accepted
    for interface symmetry and ignored.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    a = np.asarray(logits, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    k = hard_sample(a, rng, size=num_samples)  # (S, E)
    p = probs(a)
    rows = np.arange(a.shape[0])
    reward = cost[rows, k]  # (S, E)
    onehot = np.zeros((num_samples,) + a.shape)
    np.put_along_axis(onehot, k[..., None], 1.0, axis=-1)
    return ((onehot - p) * reward[..., None]).mean(axis=0)
