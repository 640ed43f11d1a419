"""DAG cells, the stacked search network, and child-graph genotypes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import functional as F
from .ops import FULL_OPS, OPS, apply_op, he_normal, init_op_params, relu_conv_bn
from .tensor import ShapeError, Tensor

__all__ = [
    "ParentGraph", "NetworkSpec", "Genotype", "EdgeTrace", "CellTrace",
    "Network", "cell_forward", "network_forward", "derive_genotype",
    "genotype_masks", "onehot_masks",
]

CELL_TYPES = ("normal", "reduce")


@dataclass(frozen=True)
class ParentGraph:
    """Cell DAG: two input nodes, ``num_intermediate`` ordered nodes.

    Every intermediate node ``j`` receives an edge from each lower-indexed
    node.  Node numbering is 0, 1 for the inputs and 2.. for intermediates.
    """

    num_intermediate: int = 2
    ops: tuple[str, ...] = FULL_OPS

    def __post_init__(self):
        if self.num_intermediate < 1:
            raise ValueError("need at least one intermediate node")
        unknown = [o for o in self.ops if o not in OPS]
        if unknown:
            raise ValueError(f"unknown operations {unknown}")
        if "zero" not in self.ops:
            raise ValueError("candidate list must contain the zero operation")
        if len(set(self.ops)) != len(self.ops):
            raise ValueError("duplicate candidate operations")

    @property
    def num_nodes(self) -> int:
        return 2 + self.num_intermediate

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return tuple((i, j) for j in range(2, self.num_nodes) for i in range(j))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_ops(self) -> int:
        return len(self.ops)

    def op_index(self, name: str) -> int:
        return self.ops.index(name)


@dataclass(frozen=True)
class NetworkSpec:
    graph: ParentGraph = field(default_factory=ParentGraph)
    num_cells: int = 2
    channels: int = 16
    in_channels: int = 3
    num_classes: int = 10
    image_size: int = 8

    def __post_init__(self):
        if self.num_cells < 1 or self.channels < 1 or self.num_classes < 2:
            raise ValueError("invalid network dimensions")
        if self.image_size % (2 ** len(self.reduction_positions)):
            raise ValueError("image size must survive every reduction cell")

    @property
    def reduction_positions(self) -> tuple[int, ...]:
        n = self.num_cells
        return tuple(sorted({n // 3, (2 * n) // 3}))

    @property
    def cell_types(self) -> tuple[str, ...]:
        red = set(self.reduction_positions)
        return tuple("reduce" if c in red else "normal" for c in range(self.num_cells))

    def cell_channels(self) -> list[int]:
        """Per-cell operation width; doubles at every reduction cell."""
        out, c = [], self.channels
        for t in self.cell_types:
            if t == "reduce":
                c *= 2
            out.append(c)
        return out

    def cell_spatial(self) -> list[tuple[int, int]]:
        """(input size, output size) of every cell."""
        out, s = [], self.image_size
        for t in self.cell_types:
            o = s // 2 if t == "reduce" else s
            out.append((s, o))
            s = o
        return out


@dataclass(frozen=True)
class Genotype:
    """Chosen operation per edge for each cell type (zero drops the edge)."""

    edges: tuple[tuple[int, int], ...]
    normal: tuple[str, ...]
    reduce: tuple[str, ...]

    def ops_for(self, cell_type: str) -> tuple[str, ...]:
        return self.normal if cell_type == "normal" else self.reduce

    def to_text(self) -> str:
        lines = []
        for ct in CELL_TYPES:
            for (i, j), op in zip(self.edges, self.ops_for(ct)):
                lines.append(f"{ct} edge({i},{j}) {op}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Genotype":
        found: dict[str, list[tuple[tuple[int, int], str]]] = {ct: [] for ct in CELL_TYPES}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            ct, edge, op = line.split()
            if ct not in found or not (edge.startswith("edge(") and edge.endswith(")")):
                raise ValueError(f"bad genotype line: {raw!r}")
            i, j = (int(v) for v in edge[5:-1].split(","))
            if op not in OPS:
                raise ValueError(f"unknown operation {op!r}")
            found[ct].append(((i, j), op))
        edges = tuple(e for e, _ in found["normal"])
        if tuple(e for e, _ in found["reduce"]) != edges:
            raise ValueError("normal and reduce cells list different edges")
        return cls(edges, tuple(o for _, o in found["normal"]), tuple(o for _, o in found["reduce"]))

    def to_dot(self) -> str:
        """Graphviz description; zero-op edges are omitted."""
        n_nodes = max(j for _, j in self.edges) + 1
        lines = ["digraph genotype {", "  rankdir=LR;"]
        for ct in CELL_TYPES:
            lines.append(f"  subgraph cluster_{ct} {{")
            lines.append(f'    label="{ct}";')
            name = {0: f"{ct}_in0", 1: f"{ct}_in1"}
            for j in range(2, n_nodes):
                name[j] = f"{ct}_n{j - 2}"
            out = f"{ct}_out"
            for node in list(name.values()) + [out]:
                lines.append(f'    "{node}";')
            for (i, j), op in zip(self.edges, self.ops_for(ct)):
                if op != "zero":
                    lines.append(f'    "{name[i]}" -> "{name[j]}" [label="{op}"];')
            for j in range(2, n_nodes):
                lines.append(f'    "{name[j]}" -> "{out}";')
            lines.append("  }")
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass
class EdgeTrace:
    edge: tuple[int, int]
    row: int
    z: np.ndarray
    outputs: list[Tensor]


@dataclass
class CellTrace:
    """Intermediate values of one cell, kept for credit computations."""

    index: int
    cell_type: str
    nodes: list[Tensor]
    edges: list[EdgeTrace]


def onehot_masks(indices: np.ndarray, num_ops: int, dtype=np.float32) -> Tensor:
    m = np.zeros((len(indices), num_ops), dtype=dtype)
    m[np.arange(len(indices)), indices] = 1.0
    return Tensor(m)


def derive_genotype(arch: Mapping[str, object], graph: ParentGraph) -> Genotype:
    """Per-edge argmax of the logits, zero included; ties go to the lowest index."""
    chosen = {}
    for ct in CELL_TYPES:
        a = arch[ct]
        a = np.asarray(a.data if isinstance(a, Tensor) else a)
        if a.shape != (graph.num_edges, graph.num_ops):
            raise ShapeError("derive_genotype", a.shape, (graph.num_edges, graph.num_ops))
        chosen[ct] = tuple(graph.ops[k] for k in np.argmax(a, axis=1))
    return Genotype(graph.edges, chosen["normal"], chosen["reduce"])


def genotype_masks(genotype: Genotype, spec: NetworkSpec, dtype=np.float32) -> list[Tensor]:
    """Hard one-hot masks reproducing ``genotype`` in every cell."""
    g = spec.graph
    idx = {ct: np.array([g.op_index(o) for o in genotype.ops_for(ct)]) for ct in CELL_TYPES}
    return [onehot_masks(idx[ct], g.num_ops, dtype) for ct in spec.cell_types]


def cell_forward(
    graph: ParentGraph,
    inputs: Sequence[Tensor],
    mask: Tensor | None,
    params: Mapping[str, Tensor],
    prefix: str,
    reduction: bool = False,
    reduction_prev: bool = False,
    chosen: Sequence[str] | None = None,
    trace: list | None = None,
    cell_index: int = 0,
    op_params: Mapping[tuple, dict] | None = None,
) -> Tensor:
    """Masked forward pass through one cell.

    With ``mask`` (E x K rows), node ``j`` is the mask-weighted sum of every
    candidate output on every incoming edge.  With ``chosen`` (one op name
    per edge) only the selected operations are executed, zero edges skipped.
    """
    if (mask is None) == (chosen is None):
        raise ValueError("pass exactly one of mask or chosen")
    if mask is not None and mask.shape != (graph.num_edges, graph.num_ops):
        raise ShapeError("cell_forward mask", mask.shape, (graph.num_edges, graph.num_ops))
    if chosen is not None and len(chosen) != graph.num_edges:
        raise ShapeError("cell_forward genotype", (len(chosen),), (graph.num_edges,))
    s0, s1 = inputs
    p = params
    if op_params is None:
        op_params = {(i, j, op): _op_params(p, prefix, i, j, op) for i, j in graph.edges for op in graph.ops}
    s0 = relu_conv_bn(s0, p[f"{prefix}.pre0.w"], p[f"{prefix}.pre0.gamma"], p[f"{prefix}.pre0.beta"],
                      stride=2 if reduction_prev else 1)
    s1 = relu_conv_bn(s1, p[f"{prefix}.pre1.w"], p[f"{prefix}.pre1.gamma"], p[f"{prefix}.pre1.beta"])
    if s0.shape != s1.shape:
        raise ShapeError("cell_forward inputs", s0.shape, s1.shape)
    states = [s0, s1]
    edge_traces: list[EdgeTrace] = []
    rows = {e: r for r, e in enumerate(graph.edges)}
    for j in range(2, graph.num_nodes):
        node = None
        for i in range(j):
            r = rows[(i, j)]
            stride = 2 if reduction and i < 2 else 1
            if chosen is not None:
                op = chosen[r]
                if op == "zero":
                    continue
                y = apply_op(op, states[i], op_params[(i, j, op)], stride)
            else:
                outs = [apply_op(op, states[i], op_params[(i, j, op)], stride) for op in graph.ops]
                z = F.index(mask, r)
                y = F.mix(z, outs)
                if trace is not None:
                    edge_traces.append(EdgeTrace((i, j), r, z.data, outs))
            node = y if node is None else F.add(node, y)
        if node is None:
            b, c, h, w = states[0].shape
            s = 2 if reduction else 1
            node = F.zeros((b, c, h // s, w // s), dtype=states[0].dtype)
        states.append(node)
    if trace is not None:
        trace.append(CellTrace(cell_index, "reduce" if reduction else "normal", states, edge_traces))
    return F.concat(states[2:], axis=1)


def _op_params(p: Mapping[str, Tensor], prefix: str, i: int, j: int, op: str) -> dict[str, Tensor]:
    stem = f"{prefix}.edge{i}_{j}.{op}."
    return {k[len(stem):]: v for k, v in p.items() if k.startswith(stem)} if OPS[op].is_conv else {}


class Network:
    """Stem, stacked cells, global average pooling and a linear classifier."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype).type
        self.params: dict[str, Tensor] = {}
        self._build(rng)
        g = spec.graph
        self._op_params = [
            {(i, j, op): _op_params(self.params, f"cells.{idx}", i, j, op) for i, j in g.edges for op in g.ops}
            for idx in range(spec.num_cells)
        ]

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True, name=name)

    def _build(self, rng: np.random.Generator) -> None:
        s, g, dt = self.spec, self.spec.graph, self.dtype
        c = s.channels
        self._add("stem.w", he_normal(rng, (c, s.in_channels, 3, 3), 9 * s.in_channels, dt))
        self._add("stem.gamma", np.ones(c))
        self._add("stem.beta", np.zeros(c))
        c_pp, c_p = c, c
        for idx, (ct, cc) in enumerate(zip(s.cell_types, s.cell_channels())):
            pre = f"cells.{idx}"
            for name, cin in (("pre0", c_pp), ("pre1", c_p)):
                self._add(f"{pre}.{name}.w", he_normal(rng, (cc, cin, 1, 1), cin, dt))
                self._add(f"{pre}.{name}.gamma", np.ones(cc))
                self._add(f"{pre}.{name}.beta", np.zeros(cc))
            for i, j in g.edges:
                for op in g.ops:
                    for k, v in init_op_params(op, cc, rng, dt).items():
                        self._add(f"{pre}.edge{i}_{j}.{op}.{k}", v)
            c_pp, c_p = c_p, g.num_intermediate * cc
        self._add("classifier.w", he_normal(rng, (c_p, s.num_classes), c_p, dt) * 0.5)
        self._add("classifier.b", np.zeros(s.num_classes))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:3]}...")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"load {k}", arr.shape, t.shape)
            t.data = arr.astype(self.dtype)

    def stem(self, x: Tensor) -> Tensor:
        p = self.params
        return F.batchnorm(F.conv2d(x, p["stem.w"], padding=1), p["stem.gamma"], p["stem.beta"])

    def forward(self, x, masks: Sequence[Tensor] | None = None, genotype: Genotype | None = None,
                trace: list | None = None) -> Tensor:
        """Logits for an NCHW batch; pass one mask per cell or a genotype."""
        s = self.spec
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != s.in_channels:
            raise ShapeError("network input", x.shape, (None, s.in_channels, s.image_size, s.image_size))
        if masks is not None and len(masks) != s.num_cells:
            raise ShapeError("network masks", (len(masks),), (s.num_cells,))
        s0 = s1 = self.stem(x)
        types = s.cell_types
        for idx, ct in enumerate(types):
            out = cell_forward(
                s.graph, (s0, s1),
                masks[idx] if masks is not None else None,
                self.params, f"cells.{idx}",
                reduction=ct == "reduce",
                reduction_prev=idx > 0 and types[idx - 1] == "reduce",
                chosen=genotype.ops_for(ct) if genotype is not None else None,
                trace=trace, cell_index=idx, op_params=self._op_params[idx],
            )
            s0, s1 = s1, out
        pooled = F.mean(s1, axis=(2, 3))
        return F.add(F.matmul(pooled, self.params["classifier.w"]), self.params["classifier.b"])

    __call__ = forward


def network_forward(net: Network, x, masks: Sequence[Tensor], trace: list | None = None) -> Tensor:
    return net.forward(x, masks=masks, trace=trace)
