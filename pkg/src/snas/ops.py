"""Candidate operations for a cell edge and their static cost model.

Convolutional candidates follow the ReLU-Conv-BN ordering; a separable
convolution is a depthwise+pointwise pair applied twice.  Every candidate
preserves spatial size at stride 1 through padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor

__all__ = [
    "OpKind", "OpCost", "OPS", "FULL_OPS", "REDUCED_OPS", "apply_op",
    "init_op_params", "op_cost", "conv_cost", "relu_conv_bn", "he_normal",
]


@dataclass(frozen=True)
class OpKind:
    tag: str
    family: str  # sep_conv | dil_conv | max_pool | avg_pool | skip | zero
    kernel: int = 0
    dilation: int = 1

    @property
    def is_conv(self) -> bool:
        return self.family in ("sep_conv", "dil_conv")

    @property
    def is_pool(self) -> bool:
        return self.family in ("max_pool", "avg_pool")


OPS: dict[str, OpKind] = {
    "sep_conv_3x3": OpKind("sep_conv_3x3", "sep_conv", 3),
    "sep_conv_5x5": OpKind("sep_conv_5x5", "sep_conv", 5),
    "dil_conv_3x3": OpKind("dil_conv_3x3", "dil_conv", 3, 2),
    "dil_conv_5x5": OpKind("dil_conv_5x5", "dil_conv", 5, 2),
    "max_pool_3x3": OpKind("max_pool_3x3", "max_pool", 3),
    "avg_pool_3x3": OpKind("avg_pool_3x3", "avg_pool", 3),
    "skip": OpKind("skip", "skip"),
    "zero": OpKind("zero", "zero"),
}
FULL_OPS: tuple[str, ...] = tuple(OPS)
REDUCED_OPS: tuple[str, ...] = ("sep_conv_3x3", "avg_pool_3x3", "skip", "zero")


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_op_params(kind: OpKind | str, channels: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameters for one candidate; channel count is preserved."""
    kind = OPS[kind] if isinstance(kind, str) else kind
    c, k = channels, kind.kernel
    p: dict[str, np.ndarray] = {}
    if kind.family == "sep_conv":
        for half in (1, 2):
            p[f"dw{half}"] = he_normal(rng, (c, 1, k, k), k * k, dtype)
            p[f"pw{half}"] = he_normal(rng, (c, c, 1, 1), c, dtype)
            p[f"bn{half}.gamma"] = np.ones(c, dtype=dtype)
            p[f"bn{half}.beta"] = np.zeros(c, dtype=dtype)
    elif kind.family == "dil_conv":
        p["dw1"] = he_normal(rng, (c, 1, k, k), k * k, dtype)
        p["pw1"] = he_normal(rng, (c, c, 1, 1), c, dtype)
        p["bn1.gamma"] = np.ones(c, dtype=dtype)
        p["bn1.beta"] = np.zeros(c, dtype=dtype)
    return p


def relu_conv_bn(x: Tensor, w: Tensor, gamma: Tensor, beta: Tensor, stride: int = 1) -> Tensor:
    """ReLU then a 1x1 (possibly strided) convolution then batch norm."""
    return F.batchnorm(F.conv2d(F.relu(x), w, stride=stride), gamma, beta)


def apply_op(kind: OpKind | str, x: Tensor, params: dict[str, Tensor], stride: int = 1) -> Tensor:
    """Run one candidate operation on an NCHW tensor."""
    kind = OPS[kind] if isinstance(kind, str) else kind
    if x.ndim != 4:
        raise ShapeError(f"apply_op[{kind.tag}]", x.shape)
    if stride not in (1, 2):
        raise ValueError(f"{kind.tag}: unsupported stride {stride}")
    b, c, h, w = x.shape
    if stride == 2 and (h % 2 or w % 2):
        raise ShapeError(f"apply_op[{kind.tag}] stride 2 needs even spatial dims", x.shape)
    fam = kind.family
    if fam == "zero":
        return F.zeros((b, c, h // stride, w // stride), dtype=x.dtype)
    if fam == "skip":
        if stride == 1:
            return x
        # parameter-free strided 1x1 identity projection
        return F.index(x, (slice(None), slice(None), slice(None, None, 2), slice(None, None, 2)))
    if fam == "max_pool":
        return F.maxpool2d(x, kind.kernel, stride, kind.kernel // 2)
    if fam == "avg_pool":
        return F.avgpool2d(x, kind.kernel, stride, kind.kernel // 2)

    if params["pw1"].shape[1] != c:
        raise ShapeError(f"apply_op[{kind.tag}] channel mismatch", x.shape, params["pw1"].shape)
    k, d = kind.kernel, kind.dilation
    pad = d * (k // 2)
    y = F.conv2d(F.relu(x), params["dw1"], stride=stride, padding=pad, dilation=d, groups=c)
    y = F.batchnorm(F.conv2d(y, params["pw1"]), params["bn1.gamma"], params["bn1.beta"])
    if fam == "sep_conv":
        y = F.conv2d(F.relu(y), params["dw2"], padding=pad, groups=c)
        y = F.batchnorm(F.conv2d(y, params["pw2"]), params["bn2.gamma"], params["bn2.beta"])
    return y


# ----------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class OpCost:
    params: int
    flops: int
    mac: int

    def __add__(self, other: "OpCost") -> "OpCost":
        return OpCost(self.params + other.params, self.flops + other.flops, self.mac + other.mac)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.params, self.flops, self.mac)


def conv_cost(h: int, w: int, f: int, k: int, i: int, o: int, g: int = 1) -> OpCost:
    """One convolution layer; ``h, w`` are its output spatial dims."""
    params = f * k * i * o // g
    return OpCost(params, h * w * params, h * w * (i + o) + params)


def op_cost(kind: OpKind | str, h: int, w: int, i: int, o: int) -> OpCost:
    """(params, FLOPs, MAC) for a candidate with output size ``h x w``.

    Composite candidates sum the costs of their constituent convolutions.
    """
    kind = OPS[kind] if isinstance(kind, str) else kind
    if min(h, w, i, o) <= 0:
        raise ValueError("dimensions must be positive")
    fam, k = kind.family, kind.kernel
    if fam == "zero":
        return OpCost(0, 0, 0)
    if fam == "skip":
        return OpCost(0, 0, h * w * (i + o))
    if fam in ("max_pool", "avg_pool"):
        return OpCost(0, h * w * k * k * i * o, h * w * (i + o))
    cost = conv_cost(h, w, k, k, i, i, i) + conv_cost(h, w, 1, 1, i, o)
    if fam == "sep_conv":
        cost = cost + conv_cost(h, w, k, k, o, o, o) + conv_cost(h, w, 1, 1, o, o)
    return cost
