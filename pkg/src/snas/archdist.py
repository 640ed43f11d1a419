"""Fully factorised architecture distribution over per-edge operation choices.

Each edge holds a vector of unconstrained logits ``log alpha``.  Samples are
drawn from the concrete (Gumbel-softmax) relaxation, which is differentiable
in the logits through the reparameterisation ``Z = softmax((log alpha + G) / lam)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor

__all__ = [
    "U_MIN", "U_MAX", "ArchSample", "TemperatureSchedule", "uniform", "gumbel",
    "sample", "hard_sample", "probs", "edge_entropy", "mean_entropy",
    "log_prob", "log_prob_grad", "concrete_log_density", "concrete_score",
    "init_logits",
]

U_MIN = 1e-10
U_MAX = 1.0 - 1e-7


@dataclass
class ArchSample:
    """Softened one-hot rows ``z`` plus the noise that produced them."""

    z: Tensor
    g: np.ndarray
    u: np.ndarray
    lam: float

    def hard_indices(self) -> np.ndarray:
        return np.argmax(self.z.data, axis=-1)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Per-epoch softmax temperature, strictly decreasing towards ``lam_min``."""

    lam0: float = 1.0
    lam_min: float = 0.03
    mode: str = "linear"
    epochs: int = 50

    def __post_init__(self):
        if not (self.lam0 > self.lam_min > 0):
            raise ValueError("need lam0 > lam_min > 0")
        if self.mode not in ("linear", "exponential"):
            raise ValueError(f"unknown decay mode {self.mode!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")

    def __call__(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.lam0
        frac = min(max(epoch, 0), self.epochs - 1) / (self.epochs - 1)
        if self.mode == "linear":
            return self.lam0 + (self.lam_min - self.lam0) * frac
        return self.lam0 * (self.lam_min / self.lam0) ** frac


def init_logits(num_edges: int, num_ops: int, dtype=np.float32) -> Tensor:
    """All-zero logits, i.e. a uniform distribution on every edge."""
    return Tensor(np.zeros((num_edges, num_ops), dtype=dtype), requires_grad=True)


def uniform(rng: np.random.Generator, shape) -> np.ndarray:
    return np.clip(rng.random(shape), U_MIN, U_MAX)


def gumbel(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("uniform draws must lie in the open interval (0, 1)")
    return -np.log(-np.log(u))


def sample(logits, lam: float, rng: np.random.Generator | None = None, u: np.ndarray | None = None) -> ArchSample:
    """Draw relaxed one-hot rows for logits of shape (..., K).

    Pass ``u`` to fix the uniform noise; otherwise it is drawn from ``rng``.
    """
    if lam <= 0:
        raise ValueError(f"temperature must be positive, got {lam}")
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    if u is None:
        if rng is None:
            raise ValueError("sample needs an rng or explicit uniform draws")
        u = uniform(rng, logits.shape)
    g = gumbel(u)
    z = F.softmax(F.mul(F.add(logits, Tensor(g.astype(logits.dtype))), 1.0 / lam))
    return ArchSample(z=z, g=g, u=np.asarray(u), lam=float(lam))


def hard_sample(logits: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Exact categorical draws via the Gumbel-max trick; returns op indices."""
    logits = np.asarray(logits, dtype=np.float64)
    shape = logits.shape if size is None else (size,) + logits.shape
    return np.argmax(logits + gumbel(uniform(rng, shape)), axis=-1)


def probs(logits) -> np.ndarray:
    a = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def edge_entropy(logits) -> float:
    """Shannon entropy in nats of softmax(logits) for one edge."""
    p = probs(logits)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def mean_entropy(*logit_matrices) -> float:
    rows = [row for m in logit_matrices for row in np.atleast_2d(m.data if isinstance(m, Tensor) else m)]
    return float(np.mean([edge_entropy(r) for r in rows]))


def log_prob(logits, k: int) -> float:
    a = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if not 0 <= k < a.shape[-1]:
        raise IndexError(f"op index {k} out of range for {a.shape[-1]} candidates")
    m = a.max()
    return float(a[k] - m - math.log(np.exp(a - m).sum()))


def log_prob_grad(logits, k) -> np.ndarray:
    """d log p(k) / d logits = onehot(k) - softmax(logits); ``k`` may be an array."""
    p = probs(logits)
    k = np.asarray(k)
    onehot = np.zeros(k.shape + p.shape[-1:], dtype=np.float64)
    np.put_along_axis(onehot, k[..., None], 1.0, axis=-1)
    return onehot - p


def concrete_log_density(logits, lam: float, z) -> np.ndarray:
    """Log density of the concrete distribution at simplex points ``z`` (..., K)."""
    a = np.asarray(logits, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = a.shape[-1]
    s = a - lam * np.log(z)
    m = s.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(s - m).sum(axis=-1, keepdims=True)))[..., 0]
    const = math.lgamma(n) + (n - 1) * math.log(lam)
    return const + (a - (lam + 1) * np.log(z)).sum(axis=-1) - n * lse


def concrete_score(logits, lam: float, z) -> np.ndarray:
    """Gradient of the concrete log density w.r.t. the logits."""
    a = np.asarray(logits, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    s = a - lam * np.log(z)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return 1.0 - a.shape[-1] * e / e.sum(axis=-1, keepdims=True)
