"""Comparison search modes.

``darts_attention`` takes the softmax expectation at the input of every node
instead of sampling.  ``reinforce_constant`` treats the whole sampled child
as one action and broadcasts a single scalar reward to every edge.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import archdist as ad
from . import functional as F
from .tensor import Tensor

__all__ = [
    "SEARCH_MODES", "MovingAverageBaseline", "darts_masks", "darts_forward",
    "reinforce_constant_step", "expectation_gap", "relu_bias_example",
    "enumerate_expectation",
]

SEARCH_MODES = ("snas", "darts_attention", "reinforce_constant")


def darts_masks(alpha: dict, cell_types: Sequence[str]) -> list[Tensor]:
    """Softmax(logits) per cell, one shared tensor per cell type; no noise."""
    soft = {ct: F.softmax(a if isinstance(a, Tensor) else Tensor(np.asarray(a))) for ct, a in alpha.items()}
    return [soft[ct] for ct in cell_types]


def darts_forward(net, x, alpha: dict) -> Tensor:
    """Network logits with every edge replaced by its expected operation output."""
    return net(x, masks=darts_masks(alpha, net.spec.cell_types))


class MovingAverageBaseline:
    """Exponential moving average of past rewards."""

    def __init__(self, decay: float = 0.9):
        if not 0 <= decay < 1:
            raise ValueError("decay must lie in [0, 1)")
        self.decay = decay
        self.value: float | None = None

    def advantage(self, reward: float) -> float:
        """Reward minus the current baseline, then fold the reward in."""
        if self.value is None:
            self.value = reward
        adv = reward - self.value
        self.value = self.decay * self.value + (1 - self.decay) * reward
        return adv


def reinforce_constant_step(logits: np.ndarray, choices: np.ndarray, reward: float,
                            baseline: MovingAverageBaseline | None = None) -> np.ndarray:
    """Loss-gradient for the logits from one whole-architecture reward.

    ``choices`` holds the sampled op index per edge (and optionally a
    leading axis of cells sharing the logits).  The returned array is the
    gradient of ``-(R - b) log p(choices)``, ready for a descent step.
    """
    adv = reward if baseline is None else baseline.advantage(reward)
    choices = np.atleast_2d(np.asarray(choices))
    grad = np.zeros(np.shape(logits), dtype=np.float64)
    for row in choices:
        grad -= adv * ad.log_prob_grad(logits, row)
    return grad


# ----------------------------------------------------------------------------
# bias of the analytic expectation


def enumerate_expectation(probs: Sequence[np.ndarray], fn: Callable[[tuple[int, ...]], float]) -> float:
    """Exact E[fn(k)] over independent categorical edges by full enumeration."""
    total = 0.0
    for ks in itertools.product(*[range(len(p)) for p in probs]):
        w = float(np.prod([p[k] for p, k in zip(probs, ks)]))
        if w:
            total += w * fn(ks)
    return total


@dataclass
class GapResult:
    expected_loss: float  # E_Z[L(child)]
    loss_of_expectation: float  # L(mixture forward)

    @property
    def gap(self) -> float:
        return abs(self.expected_loss - self.loss_of_expectation)


def expectation_gap(ops: Sequence[Callable[[Tensor], Tensor]], x, loss: Callable[[Tensor], Tensor],
                    probs: np.ndarray) -> GapResult:
    """Compare averaging over sampled children with the attention mixture on one edge."""
    xt = Tensor(np.asarray(x, dtype=np.float64))
    outs = [op(xt) for op in ops]
    p = np.asarray(probs, dtype=np.float64)
    expected = sum(float(p[k]) * float(loss(outs[k]).data) for k in range(len(ops)))
    mixed = F.mix(Tensor(p), outs)
    return GapResult(expected, float(loss(mixed).data))


def relu_bias_example() -> GapResult:
    """relu(x) vs relu(-x) at x=1 with loss (y-1)^2 and uniform weights."""
    ops = [F.relu, lambda t: F.relu(F.neg(t))]

    def loss(y):
        d = F.sub(y, 1.0)
        return F.sum(F.mul(d, d))

    return expectation_gap(ops, np.array([1.0]), loss, np.array([0.5, 0.5]))
