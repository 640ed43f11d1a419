"""Joint single-level search: one loss, one backward pass, two optimisers.

Three search modes share the loop:

* ``snas`` samples concrete masks per cell and lets the loss gradient flow
  into both the operation weights and the logits.
* ``darts_attention`` replaces sampling with the softmax mixture.
* ``reinforce_constant`` trains weights on a hard sampled child and moves the
  logits with a whole-architecture accuracy reward.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from . import archdist as ad
from . import functional as F
from .baselines import MovingAverageBaseline, darts_masks, reinforce_constant_step
from .cell import CELL_TYPES, Genotype, Network, NetworkSpec, derive_genotype, onehot_masks
from .credit import edge_credit
from .data import Dataset, augment, batches
from .optim import SGD, Adam, clip_grad_norm, cosine_lr
from .resource import CostModel, ResourceConfig, expected_cost, mc_cost_grad
from .tensor import Tape, Tensor

__all__ = [
    "MODES", "METRICS_HEADER", "TrainConfig", "MetricsRow", "NumericalError",
    "StepResult", "Search", "SearchResult", "run_search", "evaluate", "accuracy",
]

MODES = ("snas", "darts_attention", "reinforce_constant")
METRICS_HEADER = "epoch,train_loss,search_val_acc,child_val_acc,mean_entropy,expected_cost,temperature,wall_s"


class NumericalError(FloatingPointError):
    def __init__(self, msg: str, dump: dict | None = None):
        super().__init__(msg)
        self.dump = dump or {}


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    arch_lr: float = 3e-4
    arch_beta1: float = 0.5
    arch_beta2: float = 0.999
    arch_weight_decay: float = 1e-3
    lam0: float = 1.0
    lam_min: float = 0.03
    lam_decay: str = "linear"
    grad_clip: float = 5.0
    seed: int = 0
    mode: str = "snas"
    val_fraction: float = 0.2
    augment: bool = False
    baseline_decay: float = 0.9
    eval_draws: int = 4  # sampled passes averaged into the stochastic search accuracy
    resource: ResourceConfig = field(default_factory=ResourceConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_draws < 1:
            raise ValueError("epochs, batch_size and eval_draws must be positive")
        if self.lr <= 0 or self.arch_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")

    def schedule(self) -> ad.TemperatureSchedule:
        return ad.TemperatureSchedule(self.lam0, self.lam_min, self.lam_decay, self.epochs)

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, ResourceConfig):
                out.update({"eta": v.eta, "cost_weights": list(v.weights), "cost_samples": v.samples})
            else:
                out[f.name] = v
        return out


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    search_val_acc: float
    child_val_acc: float
    mean_entropy: float
    expected_cost: float
    temperature: float
    wall_s: float

    def to_csv(self) -> str:
        return (f"{self.epoch},{self.train_loss:.6f},{self.search_val_acc:.6f},{self.child_val_acc:.6f},"
                f"{self.mean_entropy:.6f},{self.expected_cost:.6f},{self.temperature:.6f},{self.wall_s:.3f}")


@dataclass
class StepResult:
    loss: float
    theta_grads: dict[str, np.ndarray]
    alpha_grads: dict[str, np.ndarray]
    sweeps: int


@dataclass
class SearchResult:
    alpha: dict[str, np.ndarray]
    genotype: Genotype
    rows: list[MetricsRow]
    genotypes: list[Genotype]
    net: Network
    credits: list[tuple[int, int, int, int, float]] = field(default_factory=list)  # epoch, cell, i, j, R


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(net: Network, data: Dataset, batch_size: int = 64, genotype: Genotype | None = None,
             masks_fn: Callable[[], list] | None = None) -> float:
    """Accuracy over ``data`` in fixed order; batch statistics per batch.

    Pass either a genotype (child path) or ``masks_fn`` returning fresh
    per-cell masks for every batch.
    """
    correct = 0
    total = 0
    for x, y in batches(data, batch_size, rng=None, drop_last=False):
        masks = masks_fn() if masks_fn is not None else None
        logits = net(x, masks=masks, genotype=genotype if masks is None else None).data
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        total += len(y)
    return correct / max(total, 1)


class Search:
    """State of one search run: network weights, logits and optimisers."""

    def __init__(self, spec: NetworkSpec, config: TrainConfig, steps_per_epoch: int, dtype=np.float32,
                 init_state: dict | None = None):
        self.spec = spec
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(5)
        self.rng_init, self.rng_arch, self.rng_data, self.rng_cost, self.rng_eval = (
            np.random.default_rng(s) for s in seeds
        )
        self.net = Network(spec, self.rng_init, dtype=dtype)
        if init_state is not None:
            self.net.load_state_dict(init_state)
        g = spec.graph
        self.alpha = {ct: ad.init_logits(g.num_edges, g.num_ops, dtype=np.float64) for ct in CELL_TYPES}
        for ct, a in self.alpha.items():
            a.name = f"alpha.{ct}"
        self.theta_opt = SGD(self.net.parameters(), config.lr, config.momentum, config.weight_decay)
        self.arch_opt = Adam(list(self.alpha.values()), config.arch_lr, (config.arch_beta1, config.arch_beta2),
                             weight_decay=config.arch_weight_decay)
        self.costs = CostModel(spec, config.resource.weights)
        self.cost_table = self.costs.by_type()
        self.steps_per_epoch = max(1, steps_per_epoch)
        self.total_steps = self.steps_per_epoch * config.epochs
        self.step_count = 0
        self.baseline = MovingAverageBaseline(config.baseline_decay)
        self.last_reward: float | None = None
        self.schedule = config.schedule()

    # -- masks ---------------------------------------------------------------

    def sample_masks(self, lam: float, rng: np.random.Generator) -> list[Tensor]:
        """Fresh concrete sample for every cell; cells of a type share logits only."""
        return [ad.sample(self.alpha[ct], lam, rng).z for ct in self.spec.cell_types]

    def mixture_masks(self) -> list[Tensor]:
        return darts_masks(self.alpha, self.spec.cell_types)

    def hard_choices(self, rng: np.random.Generator) -> list[np.ndarray]:
        return [ad.hard_sample(self.alpha[ct].data, rng) for ct in self.spec.cell_types]

    def genotype(self) -> Genotype:
        return derive_genotype({ct: a.data for ct, a in self.alpha.items()}, self.spec.graph)

    def used_types(self) -> tuple[str, ...]:
        return tuple(ct for ct in CELL_TYPES if ct in self.spec.cell_types)

    # -- one step ------------------------------------------------------------

    def _cost_grads(self) -> dict[str, np.ndarray]:
        rc = self.config.resource
        return {ct: mc_cost_grad(self.alpha[ct].data, self.cost_table[ct], rc.samples, self.rng_cost)
                for ct in self.used_types()}

    def train_step(self, x: np.ndarray, y: np.ndarray, lam: float, val_batch=None) -> StepResult:
        cfg = self.config
        self.theta_opt.zero_grad()
        self.arch_opt.zero_grad()
        params = self.net.parameters()
        choices = None
        with Tape() as tape:
            if cfg.mode == "snas":
                masks = self.sample_masks(lam, self.rng_arch)
            elif cfg.mode == "darts_attention":
                masks = self.mixture_masks()
            else:
                choices = self.hard_choices(self.rng_arch)
                masks = [onehot_masks(k, self.spec.graph.num_ops, self.net.dtype) for k in choices]
            logits = self.net(x, masks=masks)
            loss = F.cross_entropy(logits, y)
        if not np.isfinite(loss.data):
            raise NumericalError(f"non-finite loss at step {self.step_count}",
                                 {"alpha." + ct: a.data for ct, a in self.alpha.items()})
        tape.backward(loss)
        if choices is not None:
            self._reinforce_grads(choices, val_batch)
        alpha_grads = {ct: (np.zeros_like(a.data) if a.grad is None else a.grad.copy())
                       for ct, a in self.alpha.items()}
        if cfg.resource.eta > 0:
            for ct, g in self._cost_grads().items():
                a = self.alpha[ct]
                a.grad = (np.zeros_like(a.data) if a.grad is None else a.grad) + cfg.resource.eta * g
        theta_grads = {n: p.grad.copy() for n, p in self.net.params.items() if p.grad is not None}
        for p in params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient for {p.name} at step {self.step_count}")
        if cfg.grad_clip > 0:
            clip_grad_norm(params, cfg.grad_clip)
        self.theta_opt.lr = cosine_lr(cfg.lr, self.step_count, self.total_steps, cfg.lr_min)
        self.theta_opt.step()
        self.arch_opt.step()
        self.step_count += 1
        return StepResult(float(loss.data), theta_grads, alpha_grads, tape.sweeps)

    def _reinforce_grads(self, choices: list[np.ndarray], val_batch) -> None:
        """Whole-architecture reward broadcast to every edge of every cell."""
        if val_batch is None:
            raise ValueError("reinforce_constant needs a validation batch for its reward")
        vx, vy = val_batch
        masks = [onehot_masks(k, self.spec.graph.num_ops, self.net.dtype) for k in choices]
        reward = accuracy(self.net(vx, masks=masks).data, vy)
        self.last_reward = reward
        grads = {ct: np.zeros_like(a.data) for ct, a in self.alpha.items()}
        adv = self.baseline.advantage(reward)
        for ct, k in zip(self.spec.cell_types, choices):
            grads[ct] += reinforce_constant_step(self.alpha[ct].data, k, adv)
        for ct, a in self.alpha.items():
            a.grad = grads[ct]

    # -- epoch-level metrics -------------------------------------------------

    def search_accuracy(self, data: Dataset, lam: float, epoch: int) -> float:
        mode = self.config.mode
        rng = np.random.default_rng([self.config.seed, epoch, 7])
        if mode == "darts_attention":
            return evaluate(self.net, data, self.config.batch_size, masks_fn=self.mixture_masks)
        if mode == "snas":
            def fn():
                return self.sample_masks(lam, rng)
        else:
            def fn():
                return [onehot_masks(k, self.spec.graph.num_ops, self.net.dtype) for k in self.hard_choices(rng)]
        # each batch sees one draw, so average a few passes to estimate the expectation over architectures
        draws = self.config.eval_draws
        return float(np.mean([evaluate(self.net, data, self.config.batch_size, masks_fn=fn) for _ in range(draws)]))

    def credit_rows(self, data: Dataset, lam: float, epoch: int) -> list[tuple[int, int, int, int, float]]:
        """Per-edge credits on the first validation batch under this mode's masks.

        Uses its own random stream so logging never shifts the training draws.
        """
        x, y = next(iter(batches(data, self.config.batch_size, rng=None, drop_last=False)))
        rng = np.random.default_rng([self.config.seed, epoch, 11])
        mode = self.config.mode
        if mode == "darts_attention":
            masks = self.mixture_masks()
        elif mode == "snas":
            masks = self.sample_masks(lam, rng)
        else:
            masks = [onehot_masks(k, self.spec.graph.num_ops, self.net.dtype) for k in self.hard_choices(rng)]
        masks = [Tensor(m.data) for m in masks]  # no gradient into the logits here
        trace: list = []
        with Tape() as tape:
            loss = F.cross_entropy(self.net(x, masks=masks, trace=trace), y)
        tape.backward(loss)
        for p in self.net.parameters():
            p.grad = None
        rep = edge_credit(trace)
        return [(epoch + 1, c, i, j, r) for c, i, j, r in rep.as_rows()]

    def child_accuracy(self, data: Dataset) -> float:
        return evaluate(self.net, data, self.config.batch_size, genotype=self.genotype())

    def mean_entropy(self) -> float:
        return ad.mean_entropy(*[self.alpha[ct] for ct in self.used_types()])

    def expected_cost(self) -> float:
        return expected_cost({ct: self.alpha[ct].data for ct in self.used_types()},
                             {ct: self.cost_table[ct] for ct in self.used_types()})

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"theta.{k}": v for k, v in self.net.state_dict().items()}
        out.update({f"alpha.{ct}": a.data.copy() for ct, a in self.alpha.items()})
        return out


def _cycle(data: Dataset, batch_size: int):
    while True:
        yielded = False
        for b in batches(data, batch_size, rng=None):
            yielded = True
            yield b
        if not yielded:
            raise ValueError("validation split smaller than one batch")


def run_search(spec: NetworkSpec, config: TrainConfig, train: Dataset, val: Dataset,
               on_epoch: Callable[[MetricsRow, Search], None] | None = None, dtype=np.float32,
               init_state: dict | None = None) -> SearchResult:
    """Run the full search loop and return logits, genotype and metrics.

    ``init_state`` optionally replaces the random weight initialisation, e.g.
    with the supernet weights of a planted teacher.
    """
    steps = len(train) // config.batch_size
    if steps < 1:
        raise ValueError("training split smaller than one batch")
    search = Search(spec, config, steps, dtype=dtype, init_state=init_state)
    val_iter = _cycle(val, config.batch_size) if config.mode == "reinforce_constant" else None
    rows: list[MetricsRow] = []
    genotypes: list[Genotype] = []
    credits: list[tuple[int, int, int, int, float]] = []
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        lam = search.schedule(epoch)
        losses = []
        for x, y in batches(train, config.batch_size, search.rng_data):
            if config.augment:
                x = augment(x, search.rng_data)
            vb = next(val_iter) if val_iter is not None else None
            losses.append(search.train_step(x, y, lam, vb).loss)
        row = MetricsRow(
            epoch=epoch + 1,
            train_loss=float(np.mean(losses)),
            search_val_acc=search.search_accuracy(val, lam, epoch),
            child_val_acc=search.child_accuracy(val),
            mean_entropy=search.mean_entropy(),
            expected_cost=search.expected_cost(),
            temperature=lam,
            wall_s=time.perf_counter() - t0,
        )
        if not math.isfinite(row.train_loss):
            raise NumericalError(f"non-finite mean loss in epoch {epoch + 1}")
        rows.append(row)
        genotypes.append(search.genotype())
        credits.extend(search.credit_rows(val, lam, epoch))
        if on_epoch is not None:
            on_epoch(row, search)
    return SearchResult({ct: a.data.copy() for ct, a in search.alpha.items()}, search.genotype(), rows,
                        genotypes, search.net, credits)


def train_child(spec: NetworkSpec, genotype: Genotype, config: TrainConfig, train: Dataset, val: Dataset,
                dtype=np.float32) -> tuple[Network, list[float]]:
    """Train weights of a fixed child graph; returns the net and per-epoch val accuracy."""
    steps = max(1, len(train) // config.batch_size)
    rng_init, rng_data = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    net = Network(spec, rng_init, dtype=dtype)
    params = net.parameters()
    opt = SGD(params, config.lr, config.momentum, config.weight_decay)
    total, step, accs = steps * config.epochs, 0, []
    for _ in range(config.epochs):
        for x, y in batches(train, config.batch_size, rng_data):
            if config.augment:
                x = augment(x, rng_data)
            opt.zero_grad()
            with Tape() as tape:
                loss = F.cross_entropy(net(x, genotype=genotype), y)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at step {step}")
            tape.backward(loss)
            if config.grad_clip > 0:
                clip_grad_norm(params, config.grad_clip)
            opt.lr = cosine_lr(config.lr, step, total, config.lr_min)
            opt.step()
            step += 1
        accs.append(evaluate(net, val, config.batch_size, genotype=genotype))
    return net, accs
