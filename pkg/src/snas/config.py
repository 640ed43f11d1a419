"""Flat ``key = value`` run configuration.

Sources are layered: built-in defaults, then the config file, then
environment variables named ``SNAS_<KEY>``, then command-line overrides.
Unknown keys are an error at every layer.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .cell import Genotype, NetworkSpec, ParentGraph
from .ops import FULL_OPS, OPS
from .resource import PRESETS, ResourceConfig
from .trainer import MODES, TrainConfig

__all__ = ["ConfigError", "RunConfig", "SCHEMA", "ENV_PREFIX", "parse_text", "load_config"]

ENV_PREFIX = "SNAS_"


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _names(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in _names(s))


# key -> (parser, default)
SCHEMA: dict[str, tuple[Any, Any]] = {
    # search space
    "num_cells": (int, 3),
    "num_intermediate": (int, 2),
    "channels": (int, 16),
    "image_size": (int, 8),
    "num_classes": (int, 4),
    "ops": (_names, FULL_OPS),
    # optimisation
    "epochs": (int, 50),
    "batch_size": (int, 64),
    "lr": (float, 0.025),
    "lr_min": (float, 0.0),
    "momentum": (float, 0.9),
    "weight_decay": (float, 3e-4),
    "arch_lr": (float, 3e-4),
    "arch_beta1": (float, 0.5),
    "arch_beta2": (float, 0.999),
    "arch_weight_decay": (float, 1e-3),
    "lam0": (float, 1.0),
    "lam_min": (float, 0.03),
    "lam_decay": (str, "linear"),
    "grad_clip": (float, 5.0),
    "seed": (int, 0),
    "mode": (str, "snas"),
    "val_fraction": (float, 0.2),
    "augment": (_bool, False),
    "baseline_decay": (float, 0.9),
    "eval_draws": (int, 4),
    "dtype": (str, "float32"),
    # resource penalty
    "constraint": (str, "none"),
    "eta": (float, -1.0),  # negative: take the value of the named constraint preset
    "cost_weights": (_floats, (1.0, 1.0, 1.0)),
    "cost_samples": (int, 16),
    # data
    "dataset": (str, "planted"),
    "data_dir": (str, ""),
    "take": (int, 0),
    "resize": (int, 8),
    "planted_normal": (_names, ()),
    "planted_reduce": (_names, ()),
    "planted_seed": (int, 1000),
    "planted_n": (int, 1280),
    "planted_latent": (int, 4),
    "planted_keep": (float, 0.3),
    "planted_noise": (float, 0.1),
    "planted_margin": (float, 4.0),
    "inherit_teacher": (_bool, True),
    # output
    "out_dir": (str, "runs/search"),
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw string values from ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: d for k, (_, d) in SCHEMA.items()})

    def update(self, raw: Mapping[str, str], source: str) -> None:
        for key, value in raw.items():
            if key not in SCHEMA:
                raise ConfigError(f"{source}: unknown key {key!r}")
            parser = SCHEMA[key][0]
            try:
                self.values[key] = parser(value) if isinstance(value, str) else value
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from None

    def validate(self) -> None:
        v = self.values
        if v["mode"] not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {v['mode']!r}")
        if v["constraint"] not in PRESETS:
            raise ConfigError(f"constraint must be one of {sorted(PRESETS)}, got {v['constraint']!r}")
        unknown = [o for o in v["ops"] if o not in OPS]
        if unknown:
            raise ConfigError(f"unknown operations {unknown}")
        if v["dataset"] not in ("planted", "cifar"):
            raise ConfigError(f"dataset must be 'planted' or 'cifar', got {v['dataset']!r}")
        if v["dtype"] not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if len(v["cost_weights"]) != 3:
            raise ConfigError("cost_weights needs three values (params, flops, mac)")
        if v["dataset"] == "cifar" and not v["data_dir"]:
            raise ConfigError("dataset = cifar needs data_dir")
        try:
            self.network_spec()
            self.train_config()
            if v["dataset"] == "planted":
                self.planted_genotype()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- derived objects -----------------------------------------------------

    def graph(self) -> ParentGraph:
        return ParentGraph(self.num_intermediate, tuple(self.ops))

    def network_spec(self) -> NetworkSpec:
        in_ch = 3
        return NetworkSpec(self.graph(), self.num_cells, self.channels, in_ch,
                           10 if self.dataset == "cifar" else self.num_classes,
                           self.resize if self.dataset == "cifar" else self.image_size)

    def resource(self) -> ResourceConfig:
        eta = self.eta if self.eta >= 0 else PRESETS[self.constraint]
        return ResourceConfig(eta=eta, weights=tuple(self.cost_weights), preset=self.constraint,
                              samples=self.cost_samples)

    def train_config(self) -> TrainConfig:
        v = self.values
        keys = [k for k in TrainConfig.__dataclass_fields__ if k != "resource"]
        return TrainConfig(**{k: v[k] for k in keys}, resource=self.resource())

    def planted_genotype(self) -> Genotype:
        g = self.graph()
        default = tuple(g.ops[0] for _ in g.edges)
        normal = tuple(self.planted_normal) or default
        reduce = tuple(self.planted_reduce) or normal
        for name, ops in (("planted_normal", normal), ("planted_reduce", reduce)):
            if len(ops) != g.num_edges:
                raise ValueError(f"{name} needs {g.num_edges} ops, got {len(ops)}")
            bad = [o for o in ops if o not in g.ops]
            if bad:
                raise ValueError(f"{name}: {bad} not in the candidate list")
        return Genotype(g.edges, normal, reduce)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in SCHEMA)


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, str] | None = None,
                env: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults < file < ``SNAS_*`` environment < explicit overrides."""
    cfg = RunConfig.defaults()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from None
        cfg.update(parse_text(text, str(p)), str(p))
    env = os.environ if env is None else env
    from_env = {}
    for name, value in env.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key not in SCHEMA:
                raise ConfigError(f"environment: unknown key {key!r} (from {name})")
            from_env[key] = value
    cfg.update(from_env, "environment")
    cfg.update(dict(overrides or {}), "command line")
    cfg.validate()
    return cfg
