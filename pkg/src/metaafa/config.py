"""Experiment configuration: one JSON file, dotted ``key=value`` overrides and ``AFA_SEED``."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .baselines import MLPConfig
from .seqmodel import ModelConfig
from .taskgen.dataset import CLASSIFICATION
from .taskgen.discrete import DiscreteWorldSpec
from .taskgen.missingness import MissingnessConfig
from .taskgen.priors import BNNPriorConfig, GPPriorConfig
from .taskgen.sources import BNNTaskSource, CopyWorldSource, DiscreteWorldSource, GPTaskSource
from .trainer import TrainConfig

PRIOR_KINDS = ("gp", "bnn", "copy", "discrete")


class ConfigError(ValueError):
    pass


@dataclass
class PriorSpec:
    kind: str = "gp"
    N: int = 128
    gp: dict = field(default_factory=dict)
    bnn: dict = field(default_factory=dict)
    bnn_pool_size: int = 2000
    copy_d: int = 4
    copy_index: int | None = None
    discrete: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ConfigError(f"unknown prior kind {self.kind!r}; expected one of {PRIOR_KINDS}")
        if self.N < 2:
            raise ConfigError("N must be >= 2")


@dataclass
class EvalSpec:
    n_tasks: int = 200
    n_train_tasks: int = 8
    context_size: int | None = None  # default N // 2
    k: int = 3
    query_fully_observed: bool = True
    metrics: list = field(default_factory=lambda: ["nll", "mse", "brier", "kl", "auroc", "coverage"])
    context_grid: list = field(default_factory=lambda: [25, 50, 100, 250, 500])
    missing_grid: list = field(default_factory=lambda: [0.0, 0.1, 0.25, 0.5])


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    deterministic: bool = True
    prior: PriorSpec = field(default_factory=PriorSpec)
    missingness: MissingnessConfig = field(default_factory=MissingnessConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    mlp: MLPConfig = field(default_factory=MLPConfig)

    def __post_init__(self):
        if self.eval.k > self.d:
            raise ConfigError(f"budget k={self.eval.k} exceeds d={self.d}")

    @property
    def d(self) -> int:
        p = self.prior
        if p.kind == "gp":
            return GPPriorConfig(**_tuples(p.gp)).d
        if p.kind == "copy":
            return p.copy_d
        if p.kind == "discrete":
            return DiscreteWorldSource(DiscreteWorldSpec(**_tuples(p.discrete))).d
        return int(p.bnn.get("d", 6))

    @property
    def context_size(self) -> int:
        return self.eval.context_size or self.prior.N // 2

    def model_config(self) -> ModelConfig:
        src = self.source()
        kind = src.kind
        c = src.n_classes if kind == CLASSIFICATION else 1
        return ModelConfig(d=src.d, c=c, kind=kind, **self.model)

    def source(self):
        p = self.prior
        if p.kind == "gp":
            return GPTaskSource(GPPriorConfig(**_tuples(p.gp)), self.missingness, p.N)
        if p.kind == "copy":
            return CopyWorldSource(d=p.copy_d, N=p.N, copy_index=p.copy_index)
        if p.kind == "discrete":
            return DiscreteWorldSource(DiscreteWorldSpec(**_tuples(p.discrete)), p.N)
        bnn = dict(p.bnn)
        d = int(bnn.pop("d", 6))
        pool = np.random.default_rng([self.seed, 99]).standard_normal((p.bnn_pool_size, d))
        return BNNTaskSource(BNNPriorConfig(**_tuples(bnn)), self.missingness, p.N, pool)

    def to_dict(self) -> dict:
        return asdict(self)


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _build(cls, data):
    if not is_dataclass(cls) or not isinstance(data, dict):
        return data
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = _NESTED.get((cls, name))
        kwargs[name] = _build(ftype, value) if ftype else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


_NESTED = {
    (ExperimentConfig, "prior"): PriorSpec,
    (ExperimentConfig, "missingness"): MissingnessConfig,
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "eval"): EvalSpec,
    (ExperimentConfig, "mlp"): MLPConfig,
}


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values parse as JSON, falling back to strings."""
    data = json.loads(json.dumps(data))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parse_value(raw)
    return data


def load_config(path: str | Path | None, overrides: list[str] | None = None, env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    data = {} if path is None else json.loads(Path(path).read_text())
    data = apply_overrides(data, overrides or [])
    if env.get("AFA_SEED"):
        try:
            data["seed"] = int(env["AFA_SEED"])
        except ValueError as e:
            raise ConfigError(f"AFA_SEED must be an integer, got {env['AFA_SEED']!r}") from e
    cfg = _build(ExperimentConfig, data)
    cfg.train.seed = cfg.seed
    return cfg


def config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=1)

