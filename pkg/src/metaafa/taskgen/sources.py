"""Task samplers: a prior config plus missingness, drawing one Dataset per call."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import CLASSIFICATION, REGRESSION, Dataset
from .discrete import DiscreteWorldSpec, sample_copy_world, sample_discrete_world
from .missingness import MissingnessConfig, apply_missingness
from .priors import BNNPriorConfig, GPPriorConfig, sample_bnn_task, sample_gp_task


@dataclass
class GPTaskSource:
    gp: GPPriorConfig
    missingness: MissingnessConfig
    N: int
    kind: str = REGRESSION
    n_classes: int = 1

    @property
    def d(self) -> int:
        return self.gp.d

    def sample(self, rng: np.random.Generator) -> Dataset:
        return apply_missingness(sample_gp_task(self.gp, self.N, rng), self.missingness, rng)


@dataclass
class BNNTaskSource:
    bnn: BNNPriorConfig
    missingness: MissingnessConfig
    N: int
    pool: np.ndarray
    kind: str = CLASSIFICATION

    @property
    def d(self) -> int:
        return self.pool.shape[1]

    @property
    def n_classes(self) -> int:
        return self.bnn.n_classes

    def sample(self, rng: np.random.Generator) -> Dataset:
        return apply_missingness(sample_bnn_task(self.bnn, self.pool, self.N, rng), self.missingness, rng)


@dataclass
class CopyWorldSource:
    """Binary tasks from random copy worlds: one feature equals Y, the others are noisy copies."""

    d: int
    N: int
    copy_index: int | None = None
    flip_range: tuple[float, float] = (0.25, 0.5)
    observe_prob_range: tuple[float, float] = (0.5, 1.0)
    kind: str = CLASSIFICATION
    n_classes: int = 2

    def sample(self, rng: np.random.Generator) -> Dataset:
        world, j = sample_copy_world(self.d, rng, self.copy_index, self.flip_range, self.observe_prob_range)
        ds = world.sample(self.N, rng)
        ds.meta["copy_feature"] = j
        return ds


@dataclass
class DiscreteWorldSource:
    spec: DiscreteWorldSpec = field(default_factory=DiscreteWorldSpec)
    N: int = 64
    kind: str = CLASSIFICATION

    @property
    def d(self) -> int:
        return len(self.spec.feature_supports) + (1 if self.spec.baseline_support > 1 else 0)

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def sample(self, rng: np.random.Generator) -> Dataset:
        return sample_discrete_world(self.spec, rng).sample(self.N, rng)
