"""Small discrete worlds with an explicit joint table, for brute-force oracles.

Variable indexing: 0 is the baseline covariate X0 (support 1 when absent),
1..d are the acquirable features, and the last axis of ``pmf`` is Y.
Each feature j has a missingness propensity p(R_j = 1 | parents).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import CLASSIFICATION, Dataset

MAX_TABLE_SIZE = 10**6


@dataclass
class Propensity:
    parents: tuple[int, ...]
    table: np.ndarray  # p(R_j = 1 | parents), shape = supports of parents

    def __post_init__(self):
        self.parents = tuple(int(p) for p in self.parents)
        self.table = np.asarray(self.table, dtype=np.float64)


@dataclass
class DiscreteWorld:
    supports: tuple[int, ...]
    pmf: np.ndarray
    propensities: list[Propensity] = field(default_factory=list)

    def __post_init__(self):
        self.supports = tuple(int(s) for s in self.supports)
        size = int(np.prod(self.supports))
        if size > MAX_TABLE_SIZE:
            raise ValueError(f"joint table has {size} entries (limit {MAX_TABLE_SIZE})")
        self.pmf = np.asarray(self.pmf, dtype=np.float64).reshape(self.supports)
        if abs(self.pmf.sum() - 1.0) > 1e-12 or (self.pmf < 0).any():
            raise ValueError("pmf must be non-negative and sum to 1")
        if not self.propensities:
            self.propensities = [Propensity((), np.array(1.0)) for _ in range(self.d)]
        if len(self.propensities) != self.d:
            raise ValueError("one propensity per feature required")
        for j, prop in enumerate(self.propensities, start=1):
            expect = tuple(self.supports[p] for p in prop.parents)
            if prop.table.shape != expect:
                raise ValueError(f"propensity table for feature {j} has shape {prop.table.shape}, expected {expect}")
            if (prop.table < 0).any() or (prop.table > 1).any():
                raise ValueError("propensities must lie in [0, 1]")

    @property
    def d(self) -> int:
        return len(self.supports) - 2

    @property
    def y_axis(self) -> int:
        return len(self.supports) - 1

    @property
    def n_classes(self) -> int:
        return self.supports[-1]

    @property
    def has_baseline(self) -> bool:
        return self.supports[0] > 1

    def propensity_grid(self, j: int) -> np.ndarray:
        """p(R_j = 1 | ...) broadcast against the full joint table."""
        prop = self.propensities[j - 1]
        shape = [1] * len(self.supports)
        for p in prop.parents:
            shape[p] = self.supports[p]
        # parents are stored in increasing axis order after the transpose below
        order = np.argsort(prop.parents)
        table = np.transpose(prop.table, order) if prop.table.ndim > 1 else prop.table
        return table.reshape(shape)

    def joint_observed(self, j: int) -> np.ndarray:
        """Table of p(x, y, R_j = 1)."""
        return self.pmf * self.propensity_grid(j)

    def is_mar(self, j: int, conditioning: set[int] | None = None) -> bool:
        """True when feature j's missingness parents exclude j and lie in ``conditioning``."""
        parents = set(self.propensities[j - 1].parents)
        if j in parents or self.y_axis in parents:
            return False
        return conditioning is None or parents <= set(conditioning)

    def mar_violation(self, j: int) -> float:
        """max |p(R_j=1 | x0, x_j) - p(R_j=1 | x0)| computed from the tables."""
        keep = (0, j)
        other = tuple(a for a in range(len(self.supports)) if a not in keep)
        pj = self.pmf.sum(axis=other)
        oj = self.joint_observed(j).sum(axis=other)
        cond_xj = np.divide(oj, pj, out=np.zeros_like(oj), where=pj > 0)
        p0 = pj.sum(1, keepdims=True)
        cond_x0 = np.divide(oj.sum(1, keepdims=True), p0, out=np.zeros_like(p0), where=p0 > 0)
        return float(np.max(np.abs(np.where(pj > 0, cond_xj - cond_x0, 0.0))))

    # -- datasets -----------------------------------------------------------

    def feature_columns(self) -> list[int]:
        """World variable index behind each Dataset column."""
        return ([0] if self.has_baseline else []) + list(range(1, self.d + 1))

    def sample(self, N: int, rng: np.random.Generator, with_meta: bool = True) -> Dataset:
        flat = rng.choice(self.pmf.size, size=N, p=self.pmf.reshape(-1))
        vals = np.stack(np.unravel_index(flat, self.supports), axis=1)
        cols = self.feature_columns()
        X = vals[:, cols].astype(np.float64)
        R = np.ones_like(X, dtype=bool)
        u = rng.uniform(size=(N, self.d))
        for j in range(1, self.d + 1):
            prop = self.propensities[j - 1]
            p_obs = prop.table[tuple(vals[:, p] for p in prop.parents)] if prop.parents else np.full(N, float(prop.table))
            R[:, cols.index(j)] = u[:, j - 1] < p_obs
        baseline = np.zeros(len(cols), dtype=bool)
        if self.has_baseline:
            baseline[0] = True
        y = vals[:, -1]
        p_true = self.conditional_y(vals[:, :-1])
        meta = {"prior": "discrete"}
        if with_meta:
            meta["world"] = self.to_dict()
        return Dataset(X=X, R=R, y=y, kind=CLASSIFICATION, n_classes=self.n_classes,
                       baseline_mask=baseline, p_true=p_true, meta=meta)

    def conditional_y(self, xvals: np.ndarray) -> np.ndarray:
        """p(y | all features) for rows of full feature assignments (X0..Xd)."""
        tab = self.pmf / np.maximum(self.pmf.sum(-1, keepdims=True), 1e-300)
        return tab[tuple(xvals[:, a] for a in range(xvals.shape[1]))]

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "supports": list(self.supports),
            "pmf": [float(v) for v in self.pmf.reshape(-1)],
            "propensities": [
                {"parents": list(p.parents), "table": [float(v) for v in p.table.reshape(-1)]}
                for p in self.propensities
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DiscreteWorld":
        supports = tuple(data["supports"])
        props = [
            Propensity(tuple(p["parents"]), np.array(p["table"]).reshape([supports[a] for a in p["parents"]]))
            for p in data["propensities"]
        ]
        pmf = np.array(data["pmf"], dtype=np.float64)
        return cls(supports, pmf / pmf.sum(), props)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DiscreteWorld":
        return cls.from_dict(json.loads(text))


@dataclass
class DiscreteWorldSpec:
    feature_supports: tuple[int, ...] = (2, 2, 2)
    n_classes: int = 2
    baseline_support: int = 1
    mechanism: str = "mar"  # mar | mnar | none
    concentration: float = 1.0
    observe_prob_range: tuple[float, float] = (0.2, 1.0)


def sample_discrete_world(spec: DiscreteWorldSpec, rng: np.random.Generator) -> DiscreteWorld:
    supports = (spec.baseline_support, *spec.feature_supports, spec.n_classes)
    size = int(np.prod(supports))
    if size > MAX_TABLE_SIZE:
        raise ValueError(f"joint table has {size} entries (limit {MAX_TABLE_SIZE})")
    pmf = rng.dirichlet(np.full(size, spec.concentration))
    pmf = pmf / pmf.sum()
    lo, hi = spec.observe_prob_range
    props = []
    for j in range(1, len(spec.feature_supports) + 1):
        if spec.mechanism == "none":
            props.append(Propensity((), np.array(1.0)))
        elif spec.mechanism == "mar":
            props.append(Propensity((0,), rng.uniform(lo, hi, size=supports[0])))
        elif spec.mechanism == "mnar":
            props.append(Propensity((0, j), rng.uniform(lo, hi, size=(supports[0], supports[j]))))
        else:
            raise ValueError(f"unknown mechanism {spec.mechanism!r}")
    return DiscreteWorld(supports, pmf.reshape(supports), props)


def channel_world(p_y, channels, propensities=None) -> DiscreteWorld:
    """World with Y ~ p_y and features conditionally independent given Y.

    ``channels[j]`` is an (s_j x n_classes) table of p(x_j | y).
    """
    p_y = np.asarray(p_y, dtype=np.float64)
    channels = [np.asarray(c, dtype=np.float64) for c in channels]
    supports = (1, *[c.shape[0] for c in channels], p_y.size)
    pmf = p_y.reshape([1] * (len(channels) + 1) + [-1]).copy()
    for j, c in enumerate(channels, start=1):
        shape = [1] * len(supports)
        shape[j], shape[-1] = c.shape
        pmf = pmf * c.reshape(shape)
    pmf = np.broadcast_to(pmf, supports).copy()
    return DiscreteWorld(supports, pmf / pmf.sum(), propensities or [])


def copy_channel(n_classes: int = 2) -> np.ndarray:
    return np.eye(n_classes)


def symmetric_channel(flip: float) -> np.ndarray:
    return np.array([[1.0 - flip, flip], [flip, 1.0 - flip]])


def independent_channel(marginal, n_classes: int = 2) -> np.ndarray:
    m = np.asarray(marginal, dtype=np.float64)
    return np.repeat((m / m.sum())[:, None], n_classes, axis=1)


def sample_copy_world(d: int, rng: np.random.Generator, copy_index: int | None = None,
                      flip_range=(0.25, 0.5), observe_prob_range=(0.5, 1.0)) -> tuple[DiscreteWorld, int]:
    """Binary-label world where one feature copies Y and the rest are noisy channels.

    Returns the world and the 1-based index of the copy feature.
    """
    j_copy = int(rng.integers(1, d + 1)) if copy_index is None else copy_index
    channels = [
        copy_channel() if j == j_copy else symmetric_channel(rng.uniform(*flip_range))
        for j in range(1, d + 1)
    ]
    p1 = rng.uniform(0.3, 0.7)
    props = [Propensity((), np.array(rng.uniform(*observe_prob_range))) for _ in range(d)]
    return channel_world([1.0 - p1, p1], channels, props), j_copy


def enumerate_assignments(world: DiscreteWorld, variables) -> list[dict[int, int]]:
    variables = list(variables)
    ranges = [range(world.supports[v]) for v in variables]
    return [dict(zip(variables, vals)) for vals in itertools.product(*ranges)]
