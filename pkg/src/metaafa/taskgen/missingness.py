from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset

VARIANCE_FLOOR = 1e-8


@dataclass
class MissingnessConfig:
    mechanism: str = "mcar"  # mcar | mar | none
    rate: float | None = None  # fixed MCAR rate; None draws one per feature
    max_missing_prob: float = 0.5
    hidden_dim: int = 8

    def __post_init__(self):
        if self.mechanism not in ("mcar", "mar", "none"):
            raise ValueError(f"unknown missingness mechanism {self.mechanism!r}")
        if not (0.0 <= self.max_missing_prob <= 0.5):
            raise ValueError("max_missing_prob must lie in [0, 0.5]")
        if self.rate is not None and not (0.0 <= self.rate <= self.max_missing_prob):
            raise ValueError("rate must lie in [0, max_missing_prob]")


@dataclass
class MarPropensity:
    """Random tanh network mapping baseline covariates to per-feature missing probabilities."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    max_missing_prob: float

    def __call__(self, X0: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X0, dtype=np.float64) - self.center) / self.scale
        logit = np.tanh(Z @ self.W1 + self.b1) @ self.W2 + self.b2
        return self.max_missing_prob / (1.0 + np.exp(-logit))


def sample_mar_propensity(X0: np.ndarray, n_features: int, cfg: MissingnessConfig, rng) -> MarPropensity:
    X0 = np.asarray(X0, dtype=np.float64)
    sd = X0.std(0)
    return MarPropensity(
        W1=rng.standard_normal((X0.shape[1], cfg.hidden_dim)),
        b1=rng.standard_normal(cfg.hidden_dim),
        W2=rng.standard_normal((cfg.hidden_dim, n_features)) * rng.uniform(0.5, 2.0, size=n_features),
        b2=rng.normal(0.0, 1.5, size=n_features),
        center=X0.mean(0),
        scale=np.where(sd > 1e-8, sd, 1.0),
        max_missing_prob=cfg.max_missing_prob,
    )


def apply_missingness(ds: Dataset, cfg: MissingnessConfig, rng: np.random.Generator) -> Dataset:
    """Drop non-baseline entries; X and y are left untouched."""
    free = ~ds.baseline_mask
    n_free = int(free.sum())
    if cfg.mechanism == "none" or n_free == 0:
        return replace(ds, R=ds.R.copy(), meta=dict(ds.meta))
    if cfg.mechanism == "mcar":
        rates = np.full(n_free, cfg.rate) if cfg.rate is not None else rng.uniform(0, cfg.max_missing_prob, n_free)
        p_miss = np.broadcast_to(rates, (ds.N, n_free))
    else:
        if not ds.baseline_mask.any():
            raise ValueError("MAR missingness needs baseline columns")
        prop = sample_mar_propensity(ds.X[:, ds.baseline_mask], n_free, cfg, rng)
        p_miss = prop(ds.X[:, ds.baseline_mask])
        rates = p_miss.mean(0)
    keep = rng.uniform(size=(ds.N, n_free)) >= p_miss
    R = ds.R.copy()
    R[:, free] &= keep
    meta = dict(ds.meta)
    meta["missingness"] = {"mechanism": cfg.mechanism, "rates": [float(r) for r in rates]}
    return replace(ds, R=R, meta=meta)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X):
        return (X - self.mean) / self.std

    def invert(self, Z):
        return Z * self.std + self.mean


def feature_stats(X: np.ndarray, R: np.ndarray) -> NormStats:
    """Per-feature mean / population std over observed entries.

    Columns with variance under the floor (or no observations) keep unit scale,
    so a constant column maps to zeros.
    """
    R = np.asarray(R, dtype=bool)
    cnt = R.sum(0)
    safe = np.where(R, X, 0.0)
    mean = np.where(cnt > 0, safe.sum(0) / np.maximum(cnt, 1), 0.0)
    var = np.where(R, (X - mean) ** 2, 0.0).sum(0) / np.maximum(cnt, 1)
    std = np.where(var > VARIANCE_FLOOR, np.sqrt(var), 1.0)
    return NormStats(mean=mean, std=std)


def normalize_per_sequence(ds: Dataset, rows=None) -> tuple[Dataset, NormStats]:
    """Standardize features with statistics from the observed entries of ``rows``.

    ``rows`` defaults to the whole task; the model pipeline passes the context
    rows so query values never leak into the statistics.
    """
    sel = slice(None) if rows is None else np.asarray(rows)
    stats = feature_stats(ds.X[sel], ds.R[sel])
    return replace(ds, X=stats.apply(ds.X), meta=dict(ds.meta)), stats
