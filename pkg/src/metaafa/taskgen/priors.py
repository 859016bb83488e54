"""Synthetic task priors: GP regression tasks and BNN-labelled classification tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import CLASSIFICATION, REGRESSION, Dataset

NON_INFORMATIVE_LENGTHSCALE = 1e6
JITTER_START = 1e-10
JITTER_MAX = 1e-4


class CholeskyError(np.linalg.LinAlgError):
    pass


class BisectionError(RuntimeError):
    pass


@dataclass
class GPPriorConfig:
    d: int = 10
    kernel: str = "rbf"
    lengthscale_range: tuple[float, float] = (0.1, 5.0)
    outputscale_range: tuple[float, float] = (0.5, 2.0)
    noise_std: float = 2e-2
    informative_range: tuple[int, int] | None = None
    n_baseline: int = 0

    def __post_init__(self):
        lo, hi = self.informative_range or (1, self.d)
        self.informative_range = (int(lo), int(hi))
        if not (0 < lo <= hi <= self.d):
            raise ValueError("informative_range must satisfy 0 < min <= max <= d")
        for a, b in (self.lengthscale_range, self.outputscale_range):
            if not (0 < a <= b):
                raise ValueError("ranges must be positive and ordered")
        if self.kernel not in ("rbf", "matern"):
            raise ValueError(f"unknown kernel {self.kernel!r}")


def rbf_kernel(A, B, lengthscales, outputscale):
    A = np.asarray(A, dtype=np.float64) / lengthscales
    B = np.asarray(B, dtype=np.float64) / lengthscales
    sq = np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2.0 * A @ B.T
    return outputscale * np.exp(-0.5 * np.maximum(sq, 0.0))


def matern52_kernel(A, B, lengthscales, outputscale):
    A = np.asarray(A, dtype=np.float64) / lengthscales
    B = np.asarray(B, dtype=np.float64) / lengthscales
    sq = np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2.0 * A @ B.T
    r = np.sqrt(np.maximum(sq, 0.0))
    s5 = np.sqrt(5.0) * r
    return outputscale * (1.0 + s5 + 5.0 * r**2 / 3.0) * np.exp(-s5)


def kernel_matrix(kind, A, B, lengthscales, outputscale):
    if kind == "rbf":
        return rbf_kernel(A, B, lengthscales, outputscale)
    if kind == "matern":
        return matern52_kernel(A, B, lengthscales, outputscale)
    raise ValueError(f"unknown kernel {kind!r}")


def cholesky_with_jitter(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky factor of K, adding diagonal jitter 1e-10, 1e-9, ... 1e-4 on failure."""
    jitter = 0.0
    eye = np.eye(K.shape[0])
    while True:
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise CholeskyError("Cholesky failed after jitter escalation to 1e-4") from None


def sample_gp_hyperparameters(cfg: GPPriorConfig, rng: np.random.Generator) -> dict:
    lo, hi = cfg.informative_range
    n_inf = int(rng.integers(lo, hi + 1))
    informative = np.sort(rng.choice(cfg.d, size=n_inf, replace=False))
    ls = rng.uniform(*cfg.lengthscale_range, size=cfg.d)
    keep = np.zeros(cfg.d, dtype=bool)
    keep[informative] = True
    ls[~keep] = NON_INFORMATIVE_LENGTHSCALE
    return {
        "prior": "gp",
        "kernel": cfg.kernel,
        "lengthscales": ls.tolist(),
        "outputscale": float(rng.uniform(*cfg.outputscale_range)),
        "noise_std": float(cfg.noise_std),
        "informative": informative.tolist(),
    }


def sample_gp_task(cfg: GPPriorConfig, N: int, rng: np.random.Generator) -> Dataset:
    if N < 2:
        raise ValueError("N must be >= 2")
    hp = sample_gp_hyperparameters(cfg, rng)
    X = rng.standard_normal((N, cfg.d))
    K = kernel_matrix(hp["kernel"], X, X, np.asarray(hp["lengthscales"]), hp["outputscale"])
    K[np.diag_indices(N)] += hp["noise_std"] ** 2
    L, jitter = cholesky_with_jitter(K)
    y = L @ rng.standard_normal(N)
    hp["jitter"] = jitter
    baseline = np.zeros(cfg.d, dtype=bool)
    baseline[: cfg.n_baseline] = True
    return Dataset(X=X, R=np.ones_like(X, dtype=bool), y=y, kind=REGRESSION, baseline_mask=baseline, meta=hp)


@dataclass
class BNNPriorConfig:
    hidden_dim: int = 8
    n_classes: int = 2
    cluster_count_range: tuple[int, int] = (1, 3)
    feature_subset_range: tuple[int, int] | None = None
    prevalence_range: tuple[float, float] = (0.05, 0.95)
    importance_range: tuple[float, float] = (0.5, 2.0)
    scale_range: tuple[float, float] = (0.5, 2.0)
    temperature_range: tuple[float, float] = (0.5, 2.0)
    n_baseline: int = 0
    prevalence_tol: float = 0.02

    def __post_init__(self):
        lo, hi = self.prevalence_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError("prevalence_range must lie inside (0, 1)")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def match_prevalence(logits: np.ndarray, u: np.ndarray, target: float, tol: float) -> float:
    """Bias shift b with ``mean(u < sigmoid(logits + b))`` within ``tol`` of ``target``.

    The achieved rate is a non-decreasing step function of b, so bisection on b
    converges; ``u`` are the uniforms later used to draw the labels.
    """
    lo, hi = -60.0, 60.0
    best_b, best_err = 0.0, np.inf
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rate = float(np.mean(u < _sigmoid(logits + mid)))
        err = abs(rate - target)
        if err < best_err:
            best_b, best_err = mid, err
        if err <= 0.5 / len(u):
            break
        if rate < target:
            lo = mid
        else:
            hi = mid
    if best_err > tol:
        raise BisectionError(f"could not match prevalence {target:.3f} (best error {best_err:.3f})")
    return best_b


def sample_bnn_task(cfg: BNNPriorConfig, X_pool: np.ndarray, N: int, rng: np.random.Generator) -> Dataset:
    X_pool = np.asarray(X_pool, dtype=np.float64)
    if X_pool.shape[0] < N:
        raise ValueError("pool has fewer rows than N")
    d = X_pool.shape[1]
    X = X_pool[rng.choice(X_pool.shape[0], size=N, replace=False)]
    mu, sd = X.mean(0), X.std(0)
    Z = (X - mu) / np.where(sd > 1e-8, sd, 1.0)

    k = int(rng.integers(cfg.cluster_count_range[0], cfg.cluster_count_range[1] + 1))
    centers = rng.standard_normal((k, d))
    cluster = np.argmin(((Z[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    lo, hi = cfg.feature_subset_range or (1, d)
    feature_mask = np.zeros((k, d))
    for c in range(k):
        feature_mask[c, rng.choice(d, size=int(rng.integers(lo, hi + 1)), replace=False)] = 1.0

    out = 1 if cfg.n_classes == 2 else cfg.n_classes
    importance = rng.uniform(*cfg.importance_range, size=d)
    W1 = rng.standard_normal((d, cfg.hidden_dim)) * importance[:, None] * rng.uniform(*cfg.scale_range)
    b1 = rng.standard_normal(cfg.hidden_dim)
    W2 = rng.standard_normal((cfg.hidden_dim, out)) * rng.uniform(*cfg.scale_range)
    logits = np.tanh((Z * feature_mask[cluster]) @ W1 + b1) @ W2
    logits = logits / rng.uniform(*cfg.temperature_range)

    meta = {"prior": "bnn", "clusters": k, "informative": feature_mask.astype(int).tolist()}
    if cfg.n_classes == 2:
        target = float(rng.uniform(*cfg.prevalence_range))
        u = rng.uniform(size=N)
        shift = match_prevalence(logits[:, 0], u, target, cfg.prevalence_tol)
        p1 = _sigmoid(logits[:, 0] + shift)
        y = (u < p1).astype(np.int64)
        p_true = np.stack([1.0 - p1, p1], axis=1)
        meta.update(prevalence_target=target, bias_shift=shift)
    else:
        z = logits - logits.max(1, keepdims=True)
        p_true = np.exp(z) / np.exp(z).sum(1, keepdims=True)
        y = np.array([rng.choice(cfg.n_classes, p=p) for p in p_true], dtype=np.int64)
    baseline = np.zeros(d, dtype=bool)
    baseline[: cfg.n_baseline] = True
    return Dataset(
        X=X,
        R=np.ones_like(X, dtype=bool),
        y=y,
        kind=CLASSIFICATION,
        n_classes=cfg.n_classes,
        baseline_mask=baseline,
        p_true=p_true,
        meta=meta,
    )
