"""Per-task MLP baseline: a predictor trained on random feature subsets of the
labelled rows and a same-shape selector trained with straight-through Gumbel-softmax."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffkernel import make_adam
from .seqmodel import predictive_loss
from .taskgen.dataset import REGRESSION, Dataset
from .taskgen.missingness import NormStats, feature_stats
from .trainer import gumbel_noise, gumbel_straight_through, random_acquired


@dataclass
class MLPConfig:
    hidden: int = 128
    batch_size: int = 64
    epochs: int = 300
    selector_epochs: int = 300
    lr: float = 1e-3
    selector_tau: float = 0.5
    dtype: str = "float64"


def mlp(d_in: int, d_out: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                         nn.Linear(hidden, d_out))


def mlp_input(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.to(x.dtype)
    return torch.cat([x * mask, mask], dim=-1)


class MLPBaseline:
    """Predictor and selector fitted to the labelled rows of one task."""

    def __init__(self, d: int, kind: str, c: int, cfg: MLPConfig, stats: NormStats, baseline: np.ndarray):
        self.d, self.kind, self.c, self.cfg = d, kind, c, cfg
        self.stats = stats
        self.baseline = torch.as_tensor(baseline, dtype=torch.bool)
        self.dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
        out = 2 if kind == REGRESSION else c
        self.predictor = mlp(2 * d, out, cfg.hidden).to(self.dtype)
        self.selector = mlp(2 * d, d, cfg.hidden).to(self.dtype)

    def features(self, X: np.ndarray, R: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.where(R, self.stats.apply(X), 0.0), dtype=self.dtype)

    @torch.no_grad()
    def predict(self, x: torch.Tensor, acquired: torch.Tensor) -> torch.Tensor:
        return self.predictor(mlp_input(x, acquired))

    @torch.no_grad()
    def select(self, x: torch.Tensor, acquired: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        logits = self.selector(mlp_input(x, acquired))
        return logits.masked_fill(~candidates, float("-inf")).argmax(-1)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for k in range(0, n, size):
        yield order[k:k + size]


def fit_mlp_baseline(ds: Dataset, rows: np.ndarray, cfg: MLPConfig, rng: np.random.Generator,
                     train_selector: bool = True) -> MLPBaseline:
    """Fit on ``ds`` rows ``rows`` using only observed entries."""
    rows = np.asarray(rows)
    stats = feature_stats(ds.X[rows], ds.R[rows])
    model = MLPBaseline(ds.d, ds.kind, ds.n_classes, cfg, stats, ds.baseline_mask)
    torch.manual_seed(int(rng.integers(2**31)))
    x = model.features(ds.X[rows], ds.R[rows])
    r = torch.as_tensor(ds.R[rows])
    y = torch.as_tensor(ds.y[rows], dtype=model.dtype if ds.kind == REGRESSION else torch.long)

    opt = make_adam([(model.predictor.parameters(), cfg.lr)])
    for _ in range(cfg.epochs):
        for idx in _batches(len(rows), cfg.batch_size, rng):
            a = random_acquired(r[idx], model.baseline, rng)
            loss = predictive_loss(ds.kind, model.predictor(mlp_input(x[idx], a)), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

    if train_selector:
        for p in model.predictor.parameters():
            p.requires_grad_(False)
        opt = make_adam([(model.selector.parameters(), cfg.lr)])
        for _ in range(cfg.selector_epochs):
            for idx in _batches(len(rows), cfg.batch_size, rng):
                a = random_acquired(r[idx], model.baseline, rng, leave_one=True)
                cand = r[idx] & ~a
                has = cand.any(-1)
                if not has.any():
                    continue
                cand, a, xb, yb = cand[has], a[has], x[idx][has], y[idx][has]
                logits = model.selector(mlp_input(xb, a))
                g = gumbel_straight_through(logits, cand, cfg.selector_tau,
                                            gumbel_noise(logits.shape, rng, logits.dtype))
                mask = a.to(model.dtype) + g.straight_through
                loss = predictive_loss(ds.kind, model.predictor(mlp_input(xb, mask)), yb)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        for p in model.predictor.parameters():
            p.requires_grad_(True)
    return model
