"""Masked transformer over data sequences with separate predictor and policy heads.

Token layout for a task with ``m`` context rows and ``q`` query rows::

    [ctx_1 .. ctx_m | tgt_1 .. tgt_q | qry_1 .. qry_q]   (training, length m + 2q)
    [ctx_1 .. ctx_m | qry_1 .. qry_q]                    (inference, length m + q)

Context and target tokens are ``[x * r, r, y]``; query tokens are
``[x * a, a, 0]`` with ``a`` the acquired-feature mask. There are no positional
embeddings, so outputs are invariant to context order by construction.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .diffkernel import (
    check_finite,
    cross_entropy,
    gaussian_nll,
    gelu,
    layer_norm,
    masked_softmax,
)
from .taskgen.dataset import CLASSIFICATION, REGRESSION, Dataset
from .taskgen.missingness import feature_stats

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    d: int
    c: int = 1
    kind: str = REGRESSION
    model_dim: int = 256
    hidden: int = 512
    layers: int = 6
    heads: int = 4
    embedding_depth: int = 4
    dropout: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.kind == REGRESSION and self.c != 1:
            raise ValueError("regression uses label width c = 1")
        if self.kind == CLASSIFICATION and self.c < 2:
            raise ValueError("classification needs c >= 2 classes")
        if self.embedding_depth < 1:
            raise ValueError("embedding_depth must be >= 1")

    @property
    def token_width(self) -> int:
        return 2 * self.d + self.c

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def build_mask(m: int, q: int, with_targets: bool = True) -> torch.Tensor:
    """Boolean attention mask; ``mask[i, k]`` is True when token i may attend to token k.

    Context tokens see all context. Target i sees context and targets up to
    and including itself. Query i sees context, targets strictly before its
    own paired target, and itself; never other queries or its own target.
    """
    if m < 0 or q < 1:
        raise ValueError("need m >= 0 and q >= 1")
    L = m + (2 * q if with_targets else q)
    mask = torch.zeros(L, L, dtype=torch.bool)
    mask[:m, :m] = True
    mask[m:, :m] = True
    qs = m + q if with_targets else m
    if with_targets:
        tri = torch.tril(torch.ones(q, q, dtype=torch.bool))
        mask[m:m + q, m:m + q] = tri
        mask[qs:, m:m + q] = torch.tril(torch.ones(q, q, dtype=torch.bool), diagonal=-1)
    idx = torch.arange(qs, L)
    mask[idx, idx] = True
    return mask


def encode(x: torch.Tensor, mask: torch.Tensor, labels: torch.Tensor | None, c: int) -> torch.Tensor:
    """``[x * mask, mask, labels or 0^c]`` along the last axis.

    ``x`` must be finite everywhere; entries with mask 0 contribute exactly 0.
    """
    if x.shape != mask.shape:
        raise ValueError("x and mask shapes differ")
    if labels is None:
        labels = torch.zeros(*x.shape[:-1], c, dtype=x.dtype)
    elif labels.shape[-1] != c:
        raise ValueError(f"label width {labels.shape[-1]} != {c}")
    mask = mask.to(x.dtype)
    return torch.cat([x * mask, mask, labels.to(x.dtype)], dim=-1)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


class MaskedSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        dh = D // self.heads
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        attn = masked_softmax(scores, mask)
        return self.out((attn @ v).transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = LayerNorm(cfg.model_dim)
        self.attn = MaskedSelfAttention(cfg.model_dim, cfg.heads)
        self.ln2 = LayerNorm(cfg.model_dim)
        self.fc1 = nn.Linear(cfg.model_dim, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, cfg.model_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        x = x + self.drop(self.attn(self.ln1(x), mask))
        return x + self.drop(self.fc2(gelu(self.fc1(self.ln2(x)))))


class SequenceModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.token_width] + [cfg.model_dim] * cfg.embedding_depth
        self.embed = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = LayerNorm(cfg.model_dim)
        self.predictor_head = nn.Linear(cfg.model_dim, 2 if cfg.kind == REGRESSION else cfg.c)
        self.policy_head = nn.Linear(cfg.model_dim, cfg.d)
        self.to(cfg.torch_dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.cfg.torch_dtype

    def hidden(self, tokens: torch.Tensor, mask: torch.Tensor, n_query: int) -> torch.Tensor:
        """Final representations at the last ``n_query`` positions."""
        if tokens.shape[-1] != self.cfg.token_width or tokens.shape[-2] != mask.shape[0]:
            raise ValueError("tokens and mask are inconsistent with the model")
        h = tokens
        for k, layer in enumerate(self.embed):
            h = layer(h) if k == 0 else layer(gelu(h))
        for block in self.blocks:
            h = block(h, mask)
        h = self.ln_f(h[..., -n_query:, :])
        return check_finite(h, "transformer activations")

    def predictor_from_hidden(self, h):
        return self.predictor_head(h)

    def policy_from_hidden(self, h):
        return self.policy_head(h)

    def forward(self, tokens, mask, n_query):
        h = self.hidden(tokens, mask, n_query)
        return self.predictor_head(h), self.policy_head(h)


def forward_predictor(model: SequenceModel, tokens, mask, n_query) -> torch.Tensor:
    """Predictor output at query positions: ``(..., 2)`` mean/log-variance or ``(..., c)`` logits."""
    return model.predictor_from_hidden(model.hidden(tokens, mask, n_query))


def forward_policy(model: SequenceModel, tokens, mask, n_query, available: torch.Tensor) -> torch.Tensor:
    """Blocked action distribution over features; ``available`` is ``r & ~a`` per query."""
    logits = model.policy_from_hidden(model.hidden(tokens, mask, n_query))
    available = torch.as_tensor(available, dtype=torch.bool)
    if not available.any(-1).all():
        raise ValueError("a query has no acquirable feature left")
    return masked_softmax(logits, available)


def predictive_loss(kind: str, out: torch.Tensor, y: torch.Tensor, weights=None) -> torch.Tensor:
    if kind == REGRESSION:
        return gaussian_nll(out[..., 0], out[..., 1], y.to(out.dtype), weights)
    c = out.shape[-1]
    w = None if weights is None else torch.as_tensor(weights).reshape(-1)
    return cross_entropy(out.reshape(-1, c), y.reshape(-1), w)


def predictive_summary(kind: str, out: torch.Tensor) -> dict[str, np.ndarray]:
    """Detach predictor output into numpy: mean/var for regression, probs for classification."""
    out = out.detach().to(torch.float64)
    if kind == REGRESSION:
        return {"mean": out[..., 0].numpy(), "var": torch.exp(out[..., 1]).numpy()}
    return {"probs": torch.softmax(out, dim=-1).numpy()}


@dataclass
class TaskBatch:
    """Normalised tensors for a batch of tasks sharing N and the context size m."""

    kind: str
    c: int
    ctx_x: torch.Tensor
    ctx_r: torch.Tensor
    ctx_lab: torch.Tensor
    q_x: torch.Tensor
    q_r: torch.Tensor
    q_lab: torch.Tensor
    q_y: torch.Tensor
    baseline: torch.Tensor

    @property
    def m(self) -> int:
        return self.ctx_x.shape[1]

    @property
    def q(self) -> int:
        return self.q_x.shape[1]

    @property
    def d(self) -> int:
        return self.q_x.shape[2]

    def initial_acquired(self) -> torch.Tensor:
        return self.baseline.expand_as(self.q_r).clone() & self.q_r

    def tokens(self, acquired: torch.Tensor, with_targets: bool = True) -> torch.Tensor:
        parts = [encode(self.ctx_x, self.ctx_r, self.ctx_lab, self.c)]
        if with_targets:
            parts.append(encode(self.q_x, self.q_r, self.q_lab, self.c))
        parts.append(encode(self.q_x, acquired, None, self.c))
        return torch.cat(parts, dim=1)

    def mask(self, with_targets: bool = True) -> torch.Tensor:
        return build_mask(self.m, self.q, with_targets)


def batch_from_datasets(datasets: list[Dataset], m: int, dtype=torch.float32,
                        query_rows: np.ndarray | None = None) -> TaskBatch:
    """Context = rows ``[0, m)``; queries = the remaining rows (or ``query_rows``).

    Features are standardised with statistics from the observed context
    entries only, so query values never influence the encoding of other tokens.
    """
    first = datasets[0]
    kind, c = first.kind, first.label_width
    cx, cr, cl, qx, qr, ql, qy = [], [], [], [], [], [], []
    for ds in datasets:
        if ds.kind != kind or ds.label_width != c or ds.d != first.d:
            raise ValueError("datasets in a batch must share kind, label width and d")
        rows_q = np.arange(m, ds.N) if query_rows is None else np.asarray(query_rows)
        stats = feature_stats(ds.X[:m], ds.R[:m])
        Z = np.where(ds.R, stats.apply(ds.X), 0.0)
        lab = ds.labels_encoded()
        cx.append(Z[:m]); cr.append(ds.R[:m]); cl.append(lab[:m])
        qx.append(Z[rows_q]); qr.append(ds.R[rows_q]); ql.append(lab[rows_q]); qy.append(ds.y[rows_q])

    def t(xs, dt=dtype):
        return torch.as_tensor(np.stack(xs), dtype=dt)

    return TaskBatch(
        kind=kind,
        c=c,
        ctx_x=t(cx).reshape(len(datasets), m, first.d),
        ctx_r=t(cr, torch.bool).reshape(len(datasets), m, first.d),
        ctx_lab=t(cl).reshape(len(datasets), m, c),
        q_x=t(qx),
        q_r=t(qr, torch.bool),
        q_lab=t(ql),
        q_y=t(qy, dtype if kind == REGRESSION else torch.long),
        baseline=torch.as_tensor(first.baseline_mask, dtype=torch.bool),
    )


def mask_to_csv(mask: torch.Tensor) -> str:
    """Attention mask as 0/1 rows, for inspection."""
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in mask.tolist())
