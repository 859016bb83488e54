"""Dense-tensor numerics for the sequence model and the MLP baselines.

Reverse-mode differentiation is delegated to ``torch.autograd``; this module
fixes the handful of ops the models need (with the conventions the rest of
the package relies on), a central finite-difference checker that is
independent of autograd, the warmup/linear-decay Adam schedule, and the
named-tensor container used for checkpoints and binary task files.
"""

from __future__ import annotations

import io
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

LAYER_NORM_EPS = 1e-5
LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when a forward value contains NaN or Inf."""


def check_finite(x: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over entries where ``mask`` is true; masked entries are exactly 0.

    Every row must keep at least one entry.
    """
    mask = mask.to(torch.bool)
    if not mask.any(dim=dim).all():
        raise ValueError("masked_softmax: a row has every entry masked")
    filled = logits.masked_fill(~mask, float("-inf"))
    shifted = filled - filled.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Log of :func:`masked_softmax`; masked entries are ``-inf``."""
    mask = mask.to(torch.bool)
    if not mask.any(dim=dim).all():
        raise ValueError("masked_log_softmax: a row has every entry masked")
    return torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=dim)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise ValueError("layer_norm: shape mismatch")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + LAYER_NORM_EPS) * gain + bias


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor | None = None):
    """Mean of ``-log softmax(logits)[target]`` over rows (weighted if given)."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    c = logits.shape[-1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"cross_entropy: target out of range [0, {c})")
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return _weighted_mean(nll, weights)


def gaussian_nll(mean: torch.Tensor, log_var: torch.Tensor, y: torch.Tensor, weights=None):
    """Mean of ``0.5 * (log 2pi + log_var + (y - mean)^2 exp(-log_var))``."""
    nll = 0.5 * (LOG_2PI + log_var + (y - mean) ** 2 * torch.exp(-log_var))
    return _weighted_mean(nll, weights)


def _weighted_mean(v: torch.Tensor, weights) -> torch.Tensor:
    if weights is None:
        return v.mean()
    w = torch.as_tensor(weights, dtype=v.dtype)
    return (v * w).sum() / w.sum().clamp_min(torch.finfo(v.dtype).tiny)


# -- finite differences -------------------------------------------------------


def finite_difference_grads(fn: Callable[..., torch.Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5):
    """Central-difference gradients of a scalar function, one input entry at a time."""

    def value(arrays):
        with torch.no_grad():
            out = fn(*[torch.as_tensor(a, dtype=torch.float64) for a in arrays])
        return float(out)

    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value(arrays)
            flat[i] = orig - h
            down = value(arrays)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def autograd_grads(fn: Callable[..., torch.Tensor], inputs: Sequence[np.ndarray]):
    tensors = [torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in inputs]
    out = fn(*tensors)
    out.backward()
    return [t.grad.numpy().copy() for t in tensors]


def gradient_check(fn, inputs: Sequence[np.ndarray], h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between autograd and central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    analytic = autograd_grads(fn, inputs)
    numeric = finite_difference_grads(fn, inputs, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# -- optimisation -------------------------------------------------------------

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def lr_factor(step: int, warmup: int = 500, horizon: int | None = None) -> float:
    """Multiplier on the base rate at 1-based ``step``.

    Linear warmup 0 -> 1 over ``warmup`` steps, then linear decay to 0 at
    ``horizon`` (``None`` keeps the rate flat after warmup).
    """
    if warmup > 0 and step < warmup:
        return step / warmup
    if horizon is None:
        return 1.0
    if horizon <= warmup:
        return 0.0
    return max(0.0, (horizon - step) / (horizon - warmup))


def make_adam(groups: Iterable[tuple[Iterable[torch.nn.Parameter], float]]) -> torch.optim.Adam:
    """Adam with default betas/eps over ``(params, base_lr)`` groups."""
    param_groups = []
    for params, lr in groups:
        params = [p for p in params if p.requires_grad]
        if params:
            param_groups.append({"params": params, "lr": lr, "base_lr": lr})
    return torch.optim.Adam(param_groups, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_step(opt: torch.optim.Optimizer, step: int, warmup: int = 500, horizon: int | None = None) -> float:
    """Apply one scheduled Adam update; returns the effective rate of the first group."""
    factor = lr_factor(step, warmup, horizon)
    for group in opt.param_groups:
        group["lr"] = group["base_lr"] * factor
    opt.step()
    return opt.param_groups[0]["lr"]


# -- named-tensor container ---------------------------------------------------

CONTAINER_MAGIC = b"NTC\x00"
CONTAINER_VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class ContainerError(ValueError):
    """Corrupt or unsupported named-tensor container."""


def _as_array(v) -> np.ndarray:
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    a = np.asarray(v)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    a = a.astype(a.dtype.newbyteorder("<"), copy=False)
    if a.dtype not in _DTYPE_TAGS:
        raise ContainerError(f"unsupported dtype {a.dtype}")
    return np.ascontiguousarray(a).reshape(a.shape)


def dumps_tensors(tensors: Mapping[str, object]) -> bytes:
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    buf.write(struct.pack("<HI", CONTAINER_VERSION, len(tensors)))
    for name, value in tensors.items():
        a = _as_array(value)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[a.dtype], a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        data = a.tobytes(order="C")
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    return buf.getvalue()


def loads_tensors(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CONTAINER_MAGIC:
        raise ContainerError("bad magic; not a named-tensor container")
    version, count = struct.unpack("<HI", take(6))
    if version != CONTAINER_VERSION:
        raise ContainerError(f"container version {version} unsupported (expected {CONTAINER_VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in _TAG_DTYPES:
            raise ContainerError(f"unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        dtype = _TAG_DTYPES[tag]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise ContainerError(f"entry {name!r}: size does not match shape")
        out[name] = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(shape).copy()
    if pos != len(view):
        raise ContainerError("trailing bytes after last entry")
    return out


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensors(path: str | Path, tensors: Mapping[str, object]) -> None:
    atomic_write_bytes(path, dumps_tensors(tensors))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return loads_tensors(Path(path).read_bytes())
