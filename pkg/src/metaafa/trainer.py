"""Two-stage pretraining: predictor on random feature subsets, then the policy head
through a straight-through Gumbel-softmax relaxation of the one-step loss."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .diffkernel import (
    ContainerError,
    adam_step,
    atomic_write_text,
    dumps_tensors,
    atomic_write_bytes,
    load_tensors,
    make_adam,
    masked_log_softmax,
    masked_softmax,
)
from .seqmodel import (
    ModelConfig,
    SequenceModel,
    TaskBatch,
    batch_from_datasets,
    forward_predictor,
    predictive_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STAGE_PREDICTOR, STAGE_POLICY, STAGE_VAL = 1, 2, 3


class DivergenceError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    predictor_steps: int = 100_000
    policy_steps: int = 50_000
    batch_tasks: int = 8
    seq_len: int = 500
    lr_predictor: float = 1e-4
    lr_policy: float = 1e-4
    lr_joint_finetune: float = 1e-5
    gumbel_tau: float = 0.1
    tau_final: float | None = None  # anneal linearly to this value when set
    warmup: int = 500
    predictor_decay: bool = True
    checkpoint_every: int = 500
    n_val_tasks: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.gumbel_tau <= 0:
            raise ValueError("gumbel_tau must be positive")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")


def task_rng(seed: int, stage: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, step, index])


# -- Gumbel-softmax -----------------------------------------------------------


@dataclass
class GumbelSample:
    noise: torch.Tensor
    relaxed: torch.Tensor
    hard: torch.Tensor
    straight_through: torch.Tensor


def gumbel_noise(shape, rng: np.random.Generator, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(rng.gumbel(size=shape), dtype=dtype)


def gumbel_straight_through(logits: torch.Tensor, available: torch.Tensor, tau: float,
                            noise: torch.Tensor | None = None) -> GumbelSample:
    """Relaxed sample ``softmax((log pi + noise) / tau)`` over available actions.

    The straight-through output equals the hard one-hot in the forward pass and
    carries the relaxed sample's gradient. Blocked actions are never selected.
    """
    available = available.to(torch.bool)
    log_pi = masked_log_softmax(logits, available)
    if noise is None:
        noise = torch.zeros_like(logits)
    perturbed = torch.where(available, log_pi + noise.to(logits.dtype), torch.zeros_like(logits))
    relaxed = masked_softmax(perturbed / tau, available)
    idx = perturbed.masked_fill(~available, float("-inf")).argmax(-1)
    hard = torch.nn.functional.one_hot(idx, logits.shape[-1]).to(logits.dtype)
    if (hard.bool() & ~available).any():
        raise AssertionError("blocked action selected")
    return GumbelSample(noise, relaxed, hard, hard + relaxed - relaxed.detach())


# -- state sampling -----------------------------------------------------------


def random_acquired(available: torch.Tensor, baseline: torch.Tensor, rng: np.random.Generator,
                    leave_one: bool = False) -> torch.Tensor:
    """Random acquired sets: baseline plus a uniform-size random subset of available features.

    With ``leave_one`` at least one available feature stays unacquired when possible.
    """
    avail = available.numpy() & ~baseline.numpy()
    n_avail = avail.sum(-1)
    hi = np.maximum(n_avail - 1, 0) if leave_one else n_avail
    size = np.floor(rng.uniform(size=n_avail.shape) * (hi + 1)).astype(int)
    keys = np.where(avail, rng.uniform(size=avail.shape), np.inf)
    ranks = np.argsort(np.argsort(keys, axis=-1), axis=-1)
    chosen = (ranks < size[..., None]) & avail
    base = baseline.numpy() & available.numpy()
    return torch.as_tensor(chosen | base)


# -- losses -------------------------------------------------------------------


def reveal(acquired: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
    """Acquisition mask after adding a (hard, relaxed or straight-through) action vector."""
    return acquired.to(action.dtype) + action


def one_step_loss(predict: Callable[[torch.Tensor], torch.Tensor], kind: str, acquired: torch.Tensor,
                  action: torch.Tensor, y: torch.Tensor, weights=None) -> torch.Tensor:
    """Predictive loss after revealing ``action`` on top of ``acquired``.

    ``predict`` maps a (possibly fractional) acquisition mask for the queries to
    predictor outputs; with a relaxed action the revealed value and mask slots
    are convex combinations weighted by the action vector.
    """
    return predictive_loss(kind, predict(reveal(acquired, action)), y, weights)


def batch_predict_fn(model: SequenceModel, batch: TaskBatch, with_targets: bool = True):
    mask = batch.mask(with_targets)

    def predict(acquired):
        return forward_predictor(model, batch.tokens(acquired, with_targets), mask, batch.q)

    return predict


def _check(loss: torch.Tensor, step: int, stage: str) -> float:
    v = float(loss.detach())
    if not np.isfinite(v):
        raise DivergenceError(f"{stage} loss is {v} at step {step}")
    return v


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path: str | Path, model: SequenceModel, meta: dict) -> None:
    """Write ``<path>`` (named-tensor container) and ``<path>.json`` metadata."""
    path = Path(path)
    tensors = {k: v for k, v in model.state_dict().items()}
    atomic_write_bytes(path, dumps_tensors(tensors))
    full = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "config_hash": model.cfg.config_hash(),
        **meta,
    }
    atomic_write_text(path.with_name(path.name + ".json"), json.dumps(full, sort_keys=True, indent=1))


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> tuple[SequenceModel, dict]:
    path = Path(path)
    meta_path = path.with_name(path.name + ".json")
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint metadata {meta_path}: {e}") from e
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('format_version')} != {CHECKPOINT_VERSION}")
    cfg = ModelConfig(**meta["model_config"])
    if cfg.config_hash() != meta["config_hash"]:
        raise CheckpointError("stored config hash does not match stored config")
    if expected_hash is not None and expected_hash != meta["config_hash"]:
        raise CheckpointError(f"config hash mismatch: checkpoint {meta['config_hash']}, expected {expected_hash}")
    try:
        tensors = load_tensors(path)
    except (OSError, ContainerError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    model = SequenceModel(cfg)
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint tensors do not fit the model: {e}") from e
    return model, meta


def best_entry(history: list[dict]) -> dict:
    return min(history, key=lambda h: (h["val_loss"], h["step"]))


class TrainLog:
    """CSV training curve: step, train loss, val loss, lr."""

    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, step, train_loss, val_loss, lr):
        self.rows.append((step, train_loss, val_loss, lr))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_loss", "lr"])
        for step, tl, vl, lr in self.rows:
            w.writerow([step, repr(float(tl)), "" if vl is None else repr(float(vl)), repr(float(lr))])
        return buf.getvalue()


# -- training loops -----------------------------------------------------------


@dataclass
class TrainResult:
    model: SequenceModel
    history: list[dict] = field(default_factory=list)
    log: TrainLog = field(default_factory=TrainLog)


def _sample_batch(source, cfg: TrainConfig, stage: int, step: int, dtype) -> tuple[TaskBatch, np.random.Generator]:
    datasets = [source.sample(task_rng(cfg.seed, stage, step, i)) for i in range(cfg.batch_tasks)]
    rng = task_rng(cfg.seed, stage, step, 10_000)
    m = int(rng.integers(1, source.N))
    return batch_from_datasets(datasets, m, dtype), rng


class Validator:
    """Fixed held-out tasks, context size and acquired sets, resampled once."""

    def __init__(self, source, cfg: TrainConfig, dtype):
        self.batches = []
        n = max(cfg.n_val_tasks, 1)
        datasets = [source.sample(task_rng(cfg.seed, STAGE_VAL, 0, i)) for i in range(n)]
        rng = task_rng(cfg.seed, STAGE_VAL, 1, 0)
        m = max(1, source.N // 2)
        for k in range(0, n, cfg.batch_tasks):
            batch = batch_from_datasets(datasets[k:k + cfg.batch_tasks], m, dtype)
            state = random_acquired(batch.q_r, batch.baseline, rng)
            policy_state = random_acquired(batch.q_r, batch.baseline, rng, leave_one=True)
            self.batches.append((batch, state, policy_state))

    @torch.no_grad()
    def predictor_loss(self, model) -> float:
        total = 0.0
        for batch, state, _ in self.batches:
            out = batch_predict_fn(model, batch)(state)
            total += float(predictive_loss(batch.kind, out, batch.q_y))
        return total / len(self.batches)

    @torch.no_grad()
    def policy_loss(self, model) -> float:
        total = 0.0
        for batch, _, state in self.batches:
            total += float(policy_step_loss(model, batch, state, tau=1.0, rng=None))
        return total / len(self.batches)


def policy_step_loss(model: SequenceModel, batch: TaskBatch, acquired: torch.Tensor, tau: float,
                     rng: np.random.Generator | None) -> torch.Tensor:
    """One-step loss of the straight-through action drawn from the policy head.

    ``rng=None`` disables the Gumbel noise, so the action is the policy argmax.
    """
    mask = batch.mask(True)
    tokens = batch.tokens(acquired, True)
    logits = model.policy_from_hidden(model.hidden(tokens, mask, batch.q))
    candidates = batch.q_r & ~acquired
    has_cand = candidates.any(-1)
    safe = torch.where(has_cand[..., None], candidates, torch.ones_like(candidates))
    noise = None if rng is None else gumbel_noise(logits.shape, rng, logits.dtype)
    sample = gumbel_straight_through(logits, safe, tau, noise)
    action = sample.straight_through * has_cand[..., None].to(logits.dtype)
    if ((action.detach() != 0) & ~batch.q_r).any():
        raise AssertionError("policy acquired a retrospectively missing feature")
    return one_step_loss(batch_predict_fn(model, batch), batch.kind, acquired, action, batch.q_y,
                         has_cand.to(logits.dtype))


def _train_loop(model, source, cfg: TrainConfig, stage: int, steps: int, opt, horizon, step_loss,
                val_fn, out_dir: Path | None, name: str) -> TrainResult:
    result = TrainResult(model)
    best = None
    best_state = None
    for step in range(1, steps + 1):
        batch, rng = _sample_batch(source, cfg, stage, step, model.dtype)
        loss = step_loss(model, batch, rng, step)
        v = _check(loss, step, name)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        lr = adam_step(opt, step, cfg.warmup, horizon)
        val = None
        if step % cfg.checkpoint_every == 0 or step == steps:
            val = val_fn(model)
            entry = {"step": step, "val_loss": val}
            result.history.append(entry)
            if best is None or val < best["val_loss"]:
                best = entry
                best_state = {k: t.detach().clone() for k, t in model.state_dict().items()}
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.ntc", model,
                                    {"stage": name, "step": step, "val_loss": val, "seed": cfg.seed})
            log.info("%s step %d train %.4f val %.4f lr %.2e", name, step, v, val, lr)
        result.log.add(step, v, val, lr)
    if best_state is not None:
        model.load_state_dict(best_state)
    if out_dir is not None:
        meta_path = out_dir / "best.ntc.json"
        meta = json.loads(meta_path.read_text())
        meta["history"] = result.history
        atomic_write_text(meta_path, json.dumps(meta, sort_keys=True, indent=1))
        atomic_write_text(out_dir / "train_log.csv", result.log.to_csv())
    return result


def pretrain_predictor(model_cfg: ModelConfig, cfg: TrainConfig, source, out_dir: str | Path | None = None,
                       model: SequenceModel | None = None) -> TrainResult:
    """Predictor pretraining on random acquired subsets with the autoregressive token layout."""
    if model is None:
        torch.manual_seed(cfg.seed)
        model = SequenceModel(model_cfg)
    out_dir = None if out_dir is None else Path(out_dir)
    validator = Validator(source, cfg, model.dtype)
    opt = make_adam([(model.parameters(), cfg.lr_predictor)])
    horizon = cfg.predictor_steps if cfg.predictor_decay else None

    def step_loss(model, batch, rng, step):
        acquired = random_acquired(batch.q_r, batch.baseline, rng)
        return predictive_loss(batch.kind, batch_predict_fn(model, batch)(acquired), batch.q_y)

    return _train_loop(model, source, cfg, STAGE_PREDICTOR, cfg.predictor_steps, opt, horizon,
                       step_loss, validator.predictor_loss, out_dir, "predictor")


def tau_at(cfg: TrainConfig, step: int) -> float:
    if cfg.tau_final is None:
        return cfg.gumbel_tau
    frac = min(1.0, step / max(cfg.policy_steps, 1))
    return cfg.gumbel_tau + frac * (cfg.tau_final - cfg.gumbel_tau)


def pretrain_policy(model: SequenceModel, cfg: TrainConfig, source, out_dir: str | Path | None = None) -> TrainResult:
    """Policy training against the one-step loss; backbone and predictor fine-tune at a lower rate."""
    out_dir = None if out_dir is None else Path(out_dir)
    validator = Validator(source, cfg, model.dtype)
    policy_params = list(model.policy_head.parameters())
    policy_ids = {id(p) for p in policy_params}
    rest = [p for p in model.parameters() if id(p) not in policy_ids]
    opt = make_adam([(policy_params, cfg.lr_policy), (rest, cfg.lr_joint_finetune)])

    def step_loss(model, batch, rng, step):
        acquired = random_acquired(batch.q_r, batch.baseline, rng, leave_one=True)
        return policy_step_loss(model, batch, acquired, tau_at(cfg, step), rng)

    return _train_loop(model, source, cfg, STAGE_POLICY, cfg.policy_steps, opt, None,
                       step_loss, validator.policy_loss, out_dir, "policy")


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
