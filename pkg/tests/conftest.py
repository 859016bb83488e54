import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest
import torch

from metaafa.cli import main

TINY = {
    "seed": 3,
    "prior": {"kind": "gp", "N": 32, "gp": {"d": 4}},
    "model": {"model_dim": 32, "hidden": 64, "layers": 1, "heads": 2, "dtype": "float64"},
    "train": {"predictor_steps": 20, "policy_steps": 10, "checkpoint_every": 10, "n_val_tasks": 8, "warmup": 5},
    "eval": {"n_tasks": 4, "n_train_tasks": 2, "k": 2, "context_grid": [8, 16], "missing_grid": [0.0, 0.3]},
    "mlp": {"epochs": 5, "selector_epochs": 5},
}


def write_config(directory: Path, data=None, **extra) -> Path:
    cfg = json.loads(json.dumps(data or TINY))
    cfg["output_dir"] = str(directory / "out")
    cfg.update(extra)
    path = directory / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def run_cli(*args) -> int:
    return main([str(a) for a in args])


@dataclass
class Trained:
    model: torch.nn.Module
    source: object
    seconds: float
    config: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def copy_world_model(tmp_path_factory):
    """Reduced model trained on the d=4 copy-feature prior (5000 predictor + 3000 policy steps)."""
    from metaafa.seqmodel import ModelConfig
    from metaafa.taskgen.sources import CopyWorldSource
    from metaafa.trainer import TrainConfig, pretrain_policy, pretrain_predictor

    torch.set_num_threads(1)
    out = tmp_path_factory.mktemp("copy_world")
    src = CopyWorldSource(d=4, N=64, copy_index=3)
    mcfg = ModelConfig(d=4, c=2, kind="classification", model_dim=64, hidden=128, layers=2, heads=2)
    tcfg = TrainConfig(predictor_steps=5000, policy_steps=3000, seq_len=64)
    start = time.perf_counter()
    res = pretrain_predictor(mcfg, tcfg, src, out / "predictor")
    res = pretrain_policy(res.model, tcfg, src, out / "policy")
    return Trained(res.model.eval(), src, time.perf_counter() - start)


# Reduced GP setup: smooth lengthscales and one or two informative features out of six.
GP_EVAL = {"n_eval": 50, "m": 64, "k": 5}


@pytest.fixture(scope="session")
def gp_model(tmp_path_factory):
    """Reduced model trained on d=6, N=128 GP tasks (predictor then policy)."""
    from metaafa.seqmodel import ModelConfig
    from metaafa.taskgen import GPPriorConfig, MissingnessConfig
    from metaafa.taskgen.sources import GPTaskSource
    from metaafa.trainer import TrainConfig, pretrain_policy, pretrain_predictor

    torch.set_num_threads(1)
    out = tmp_path_factory.mktemp("gp")
    src = GPTaskSource(GPPriorConfig(d=6, lengthscale_range=(1.5, 5.0), informative_range=(1, 2)),
                       MissingnessConfig(), 128)
    mcfg = ModelConfig(d=6, c=1, kind="regression", model_dim=64, hidden=128, layers=2, heads=2)
    tcfg = TrainConfig(predictor_steps=15000, policy_steps=3000, seq_len=128, lr_predictor=1e-3, lr_policy=1e-3)
    start = time.perf_counter()
    res = pretrain_predictor(mcfg, tcfg, src, out / "predictor")
    res = pretrain_policy(res.model, tcfg, src, out / "policy")
    return Trained(res.model.eval(), src, time.perf_counter() - start, dict(GP_EVAL))
