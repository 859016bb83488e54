"""Behaviour of small trained models. These train for a few minutes on one core."""

from dataclasses import replace

import numpy as np
import pytest
import torch

from metaafa.acquisition import TaskView, acquire
from metaafa.metrics import per_task_metrics, summarize
from metaafa.seqmodel import ModelConfig, batch_from_datasets, forward_predictor, predictive_loss
from metaafa.taskgen import GPPriorConfig, MissingnessConfig
from metaafa.taskgen.sources import GPTaskSource
from metaafa.trainer import TrainConfig, batch_predict_fn, one_step_loss, pretrain_predictor, task_rng

pytestmark = pytest.mark.slow


def test_copy_feature_one_step_loss_is_near_zero(copy_world_model):
    model, src = copy_world_model.model, copy_world_model.source
    datasets = [src.sample(np.random.default_rng([90, i])) for i in range(16)]
    batch = batch_from_datasets(datasets, 32, model.dtype)
    acquired = torch.zeros_like(batch.q_r)
    j = datasets[0].meta["copy_feature"] - 1
    action = torch.zeros(acquired.shape, dtype=model.dtype)
    action[..., j] = 1.0
    # only queries where the copy feature was observed can reveal it
    weights = batch.q_r[..., j].to(model.dtype)
    with torch.no_grad():
        predict = batch_predict_fn(model, batch, with_targets=False)
        copy_loss = float(one_step_loss(predict, batch.kind, acquired, action, batch.q_y, weights))
        other = torch.zeros_like(action)
        other[..., (j + 1) % 4] = 1.0
        other_loss = float(one_step_loss(predict, batch.kind, acquired, other, batch.q_y,
                                         batch.q_r[..., (j + 1) % 4].to(model.dtype)))
    assert copy_loss < 0.05 < other_loss


def test_learned_policy_first_pick_resolves_copy_world(copy_world_model):
    model, src = copy_world_model.model, copy_world_model.source
    table = {}
    for i in range(30):
        ds = src.sample(np.random.default_rng([91, i]))
        R = ds.R.copy()
        R[32:] = True
        table.update(per_task_metrics(acquire(TaskView(replace(ds, R=R), 32), 4, "learned", model=model,
                                              task_id=f"t{i}")))
    nll = [s["mean"] for s in summarize("learned", table) if s["metric"] == "nll"]
    assert len(nll) == 5
    # the copy feature settles the label; later picks only add noise around zero
    assert nll[0] > 0.5
    assert max(nll[1:]) < 0.05


def test_predictor_uses_the_informative_feature(tmp_path):
    src = GPTaskSource(GPPriorConfig(d=2, informative_range=(1, 1)), MissingnessConfig("none"), 32)
    mcfg = ModelConfig(d=2, c=1, kind="regression", model_dim=32, hidden=64, layers=2, heads=2)
    tcfg = TrainConfig(predictor_steps=2000, policy_steps=1, seq_len=32, n_val_tasks=16)
    model = pretrain_predictor(mcfg, tcfg, src, tmp_path).model.eval()
    with_feature, without = [], []
    for i in range(100):
        ds = src.sample(task_rng(1, 4, 0, i))
        batch = batch_from_datasets([ds], 16, model.dtype)
        informative = ds.meta["informative"][0]
        acquired = torch.zeros_like(batch.q_r)
        for store, reveal in ((without, False), (with_feature, True)):
            a = acquired.clone()
            a[..., informative] = reveal
            with torch.no_grad():
                out = forward_predictor(model, batch.tokens(a, with_targets=False), batch.mask(False), batch.q)
                store.append(float(predictive_loss(batch.kind, out, batch.q_y)))
    assert np.mean(with_feature) < np.mean(without)
