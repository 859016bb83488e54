import json

import numpy as np
import pytest
import torch

from metaafa.diffkernel import dumps_tensors
from metaafa.oracle import complete_case_table, expected_conditional_entropy, label_distribution
from metaafa.seqmodel import ModelConfig, SequenceModel, batch_from_datasets, forward_predictor
from metaafa.taskgen import DiscreteWorldSpec, sample_discrete_world
from metaafa.taskgen.sources import CopyWorldSource, DiscreteWorldSource
from metaafa.trainer import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    TrainLog,
    _check,
    batch_predict_fn,
    best_entry,
    gumbel_noise,
    gumbel_straight_through,
    load_checkpoint,
    one_step_loss,
    policy_step_loss,
    pretrain_policy,
    pretrain_predictor,
    random_acquired,
    save_checkpoint,
    tau_at,
)


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.predictor_steps, cfg.policy_steps, cfg.batch_tasks) == (100_000, 50_000, 8)
    assert (cfg.lr_predictor, cfg.lr_policy, cfg.lr_joint_finetune) == (1e-4, 1e-4, 1e-5)
    assert cfg.gumbel_tau == 0.1 and cfg.checkpoint_every == 500 and cfg.n_val_tasks == 64
    with pytest.raises(ValueError):
        TrainConfig(gumbel_tau=0.0)
    with pytest.raises(ValueError):
        TrainConfig(seq_len=1)


def test_tau_schedule():
    assert tau_at(TrainConfig(), 123) == 0.1
    cfg = TrainConfig(gumbel_tau=1.0, tau_final=0.1, policy_steps=100)
    assert tau_at(cfg, 50) == pytest.approx(0.55)
    assert tau_at(cfg, 100) == pytest.approx(0.1)


# -- Gumbel-softmax -----------------------------------------------------------


def test_gumbel_zero_noise_selects_argmax():
    logits = torch.tensor([[0.3, 2.0, -1.0, 1.9]], dtype=torch.float64)
    g = gumbel_straight_through(logits, torch.ones(1, 4, dtype=torch.bool), 0.1)
    assert g.hard.tolist() == [[0.0, 1.0, 0.0, 0.0]]
    blocked = torch.tensor([[True, False, True, True]])
    assert gumbel_straight_through(logits, blocked, 0.1).hard.tolist() == [[0.0, 0.0, 0.0, 1.0]]


def test_gumbel_sample_structure():
    rng = np.random.default_rng(0)
    logits = torch.as_tensor(rng.standard_normal((500, 5)))
    avail = torch.as_tensor(rng.uniform(size=(500, 5)) < 0.6)
    avail[:, 0] = True
    noise = gumbel_noise(logits.shape, rng)
    g = gumbel_straight_through(logits, avail, 0.5, noise)
    assert torch.all(g.hard.sum(-1) == 1) and torch.all((g.hard == 0) | (g.hard == 1))
    assert torch.all(g.hard[~avail] == 0)
    log_pi = torch.log_softmax(logits.masked_fill(~avail, float("-inf")), -1)
    assert torch.equal(g.hard.argmax(-1), (log_pi + noise).argmax(-1))
    assert torch.equal(g.relaxed.argmax(-1), g.hard.argmax(-1))
    assert torch.max(torch.abs(g.straight_through - g.hard)) <= 1e-15


def test_gumbel_frequencies_match_categorical():
    rng = np.random.default_rng(1)
    n = 100_000
    logits = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64).expand(n, 3)
    g = gumbel_straight_through(logits, torch.ones(n, 3, dtype=torch.bool), 0.1, gumbel_noise((n, 3), rng))
    freq = g.hard.mean(0).numpy()
    assert np.max(np.abs(freq - torch.softmax(logits[0], 0).numpy())) < 0.01


def test_straight_through_gradient_reaches_selected_and_runner_up():
    rng = np.random.default_rng(2)
    logits = torch.tensor([[0.5, 0.2, -0.3, 0.1]], dtype=torch.float64, requires_grad=True)
    g = gumbel_straight_through(logits, torch.ones(1, 4, dtype=torch.bool), 0.5,
                                gumbel_noise((1, 4), rng))
    weights = torch.tensor([[1.0, -2.0, 0.5, 3.0]], dtype=torch.float64)
    (g.straight_through * weights).sum().backward()
    order = torch.argsort(g.relaxed.detach()[0], descending=True)
    assert logits.grad[0, order[0]] != 0 and logits.grad[0, order[1]] != 0


def test_relaxation_sharpens_as_temperature_falls():
    rng = np.random.default_rng(3)
    logits = torch.as_tensor(rng.standard_normal((1000, 4)))
    noise = gumbel_noise((1000, 4), rng)
    avail = torch.ones(1000, 4, dtype=torch.bool)
    dists = []
    for tau in (1.0, 0.5, 0.1, 0.05, 0.01):
        g = gumbel_straight_through(logits, avail, tau, noise)
        dists.append(float((g.relaxed - g.hard).abs().amax(-1).mean()))
    assert all(a > b for a, b in zip(dists, dists[1:]))


# -- states and one-step loss -------------------------------------------------


def test_random_acquired_respects_availability():
    rng = np.random.default_rng(4)
    avail = torch.as_tensor(rng.uniform(size=(200, 5)) < 0.7)
    base = torch.tensor([True, False, False, False, False])
    avail[:, 0] = True
    a = random_acquired(avail, base, rng)
    assert torch.all(a <= avail) and torch.all(a[:, 0])
    b = random_acquired(avail, base, rng, leave_one=True)
    left = (avail & ~b).any(-1)
    has_free = (avail & ~base).any(-1)
    assert torch.equal(left, has_free)
    sizes = (a & ~base).sum(-1)
    assert sizes.min() == 0 and sizes.max() >= 3


def _tiny_classifier(d=3, seed=0):
    torch.manual_seed(seed)
    cfg = ModelConfig(d=d, c=2, kind="classification", model_dim=16, hidden=32, layers=1, heads=2, dtype="float64")
    return SequenceModel(cfg)


def _copy_batch(d=3, seed=0, N=20, m=10):
    src = CopyWorldSource(d=d, N=N)
    ds = [src.sample(np.random.default_rng([seed, i])) for i in range(2)]
    return batch_from_datasets(ds, m, torch.float64)


def test_exact_one_hot_relaxation_matches_hard_path():
    model = _tiny_classifier()
    batch = _copy_batch()
    acquired = torch.zeros_like(batch.q_r)
    predict = batch_predict_fn(model, batch)
    j = 1
    hard = acquired.clone()
    hard[..., j] = True
    onehot = torch.zeros(acquired.shape, dtype=torch.float64)
    onehot[..., j] = 1.0
    relaxed = one_step_loss(predict, batch.kind, acquired, onehot, batch.q_y).detach()
    direct = one_step_loss(predict, batch.kind, hard, torch.zeros_like(onehot), batch.q_y).detach()
    assert float(relaxed) == float(direct)


def test_uniform_relaxation_over_identical_features_matches_hard_choice():
    # a model symmetric in features j and k: tie their input columns in the first embedding layer
    d, j, k = 3, 0, 2
    model = _tiny_classifier(d)
    with torch.no_grad():
        W = model.embed[0].weight
        W[:, k] = W[:, j]
        W[:, d + k] = W[:, d + j]
    batch = _copy_batch(d)
    batch.q_x[..., k] = batch.q_x[..., j]
    acquired = torch.zeros_like(batch.q_r)
    predict = batch_predict_fn(model, batch, with_targets=False)
    vec = torch.zeros(acquired.shape, dtype=torch.float64)
    vec[..., j] = vec[..., k] = 0.5
    ej = torch.zeros_like(vec)
    ej[..., j] = 1.0
    ek = torch.zeros_like(vec)
    ek[..., k] = 1.0
    with torch.no_grad():
        relaxed = float(one_step_loss(predict, batch.kind, acquired, vec, batch.q_y))
        for hard in (ej, ek):
            assert relaxed == pytest.approx(float(one_step_loss(predict, batch.kind, acquired, hard, batch.q_y)), abs=1e-12)


def test_one_step_loss_with_bayes_predictor_is_expected_conditional_entropy():
    rng = np.random.default_rng(5)
    spec = DiscreteWorldSpec(feature_supports=(2, 3, 2), n_classes=3, baseline_support=2, mechanism="mar")
    for _ in range(5):
        world = sample_discrete_world(spec, rng)
        assignment = {0: int(rng.integers(2)), 2: int(rng.integers(3))}
        for j in (1, 3):
            cc = complete_case_table(world, assignment, j)
            vals, ys = np.nonzero(cc >= 0)
            weights = torch.as_tensor(cc[vals, ys])
            d = world.d

            def predict(mask, vals=vals, j=j):
                rows = []
                for r, v in enumerate(vals):
                    a = dict(assignment)
                    if float(mask[r, j - 1]) > 0:
                        a[j] = int(v)
                    rows.append(np.log(np.maximum(label_distribution(world, a), 1e-300)))
                return torch.as_tensor(np.array(rows))

            acquired = torch.zeros(len(vals), d, dtype=torch.bool)
            action = torch.zeros(len(vals), d, dtype=torch.float64)
            action[:, j - 1] = 1.0
            loss = float(one_step_loss(predict, "classification", acquired, action, torch.as_tensor(ys), weights))
            assert abs(loss - expected_conditional_entropy(world, assignment, j)) < 1e-10


def test_policy_step_never_acquires_blocked_features():
    torch.manual_seed(0)
    model = _tiny_classifier(d=3)
    src = DiscreteWorldSource(DiscreteWorldSpec(feature_supports=(2, 2, 2), baseline_support=1,
                                                observe_prob_range=(0.3, 0.6)), N=16)
    rng = np.random.default_rng(6)
    for step in range(20):
        ds = [src.sample(np.random.default_rng([step, i])) for i in range(2)]
        batch = batch_from_datasets(ds, 8, torch.float64)
        acquired = random_acquired(batch.q_r, batch.baseline, rng, leave_one=True)
        loss = policy_step_loss(model, batch, acquired, 0.1, rng)
        assert torch.isfinite(loss)


def test_divergence_check():
    with pytest.raises(DivergenceError, match="step 7"):
        _check(torch.tensor(float("nan")), 7, "predictor")


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = _tiny_classifier()
    save_checkpoint(tmp_path / "m.ntc", model, {"step": 3, "val_loss": 0.5})
    back, meta = load_checkpoint(tmp_path / "m.ntc", expected_hash=model.cfg.config_hash())
    for (k, a), (k2, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and a.numpy().tobytes() == b.numpy().tobytes()
    assert meta["step"] == 3 and meta["config_hash"] == model.cfg.config_hash()


def test_checkpoint_errors(tmp_path):
    model = _tiny_classifier()
    path = tmp_path / "m.ntc"
    save_checkpoint(path, model, {"step": 1, "val_loss": 1.0})
    with pytest.raises(CheckpointError, match="hash mismatch"):
        load_checkpoint(path, expected_hash="0" * 16)
    meta_path = tmp_path / "m.ntc.json"
    meta = json.loads(meta_path.read_text())
    meta_path.write_text(json.dumps({**meta, "format_version": 99}))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    meta_path.write_text(json.dumps(meta))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(path)
    path.write_bytes(dumps_tensors({"nope": np.zeros(2)}))
    with pytest.raises(CheckpointError, match="do not fit"):
        load_checkpoint(path)


def test_best_entry_is_minimum():
    hist = [{"step": 500, "val_loss": 0.9}, {"step": 1000, "val_loss": 0.4}, {"step": 1500, "val_loss": 0.6}]
    assert best_entry(hist)["step"] == 1000


def test_training_writes_best_checkpoint_and_log(tmp_path):
    src = CopyWorldSource(d=3, N=12)
    mcfg = ModelConfig(d=3, c=2, kind="classification", model_dim=16, hidden=32, layers=1, heads=2, dtype="float64")
    tcfg = TrainConfig(predictor_steps=12, policy_steps=6, checkpoint_every=4, n_val_tasks=4, batch_tasks=2,
                       seq_len=12, warmup=2)
    res = pretrain_predictor(mcfg, tcfg, src, tmp_path / "pred")
    assert [h["step"] for h in res.history] == [4, 8, 12]
    model, meta = load_checkpoint(tmp_path / "pred" / "best.ntc")
    assert meta["val_loss"] == min(h["val_loss"] for h in res.history)
    assert meta["history"] == res.history
    lines = (tmp_path / "pred" / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,train_loss,val_loss,lr" and len(lines) == 13
    res2 = pretrain_policy(model, tcfg, src, tmp_path / "pol")
    assert len(res2.history) == 2
    assert (tmp_path / "pol" / "best.ntc").exists()


def test_training_is_bitwise_reproducible(tmp_path):
    src = CopyWorldSource(d=3, N=12)
    mcfg = ModelConfig(d=3, c=2, kind="classification", model_dim=16, hidden=32, layers=1, heads=2, dtype="float64")
    tcfg = TrainConfig(predictor_steps=6, policy_steps=4, checkpoint_every=3, n_val_tasks=2, batch_tasks=2,
                       seq_len=12, warmup=2)
    blobs = []
    for run in ("a", "b"):
        res = pretrain_predictor(mcfg, tcfg, src, tmp_path / run)
        pretrain_policy(res.model, tcfg, src, tmp_path / run / "pol")
        blobs.append([(tmp_path / run / f).read_bytes() for f in ("best.ntc", "train_log.csv", "pol/best.ntc")])
    assert blobs[0] == blobs[1]


def test_train_log_csv_format():
    log = TrainLog()
    log.add(1, 0.5, None, 1e-5)
    log.add(2, 0.25, 0.3, 2e-5)
    assert log.to_csv() == "step,train_loss,val_loss,lr\n1,0.5,,1e-05\n2,0.25,0.3,2e-05\n"
