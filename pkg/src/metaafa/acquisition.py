"""Test-time acquisition: roll out a policy for ``k`` steps on each query row of a
task and record the predictive output after every step.

Context rows are ``[0, m)``; query rows are ``[m, N)``. All queries of a task are
rolled out together, which is exact because queries never attend to each other
in the inference layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

from .baselines import MLPBaseline, MLPConfig, fit_mlp_baseline
from .oracle import GPMarginalOracle, label_distribution, oracle_greedy_policy
from .seqmodel import SequenceModel, batch_from_datasets, predictive_summary
from .taskgen.dataset import REGRESSION, Dataset
from .taskgen.discrete import DiscreteWorld

POLICIES = ("learned", "random", "oracle_greedy", "mlp_greedy")
PREDICTORS = ("model", "mlp", "oracle")
DEFAULT_PREDICTOR = {"learned": "model", "random": "model", "oracle_greedy": "oracle", "mlp_greedy": "mlp"}


class AcquisitionError(ValueError):
    pass


@dataclass
class TaskView:
    """A task split into context and query rows."""

    ds: Dataset
    m: int

    def __post_init__(self):
        if not 1 <= self.m < self.ds.N:
            raise AcquisitionError(f"context size {self.m} leaves no query rows (N={self.ds.N})")

    @property
    def query_rows(self) -> np.ndarray:
        return np.arange(self.m, self.ds.N)

    @cached_property
    def world(self) -> DiscreteWorld | None:
        w = self.ds.meta.get("world")
        return None if w is None else DiscreteWorld.from_dict(w)

    @property
    def gp_hp(self) -> dict | None:
        return self.ds.meta if self.ds.meta.get("prior") == "gp" else None


# -- predictors ---------------------------------------------------------------


class ModelPredictor:
    def __init__(self, model: SequenceModel, view: TaskView):
        self.batch = batch_from_datasets([view.ds], view.m, model.dtype)
        self.model = model
        self.mask = self.batch.mask(with_targets=False)
        self.kind = view.ds.kind

    @torch.no_grad()
    def hidden(self, acquired: np.ndarray):
        a = torch.as_tensor(acquired)[None]
        return self.model.hidden(self.batch.tokens(a, with_targets=False), self.mask, self.batch.q)

    def __call__(self, acquired: np.ndarray) -> dict:
        with torch.no_grad():
            out = self.model.predictor_from_hidden(self.hidden(acquired))[0]
        return predictive_summary(self.kind, out)

    @torch.no_grad()
    def policy_logits(self, acquired: np.ndarray) -> np.ndarray:
        return self.model.policy_from_hidden(self.hidden(acquired))[0].to(torch.float64).numpy()


class MLPPredictor:
    def __init__(self, base: MLPBaseline, view: TaskView):
        rows = view.query_rows
        self.base = base
        self.x = base.features(view.ds.X[rows], view.ds.R[rows])
        self.kind = view.ds.kind

    def __call__(self, acquired: np.ndarray) -> dict:
        return predictive_summary(self.kind, self.base.predict(self.x, torch.as_tensor(acquired)))

    def select(self, acquired: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        return self.base.select(self.x, torch.as_tensor(acquired), torch.as_tensor(candidates)).numpy()


def _assignment(world: DiscreteWorld, x_row: np.ndarray, acquired_row: np.ndarray) -> dict[int, int]:
    cols = world.feature_columns()
    return {cols[c]: int(x_row[c]) for c in np.flatnonzero(acquired_row)}


class DiscreteOraclePredictor:
    """Exact p(y | acquired values) from the task's generating world."""

    def __init__(self, view: TaskView):
        self.world = view.world
        self.x = view.ds.X[view.query_rows]

    def __call__(self, acquired: np.ndarray) -> dict:
        probs = np.stack([label_distribution(self.world, _assignment(self.world, x, a))
                          for x, a in zip(self.x, acquired)])
        return {"probs": probs}

    def select(self, acquired: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        cols = self.world.feature_columns()
        out = []
        for x, a, c in zip(self.x, acquired, candidates):
            j = oracle_greedy_policy(self.world, _assignment(self.world, x, a), [cols[k] for k in np.flatnonzero(c)])
            out.append(cols.index(j))
        return np.asarray(out)


class GPOraclePredictor:
    """GP predictive under the true hyperparameters with unacquired inputs integrated out."""

    def __init__(self, view: TaskView):
        ctx = np.arange(view.m)
        self.oracle = GPMarginalOracle(view.gp_hp, view.ds.X[ctx], view.ds.y[ctx])
        self.x = view.ds.X[view.query_rows]

    def __call__(self, acquired: np.ndarray) -> dict:
        post = self.oracle.predictive(self.x, acquired)
        return {"mean": post.mean, "var": post.var}

    def select(self, acquired: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        return np.asarray([self.oracle.greedy(x, a, np.flatnonzero(c))
                           for x, a, c in zip(self.x, acquired, candidates)])


def oracle_predictor(view: TaskView):
    if view.world is not None:
        return DiscreteOraclePredictor(view)
    if view.gp_hp is not None:
        return GPOraclePredictor(view)
    raise AcquisitionError("oracle policies need a discrete-world or GP task")


# -- rollouts -----------------------------------------------------------------


def truth_probs(view: TaskView, acquired: np.ndarray) -> np.ndarray | None:
    """Ground-truth label probabilities for the current states, when known."""
    if view.world is not None:
        return DiscreteOraclePredictor(view)(acquired)["probs"]
    if view.ds.p_true is not None:
        return view.ds.p_true[view.query_rows]
    return None


def _pred_record(pred: dict, i: int) -> dict:
    if "probs" in pred:
        return {"probs": [float(p) for p in pred["probs"][i]]}
    return {"mean": float(pred["mean"][i]), "var": float(pred["var"][i])}


def acquire(view: TaskView, k: int, policy: str, predictor: str | None = None,
            model: SequenceModel | None = None, rng: np.random.Generator | None = None,
            mlp_cfg: MLPConfig | None = None, task_id: str = "0") -> list[dict]:
    """Roll out ``policy`` for up to ``k`` steps on every query; one record per (query, step)."""
    if policy not in POLICIES:
        raise AcquisitionError(f"unknown policy {policy!r}")
    predictor = predictor or DEFAULT_PREDICTOR[policy]
    if predictor not in PREDICTORS:
        raise AcquisitionError(f"unknown predictor {predictor!r}")
    ds = view.ds
    base = ds.baseline_mask
    acquirable = int((~base).sum())
    if not 0 <= k <= acquirable:
        raise AcquisitionError(f"budget k={k} exceeds the {acquirable} acquirable features")
    rng = rng if rng is not None else np.random.default_rng(0)
    needs_model = predictor == "model" or policy == "learned"
    needs_mlp = predictor == "mlp" or policy == "mlp_greedy"
    needs_oracle = predictor == "oracle" or policy == "oracle_greedy"
    if needs_model and model is None:
        raise AcquisitionError("a checkpoint is needed for the learned policy or model predictor")

    rows = view.query_rows
    R = ds.R[rows]
    acquired = R & base[None, :]

    mlp = None
    if needs_mlp:
        fitted = fit_mlp_baseline(ds, np.arange(view.m), mlp_cfg or MLPConfig(), rng,
                                  train_selector=policy == "mlp_greedy")
        mlp = MLPPredictor(fitted, view)
    model_pred = ModelPredictor(model, view) if needs_model else None
    oracle = oracle_predictor(view) if needs_oracle else None
    predict = {"model": model_pred, "mlp": mlp, "oracle": oracle}[predictor]

    records = []
    active = np.ones(len(rows), dtype=bool)

    def emit(step, actions):
        pred = predict(acquired)
        truth = truth_probs(view, acquired)
        for i, row in enumerate(rows):
            if not active[i]:
                continue
            a = None if actions is None else int(actions[i])
            rec = {
                "task_id": task_id,
                "query": int(row),
                "step": step,
                "action": a,
                "revealed": None if a is None else float(ds.X[row, a]),
                "y": float(ds.y[row]) if ds.kind == REGRESSION else int(ds.y[row]),
                "prediction": _pred_record(pred, i),
                "exhausted": False,
            }
            if truth is not None:
                rec["truth_probs"] = [float(p) for p in truth[i]]
            records.append(rec)

    emit(0, None)
    for t in range(1, k + 1):
        cand = R & ~acquired
        newly_done = active & ~cand.any(-1)
        for i in np.flatnonzero(newly_done):
            records.append({"task_id": task_id, "query": int(rows[i]), "step": t, "action": None,
                            "revealed": None, "exhausted": True})
        active &= ~newly_done
        if not active.any():
            break
        safe = np.where(active[:, None], cand, True)
        if policy == "learned":
            logits = model_pred.policy_logits(acquired)
            actions = np.where(safe, logits, -np.inf).argmax(-1)
        elif policy == "random":
            keys = np.where(safe, rng.uniform(size=safe.shape), -1.0)
            actions = keys.argmax(-1)
        elif policy == "oracle_greedy":
            actions = oracle.select(acquired, safe)
        else:
            actions = mlp.select(acquired, safe)
        act = actions[active]
        if not R[np.flatnonzero(active), act].all():
            raise AssertionError("policy selected a feature that is not available")
        acquired[np.flatnonzero(active), act] = True
        emit(t, actions)
    return records


def records_to_jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def records_from_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
