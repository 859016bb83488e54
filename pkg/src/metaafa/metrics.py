"""Per-step evaluation metrics over trajectory records and paired method comparisons.

Metrics are averaged over the queries of each task first, then reported as
mean and standard error (sample std / sqrt(n)) across tasks.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict

import numpy as np
from scipy.stats import norm, rankdata

COVERAGE_LEVELS = (0.5, 0.8, 0.9, 0.95)
LOG_2PI = math.log(2.0 * math.pi)


class MetricError(ValueError):
    pass


def auroc(scores, labels) -> float | None:
    """Rank-sum AUROC with ties counted as one half; ``None`` when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def multiclass_auroc(probs: np.ndarray, y: np.ndarray) -> float | None:
    """Binary AUROC on p(class 1); one-vs-rest average over classes present otherwise."""
    probs = np.asarray(probs)
    y = np.asarray(y)
    if probs.shape[1] == 2:
        return auroc(probs[:, 1], y == 1)
    vals = [auroc(probs[:, c], y == c) for c in range(probs.shape[1])]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def kl_divergence(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    pos = truth > 0
    with np.errstate(divide="ignore"):
        log_ratio = np.log(np.where(pos, truth, 1.0)) - np.log(np.where(pos, pred, 1.0))
    return np.where(pos, truth * log_ratio, 0.0).sum(-1)


def interval_coverage(mean, var, y, level: float) -> np.ndarray:
    """Indicator that ``y`` lies in the central ``level`` interval of N(mean, var)."""
    z = norm.ppf(0.5 + level / 2.0)
    return (np.abs(np.asarray(y) - np.asarray(mean)) <= z * np.sqrt(var)).astype(np.float64)


def step_metrics(records: list[dict]) -> dict[str, float]:
    """All applicable metrics for the query records of one task at one step."""
    first = records[0]["prediction"]
    y = np.asarray([r["y"] for r in records])
    out: dict[str, float] = {}
    if "probs" in first:
        P = np.asarray([r["prediction"]["probs"] for r in records], dtype=np.float64)
        y = y.astype(int)
        onehot = np.eye(P.shape[1])[y]
        out["nll"] = float(-np.mean(np.log(P[np.arange(len(y)), y])))
        out["brier"] = float(np.mean(((P - onehot) ** 2).sum(-1)))
        if all("truth_probs" in r for r in records):
            T = np.asarray([r["truth_probs"] for r in records], dtype=np.float64)
            out["kl"] = float(np.mean(kl_divergence(T, P)))
        a = multiclass_auroc(P, y)
        if a is not None:
            out["auroc"] = a
    else:
        mean = np.asarray([r["prediction"]["mean"] for r in records])
        var = np.asarray([r["prediction"]["var"] for r in records])
        out["nll"] = float(np.mean(0.5 * (LOG_2PI + np.log(var) + (y - mean) ** 2 / var)))
        out["mse"] = float(np.mean((y - mean) ** 2))
        for level in COVERAGE_LEVELS:
            out[f"coverage_{level}"] = float(np.mean(interval_coverage(mean, var, y, level)))
    return out


def per_task_metrics(records: list[dict]) -> dict[tuple[str, int], dict[str, float]]:
    """``(task_id, step) -> metrics``; exhausted markers are skipped."""
    groups: dict[tuple[str, int], list[dict]] = defaultdict(list)
    for r in records:
        if r.get("exhausted"):
            continue
        groups[(str(r["task_id"]), int(r["step"]))].append(r)
    return {key: step_metrics(sorted(rs, key=lambda r: r["query"])) for key, rs in sorted(groups.items())}


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def long_rows(method: str, table: dict) -> list[tuple]:
    rows = []
    for (task, step), mets in sorted(table.items()):
        for name in sorted(mets):
            rows.append((method, task, step, name, mets[name]))
    return rows


def summarize(method: str, table: dict) -> list[dict]:
    """Mean and standard error over tasks per (step, metric)."""
    by: dict[tuple[int, str], list[float]] = defaultdict(list)
    for (_, step), mets in table.items():
        for name, v in mets.items():
            by[(step, name)].append(v)
    out = []
    for (step, name) in sorted(by):
        m, se = mean_se(by[(step, name)])
        out.append({"method": method, "step": step, "metric": name, "mean": m, "se": se, "n": len(by[(step, name)])})
    return out


def compare(baseline: dict, method: dict, baseline_name: str = "baseline", method_name: str = "method") -> list[dict]:
    """Paired per-step improvement ``baseline - method`` across shared tasks.

    Both tables must cover the same tasks at each step.
    """
    tasks_b = {t for t, _ in baseline}
    tasks_m = {t for t, _ in method}
    if tasks_b != tasks_m:
        raise MetricError(f"task sets differ: {sorted(tasks_b ^ tasks_m)[:5]}")
    steps = sorted({s for _, s in baseline} & {s for _, s in method})
    out = []
    for step in steps:
        names = set()
        for t in tasks_b:
            if (t, step) in baseline and (t, step) in method:
                names |= set(baseline[(t, step)]) & set(method[(t, step)])
        for name in sorted(names):
            deltas = [baseline[(t, step)][name] - method[(t, step)][name] for t in sorted(tasks_b)
                      if name in baseline.get((t, step), {}) and name in method.get((t, step), {})]
            m, se = mean_se(deltas)
            out.append({"baseline": baseline_name, "method": method_name, "step": step, "metric": name,
                        "delta_mean": m, "delta_se": se, "n": len(deltas)})
    return out


def table_from_long(rows: list[dict]) -> dict[str, dict]:
    """Inverse of :func:`long_rows` for CSV rows read back as dicts; keyed by method."""
    out: dict[str, dict] = defaultdict(dict)
    for r in rows:
        out[r["method"]].setdefault((r["task_id"], int(r["step"])), {})[r["metric"]] = float(r["value"])
    return dict(out)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        if isinstance(row, dict):
            row = [row[h] for h in header]
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


METRICS_HEADER = ["method", "task_id", "step", "metric", "value"]
SUMMARY_HEADER = ["method", "step", "metric", "mean", "se", "n"]
COMPARE_HEADER = ["baseline", "method", "step", "metric", "delta_mean", "delta_se", "n"]


def summary_json(summary: list[dict]) -> str:
    def clean(v):
        return None if isinstance(v, float) and not math.isfinite(v) else v

    return json.dumps([{k: clean(v) for k, v in s.items()} for s in summary], sort_keys=True, indent=1)
