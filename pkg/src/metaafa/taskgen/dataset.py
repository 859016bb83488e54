from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..diffkernel import atomic_write_text, dumps_tensors, loads_tensors, atomic_write_bytes

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass
class Dataset:
    """One task's samples.

    ``X`` always holds ground-truth feature values, including entries behind
    ``R == 0``; those are kept for scoring acquisitions and must only reach a
    model through a mask.
    """

    X: np.ndarray
    R: np.ndarray
    y: np.ndarray
    kind: str = REGRESSION
    n_classes: int = 1
    baseline_mask: np.ndarray | None = None
    p_true: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.R = np.asarray(self.R).astype(bool)
        if self.X.ndim != 2 or self.R.shape != self.X.shape:
            raise ValueError("X and R must be N x d with equal shapes")
        if self.kind not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == CLASSIFICATION:
            self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
            if self.n_classes < 2:
                raise ValueError("classification needs n_classes >= 2")
        else:
            self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
            self.n_classes = 1
        if self.y.shape[0] != self.X.shape[0]:
            raise ValueError("y length differs from X rows")
        if self.X.shape[0] < 2:
            raise ValueError("a task needs at least 2 samples")
        if self.baseline_mask is None:
            self.baseline_mask = np.zeros(self.d, dtype=bool)
        self.baseline_mask = np.asarray(self.baseline_mask).astype(bool).reshape(-1)
        if self.baseline_mask.shape[0] != self.d:
            raise ValueError("baseline_mask length differs from d")
        if not self.R[:, self.baseline_mask].all():
            raise ValueError("baseline columns must be fully observed")
        if self.p_true is not None:
            self.p_true = np.asarray(self.p_true, dtype=np.float64)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def label_width(self) -> int:
        return self.n_classes if self.kind == CLASSIFICATION else 1

    def labels_encoded(self) -> np.ndarray:
        """Labels as they enter a token: the value (regression) or a one-hot row."""
        if self.kind == CLASSIFICATION:
            return np.eye(self.n_classes)[self.y]
        return self.y[:, None].copy()

    def observed_X(self) -> np.ndarray:
        """Feature matrix with unobserved entries set to NaN."""
        return np.where(self.R, self.X, np.nan)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return replace(
            self,
            X=self.X[rows],
            R=self.R[rows],
            y=self.y[rows],
            p_true=None if self.p_true is None else self.p_true[rows],
            meta=dict(self.meta),
        )

    def header(self) -> dict:
        return {
            "kind": self.kind,
            "n_classes": int(self.n_classes),
            "d": int(self.d),
            "N": int(self.N),
            "baseline_mask": [int(b) for b in self.baseline_mask],
            "meta": self.meta,
        }


def _fmt(v: float) -> str:
    return repr(float(v))


def dataset_to_csv(ds: Dataset) -> str:
    d = ds.d
    cols = [f"x{j + 1}" for j in range(d)] + [f"r{j + 1}" for j in range(d)] + ["y"]
    cols += [f"x{j + 1}_true" for j in range(d)]
    if ds.p_true is not None:
        cols += [f"p{c}" for c in range(ds.p_true.shape[1])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for i in range(ds.N):
        row = [_fmt(ds.X[i, j]) if ds.R[i, j] else "" for j in range(d)]
        row += [str(int(r)) for r in ds.R[i]]
        row.append(str(int(ds.y[i])) if ds.kind == CLASSIFICATION else _fmt(ds.y[i]))
        row += [_fmt(v) for v in ds.X[i]]
        if ds.p_true is not None:
            row += [_fmt(v) for v in ds.p_true[i]]
        w.writerow(row)
    return buf.getvalue()


def dataset_from_csv(text: str, header: dict) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    cols, body = rows[0], rows[1:]
    idx = {c: k for k, c in enumerate(cols)}
    d = sum(1 for c in cols if c.startswith("r") and c[1:].isdigit())
    N = len(body)
    R = np.array([[int(r[idx[f"r{j + 1}"]]) for j in range(d)] for r in body], dtype=bool)
    has_truth = f"x1_true" in idx
    X = np.zeros((N, d))
    for i, r in enumerate(body):
        for j in range(d):
            cell = r[idx[f"x{j + 1}_true"]] if has_truth else r[idx[f"x{j + 1}"]]
            X[i, j] = float(cell) if cell != "" else np.nan
    if not has_truth and np.isnan(X[R]).any():
        raise ValueError("observed entries must carry a value")
    kind = header.get("kind", REGRESSION)
    y = np.array([float(r[idx["y"]]) for r in body])
    pcols = sorted((c for c in cols if c.startswith("p") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    p_true = np.array([[float(r[idx[c]]) for c in pcols] for r in body]) if pcols else None
    return Dataset(
        X=X,
        R=R,
        y=y,
        kind=kind,
        n_classes=header.get("n_classes", 1),
        baseline_mask=np.array(header.get("baseline_mask", [0] * d), dtype=bool),
        p_true=p_true,
        meta=header.get("meta", {}),
    )


def save_dataset(path: str | Path, ds: Dataset) -> None:
    """Write ``<stem>.csv`` plus a ``<stem>.json`` header sidecar."""
    path = Path(path)
    atomic_write_text(path.with_suffix(".csv"), dataset_to_csv(ds))
    atomic_write_text(path.with_suffix(".json"), json.dumps(ds.header(), sort_keys=True, indent=1))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if path.suffix == ".ntc":
        return load_dataset_binary(path)
    header = json.loads(path.with_suffix(".json").read_text())
    return dataset_from_csv(path.with_suffix(".csv").read_text(), header)


def save_dataset_binary(path: str | Path, ds: Dataset) -> None:
    tensors = {"X": ds.X, "R": ds.R, "y": ds.y.astype(np.float64)}
    if ds.p_true is not None:
        tensors["p_true"] = ds.p_true
    tensors["__header__"] = np.frombuffer(json.dumps(ds.header(), sort_keys=True).encode(), dtype=np.uint8)
    atomic_write_bytes(path, dumps_tensors(tensors))


def load_dataset_binary(path: str | Path) -> Dataset:
    t = loads_tensors(Path(path).read_bytes())
    header = json.loads(t.pop("__header__").tobytes().decode())
    return Dataset(
        X=t["X"],
        R=t["R"],
        y=t["y"],
        kind=header["kind"],
        n_classes=header["n_classes"],
        baseline_mask=np.array(header["baseline_mask"], dtype=bool),
        p_true=t.get("p_true"),
        meta=header["meta"],
    )
