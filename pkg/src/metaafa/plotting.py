"""PNG figures for metric summaries and comparisons (Agg backend, no timestamps)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PNG_META = {"Software": None}


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.png")
    fig.savefig(tmp, dpi=100, metadata=PNG_META)
    plt.close(fig)
    tmp.replace(path)


def _series(rows: list[dict], key: str, value: str, err: str):
    out = defaultdict(lambda: ([], [], []))
    for r in sorted(rows, key=lambda r: (r[key], int(r["step"]))):
        xs, ys, es = out[r[key]]
        xs.append(int(r["step"]))
        ys.append(float(r[value]))
        es.append(float(r[err]))
    return out


def plot_summary(summary: list[dict], out_dir: str | Path) -> list[Path]:
    """One figure per metric: mean +- SE against acquisition step, one line per method."""
    out_dir = Path(out_dir)
    paths = []
    for metric in sorted({s["metric"] for s in summary}):
        rows = [s for s in summary if s["metric"] == metric]
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for method, (xs, ys, es) in sorted(_series(rows, "method", "mean", "se").items()):
            ax.errorbar(xs, ys, yerr=es, marker="o", ms=3, capsize=2, label=method)
        ax.set_xlabel("acquired features")
        ax.set_ylabel(metric)
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        _save(fig, path)
        paths.append(path)
    return paths


def plot_comparison(rows: list[dict], out_dir: str | Path, metric: str = "nll", group: str = "method") -> Path | None:
    """Improvement (baseline minus method) per step with SE bars."""
    rows = [r for r in rows if r["metric"] == metric]
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name, (xs, ys, es) in sorted(_series(rows, group, "delta_mean", "delta_se").items()):
        ax.errorbar(xs, ys, yerr=es, marker="o", ms=3, capsize=2, label=str(name))
    ax.axhline(0.0, color="0.5", lw=0.8)
    ax.set_xlabel("acquired features")
    ax.set_ylabel(f"{metric} improvement")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(out_dir) / f"improvement_{metric}.png"
    _save(fig, path)
    return path
