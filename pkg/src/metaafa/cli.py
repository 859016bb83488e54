"""``afa`` command line: task generation, pretraining, acquisition, evaluation, comparison
and the identification report on discrete worlds."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .acquisition import DEFAULT_PREDICTOR, POLICIES, PREDICTORS, TaskView, acquire, records_from_jsonl, records_to_jsonl
from .config import ConfigError, ExperimentConfig, config_json, load_config
from .diffkernel import atomic_write_text
from .oracle import PositivityError, ZeroProbabilityError, identification_check
from .plotting import plot_comparison, plot_summary
from .taskgen.dataset import Dataset, load_dataset, save_dataset
from .taskgen.discrete import DiscreteWorldSpec, enumerate_assignments, sample_discrete_world
from .trainer import CheckpointError, load_checkpoint, pretrain_policy, pretrain_predictor, task_rng

log = logging.getLogger("metaafa")

STAGE_EVAL_TASKS, STAGE_TRAIN_TASKS, STAGE_ACQUIRE, STAGE_WORLDS = 4, 5, 6, 7


def set_deterministic(enabled: bool = True) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# -- task pools ---------------------------------------------------------------


def make_task(cfg: ExperimentConfig, source, rng, split: str) -> Dataset:
    ds = source.sample(rng)
    if split == "eval" and cfg.eval.query_fully_observed:
        R = ds.R.copy()
        R[cfg.context_size:] = True
        ds = replace(ds, R=R, meta=dict(ds.meta))
    return ds


def generate_tasks(cfg: ExperimentConfig, out_dir: Path) -> dict:
    source = cfg.source()
    if not 1 <= cfg.context_size < cfg.prior.N:
        raise ConfigError(f"context size {cfg.context_size} must lie in [1, N-1]")
    entries = []
    for split, n, stage in (("train", cfg.eval.n_train_tasks, STAGE_TRAIN_TASKS),
                            ("eval", cfg.eval.n_tasks, STAGE_EVAL_TASKS)):
        for i in range(n):
            ds = make_task(cfg, source, task_rng(cfg.seed, stage, 0, i), split)
            task_id = f"{split}_{i:04d}"
            rel = Path("tasks") / split / f"{task_id}.csv"
            save_dataset(out_dir / rel, ds)
            entries.append({"id": task_id, "split": split, "file": str(rel), "seed": [cfg.seed, stage, 0, i],
                            "N": ds.N, "d": ds.d, "kind": ds.kind,
                            "observed_fraction": float(ds.R.mean()), "meta": ds.meta})
    manifest = {"seed": cfg.seed, "config": cfg.to_dict(), "context_size": cfg.context_size, "tasks": entries}
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def task_files(paths: list[str]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.glob("*.csv")) + sorted(p.glob("*.ntc")))
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"task file {p} does not exist")
    if not out:
        raise FileNotFoundError("no task files found")
    return sorted(set(out))


def task_seed(seed: int, task_id: str) -> np.random.Generator:
    """Per-task stream keyed by the task id, so results ignore file order."""
    return np.random.default_rng([seed, STAGE_ACQUIRE, zlib.crc32(task_id.encode())])


def run_acquire(cfg: ExperimentConfig, files: list[Path], k: int, policy: str, predictor: str | None,
                model=None, context_size: int | None = None) -> list[dict]:
    records = []
    m = context_size or cfg.context_size
    for f in files:
        ds = load_dataset(f)
        records += acquire(TaskView(ds, m), k, policy, predictor, model=model,
                           rng=task_seed(cfg.seed, f.stem), mlp_cfg=cfg.mlp, task_id=f.stem)
    return records


def evaluate_records(named: dict[str, list[dict]], out_dir: Path) -> tuple[dict, list[dict]]:
    tables = {name: M.per_task_metrics(recs) for name, recs in named.items()}
    long, summary = [], []
    for name in sorted(tables):
        long += M.long_rows(name, tables[name])
        summary += M.summarize(name, tables[name])
    atomic_write_text(out_dir / "metrics.csv", M.to_csv(M.METRICS_HEADER, long))
    atomic_write_text(out_dir / "summary.csv", M.to_csv(M.SUMMARY_HEADER, summary))
    atomic_write_text(out_dir / "summary.json", M.summary_json(summary))
    plot_summary(summary, out_dir / "figures")
    return tables, summary


def method_name(policy: str, predictor: str | None) -> str:
    return f"{policy}-{predictor or DEFAULT_PREDICTOR[policy]}"


def parse_method(text: str) -> tuple[str, str | None]:
    policy, _, predictor = text.partition("-")
    if policy not in POLICIES or (predictor and predictor not in PREDICTORS):
        raise ConfigError(f"method {text!r} must be <policy>[-<predictor>] with policy in {POLICIES}")
    return policy, predictor or None


# -- identification report ----------------------------------------------------


def identification_rows(spec: DiscreteWorldSpec, n_worlds: int, seed: int) -> list[dict]:
    rows = []
    for w in range(n_worlds):
        world = sample_discrete_world(spec, task_rng(seed, STAGE_WORLDS, 0, w))
        features = list(range(1, world.d + 1))
        for j in features:
            others = [f for f in features if f != j]
            for size in range(len(others) + 1):
                for subset in itertools.combinations(others, size):
                    vars_ = ([0] if world.has_baseline else []) + list(subset)
                    for assignment in enumerate_assignments(world, vars_):
                        try:
                            res = identification_check(world, assignment, j)
                        except (ZeroProbabilityError, PositivityError):
                            continue
                        rows.append({"world_id": w, "assignment": json.dumps(assignment, sort_keys=True),
                                     "j": j, **res})
    return rows


# -- commands -----------------------------------------------------------------


def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


def _model(path: str | None, default: Path):
    p = Path(path) if path else default
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} does not exist")
    model, _ = load_checkpoint(p)
    model.eval()
    return model


def cmd_gen_tasks(cfg, args):
    manifest = generate_tasks(cfg, _out(cfg))
    print(f"wrote {len(manifest['tasks'])} tasks to {_out(cfg) / 'tasks'}")


def cmd_pretrain_predictor(cfg, args):
    torch.manual_seed(cfg.seed)
    out = _out(cfg) / "predictor"
    res = pretrain_predictor(cfg.model_config(), cfg.train, cfg.source(), out)
    atomic_write_text(out / "config.json", config_json(cfg))
    print(f"best validation loss {min(h['val_loss'] for h in res.history)!r}; checkpoint {out / 'best.ntc'}")


def cmd_pretrain_policy(cfg, args):
    model = _model(args.checkpoint, _out(cfg) / "predictor" / "best.ntc")
    model.train()
    out = _out(cfg) / "policy"
    res = pretrain_policy(model, cfg.train, cfg.source(), out)
    atomic_write_text(out / "config.json", config_json(cfg))
    print(f"best validation loss {min(h['val_loss'] for h in res.history)!r}; checkpoint {out / 'best.ntc'}")


def cmd_acquire(cfg, args):
    policy, predictor = args.policy, args.predictor
    needs_model = policy == "learned" or (predictor or DEFAULT_PREDICTOR[policy]) == "model"
    model = _model(args.checkpoint, _out(cfg) / "policy" / "best.ntc") if needs_model else None
    files = task_files(args.tasks or [str(_out(cfg) / "tasks" / "eval")])
    k = cfg.eval.k if args.k is None else args.k
    records = run_acquire(cfg, files, k, policy, predictor, model)
    out = Path(args.out) if args.out else _out(cfg) / "trajectories" / f"{method_name(policy, predictor)}.jsonl"
    atomic_write_text(out, records_to_jsonl(records))
    n_ex = sum(1 for r in records if r.get("exhausted"))
    print(f"wrote {len(records)} records to {out}" + (f" ({n_ex} exhausted before budget)" if n_ex else ""))


def _named_trajectories(items: list[str]) -> dict[str, list[dict]]:
    named = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        named[name] = records_from_jsonl(Path(path).read_text())
    return named


def cmd_evaluate(cfg, args):
    items = args.trajectories or [str(p) for p in sorted((_out(cfg) / "trajectories").glob("*.jsonl"))]
    if not items:
        raise FileNotFoundError("no trajectory files to evaluate")
    out = Path(args.out) if args.out else _out(cfg) / "eval"
    _, summary = evaluate_records(_named_trajectories(items), out)
    for s in summary:
        if s["metric"] == "nll":
            print(f"{s['method']:>24s} step {s['step']}: nll {s['mean']:.4f} +- {s['se']:.4f}")


def cmd_compare(cfg, args):
    out = Path(args.out) if args.out else _out(cfg) / "compare"
    if args.sweep:
        return sweep(cfg, args, out)
    text = Path(args.metrics or _out(cfg) / "eval" / "metrics.csv").read_text()
    tables = M.table_from_long(M.read_csv(text))
    rows = []
    for method in args.methods or sorted(tables):
        if method not in tables or args.baseline not in tables:
            raise M.MetricError(f"metrics for {method!r} or {args.baseline!r} are missing")
        rows += M.compare(tables[args.baseline], tables[method], args.baseline, method)
    atomic_write_text(out / "compare.csv", M.to_csv(M.COMPARE_HEADER, rows))
    plot_comparison(rows, out, args.metric)
    for r in rows:
        if r["metric"] == args.metric:
            print(f"{r['method']:>24s} step {r['step']}: {args.metric} improvement "
                  f"{r['delta_mean']:+.4f} +- {r['delta_se']:.4f}")


def sweep(cfg: ExperimentConfig, args, out: Path):
    """Improvement curves across context sizes and missingness rates."""
    methods = [parse_method(m) for m in (args.methods or ["learned"])]
    base = parse_method(args.baseline)
    needs_model = any(p == "learned" or (q or DEFAULT_PREDICTOR[p]) == "model" for p, q in methods + [base])
    model = _model(args.checkpoint, _out(cfg) / "policy" / "best.ntc") if needs_model else None
    settings = [("context_size", m) for m in cfg.eval.context_grid if 1 <= m < cfg.prior.N]
    if cfg.prior.kind in ("gp", "bnn"):
        settings += [("missing_rate", r) for r in cfg.eval.missing_grid]
    rows = []
    for axis, value in settings:
        sub = cfg
        if axis == "context_size":
            sub = replace(cfg, eval=replace(cfg.eval, context_size=int(value)))
        else:
            sub = replace(cfg, missingness=replace(cfg.missingness, mechanism="mcar", rate=float(value)))
        sub_dir = out / "sweep" / f"{axis}_{value}"
        generate_tasks(replace(sub, eval=replace(sub.eval, n_train_tasks=0)), sub_dir)
        files = task_files([str(sub_dir / "tasks" / "eval")])
        base_table = M.per_task_metrics(run_acquire(sub, files, sub.eval.k, *base, model))
        for policy, predictor in methods:
            table = M.per_task_metrics(run_acquire(sub, files, sub.eval.k, policy, predictor, model))
            for r in M.compare(base_table, table, args.baseline, method_name(policy, predictor)):
                rows.append({"axis": axis, "value": value, **r})
    header = ["axis", "value"] + M.COMPARE_HEADER
    atomic_write_text(out / "sweep.csv", M.to_csv(header, rows))
    for axis in sorted({r["axis"] for r in rows}):
        sel = [dict(r, method=f"{r['method']} {axis}={r['value']}") for r in rows if r["axis"] == axis]
        plot_comparison(sel, out / axis, args.metric)
    print(f"wrote {len(rows)} sweep rows to {out / 'sweep.csv'}")


def cmd_oracle_check(cfg, args):
    spec = DiscreteWorldSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.prior.discrete.items()})
    if args.mechanism:
        spec = replace(spec, mechanism=args.mechanism)
    rows = identification_rows(spec, args.n_worlds, cfg.seed)
    out = Path(args.out) if args.out else _out(cfg) / "identification.csv"
    atomic_write_text(out, M.to_csv(["world_id", "assignment", "j", "full", "complete_case", "gap"], rows))
    worst = max((abs(r["gap"]) for r in rows), default=0.0)
    print(f"{len(rows)} queries over {args.n_worlds} worlds; max |gap| = {worst:.3e}")


COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "pretrain-predictor": cmd_pretrain_predictor,
    "pretrain-policy": cmd_pretrain_policy,
    "acquire": cmd_acquire,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.policy_steps=3000")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="afa", description="Active feature acquisition with in-context models")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-tasks", parents=[common], help="write train/eval task pools and a manifest")
    sub.add_parser("pretrain-predictor", parents=[common], help="train the predictor on random subsets")
    s = sub.add_parser("pretrain-policy", parents=[common], help="train the policy head")
    s.add_argument("--checkpoint", help="predictor checkpoint (default <output_dir>/predictor/best.ntc)")

    s = sub.add_parser("acquire", parents=[common], help="roll out a policy on task files")
    s.add_argument("--checkpoint", help="model checkpoint (default <output_dir>/policy/best.ntc)")
    s.add_argument("--tasks", nargs="*", help="task files or directories (default the eval pool)")
    s.add_argument("--k", type=int, help="acquisition budget (default eval.k)")
    s.add_argument("--policy", choices=POLICIES, default="learned")
    s.add_argument("--predictor", choices=PREDICTORS)
    s.add_argument("--out", help="trajectory JSONL path")

    s = sub.add_parser("evaluate", parents=[common], help="metrics per step from trajectories")
    s.add_argument("trajectories", nargs="*", help="[name=]path.jsonl (default all under <output_dir>/trajectories)")
    s.add_argument("--out", help="output directory")

    s = sub.add_parser("compare", parents=[common], help="paired improvements over a baseline method")
    s.add_argument("--metrics", help="metrics.csv from evaluate")
    s.add_argument("--baseline", default="random-model")
    s.add_argument("--methods", nargs="*")
    s.add_argument("--metric", default="nll")
    s.add_argument("--sweep", action="store_true", help="sweep context size and missingness rate")
    s.add_argument("--checkpoint")
    s.add_argument("--out", help="output directory")

    s = sub.add_parser("oracle-check", parents=[common], help="identification gaps on random discrete worlds")
    s.add_argument("--n-worlds", type=int, default=200)
    s.add_argument("--mechanism", choices=("mar", "mnar", "none"))
    s.add_argument("--out", help="CSV path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        set_deterministic(cfg.deterministic)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointError, FileNotFoundError, M.MetricError, ValueError) as e:
        print(f"afa {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
