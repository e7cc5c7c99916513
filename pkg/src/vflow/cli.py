"""Command-line experiment runner.

Subcommands: train, eval, generate, ablate, gradcheck, tasks.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import cfm as CF
from . import checkpoint as ckpt
from . import flow as F
from . import metrics as M
from .config import (ExperimentConfig, check_eval_size, config_digest, load_config)
from .data import TASK_NAMES, task_registry
from .errors import CompatibilityError, ConfigError, VFlowError

LONG_COLUMNS = ("digest", "task", "method", "seed", "metric", "value", "param", "param_value", "wall_s")


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------


@dataclass
class Trained:
    method: str
    model: object  # FlowModel or VectorFieldNet
    losses: np.ndarray  # (steps, 3): loss, cvfm, kl
    digest: str
    wall_s: float = 0.0


def train_experiment(cfg: ExperimentConfig, log=None) -> Trained:
    log_every = 500 if log else 0
    start = time.perf_counter()
    if cfg.method == "calmflow":
        res = F.train(cfg.task, cfg.train, log_every=log_every, log=log or print)
        losses = res.losses
        model = res.model
    else:
        res = CF.train_cfm(cfg.task, cfg.cfm, log_every=log_every, log=log or print)
        losses = np.stack([res.losses, res.losses, np.zeros_like(res.losses)], axis=1)
        model = res.net
    return Trained(cfg.method, model, losses, config_digest(cfg), time.perf_counter() - start)


def save_trained(path, cfg: ExperimentConfig, trained: Trained) -> Path:
    meta = {
        "method": trained.method,
        "digest": trained.digest,
        "seed": cfg.seed,
        "config": cfg.training_dict(),
        "model": trained.model.describe(),
        "final_loss": float(trained.losses[-1, 0]),
        "version": __version__,
    }
    return ckpt.save(path, trained.model.params, meta)


def load_trained(path) -> tuple[str, object, dict]:
    params, meta = ckpt.load(path)
    if "method" not in meta or "model" not in meta:
        raise CompatibilityError(f"checkpoint {path} has no configuration sidecar")
    if meta["method"] == "calmflow":
        model = F.model_from_state(meta["model"], params)
    else:
        model = CF.net_from_state(meta["model"], params)
    return meta["method"], model, meta


def generate_samples(cfg: ExperimentConfig, method: str, model, n: int, tau: float, seed: int):
    """Generated samples plus per-run bookkeeping (solver failures for the baseline)."""
    rng = np.random.default_rng([seed, 3])
    if method == "calmflow":
        labels = None
        if cfg.task.conditional:
            # classes drawn uniformly, so the samples target the full mixture
            groups = -(-n // cfg.task.n_trajectories)
            labels = [str(c) for c in rng.integers(0, cfg.task.target.n_modes, size=groups)]
        return F.generate(model, cfg.task, n, tau, rng, label=labels).samples, {}
    gen = CF.generate_cfm(model, cfg.task, n, cfg.eval.solver, rng)
    info = {"solver_failures": gen.n_failed, "mean_evals": float(gen.n_evals.mean())}
    return gen.samples, info


def target_reference(cfg: ExperimentConfig, n: int, seed: int) -> np.ndarray:
    return cfg.task.sample_target(n, np.random.default_rng([seed, 4]))


def evaluate_model(cfg: ExperimentConfig, method: str, model, seed: int, tau: float | None = None,
                   n: int | None = None) -> tuple[dict[str, float], float]:
    n = cfg.eval.n_eval if n is None else n
    check_eval_size(n)
    tau = cfg.eval.tau if tau is None else tau
    start = time.perf_counter()
    samples, info = generate_samples(cfg, method, model, n, tau, seed)
    if samples.shape[1] != cfg.task.dim:
        raise CompatibilityError("generated samples and target live in different dimensions")
    values = M.evaluate(samples, target_reference(cfg, n, seed), cfg.eval.metrics, seed=seed)
    values.update(info)
    return values, time.perf_counter() - start


def check_checkpoint(cfg: ExperimentConfig, meta: dict) -> None:
    """The checkpoint must come from this config (at whatever seed it was trained with)."""
    expected = config_digest(cfg.with_seed(int(meta.get("seed", cfg.seed))))
    if meta.get("digest") != expected:
        raise CompatibilityError(
            f"checkpoint digest {str(meta.get('digest'))[:12]} does not match config digest {expected[:12]}")


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def write_loss_csv(path, losses: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "cvfm", "kl"])
        for i, row in enumerate(losses):
            w.writerow([i, *(repr(float(v)) for v in row)])


def _append_rows(path: Path, header, rows) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(header)
        w.writerows(rows)


def eval_rows(digest: str, task: str, method: str, per_seed: dict[int, dict], walls: dict[int, float],
              metric_names) -> tuple[list[str], list[list]]:
    """Wide rows: one per seed plus an aggregate row whose cells read ``mean±std``."""
    cols = list(metric_names)
    header = ["digest", "task", "method", "seed", *cols, "wall_s"]
    rows = []
    for seed, vals in per_seed.items():
        rows.append([digest, task, method, seed, *(repr(float(vals[c])) for c in cols), f"{walls[seed]:.3f}"])
    agg = []
    for c in cols:
        v = np.array([vals[c] for vals in per_seed.values()], dtype=float)
        agg.append(f"{v.mean():.6g}±{v.std():.6g}")
    w = np.array(list(walls.values()))
    rows.append([digest, task, method, "mean±std", *agg, f"{w.mean():.3f}±{w.std():.3f}"])
    return header, rows


def metric_columns(names) -> list[str]:
    cols = []
    for name in names:
        cols.extend(["r2", "pearson", "spearman"] if name == "corr" else [name])
    return cols


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    trained = train_experiment(cfg, log=print)
    stem = f"{cfg.method}_{trained.digest[:12]}_s{cfg.seed}"
    path = Path(args.checkpoint) if args.checkpoint else out / f"{stem}.ckpt"
    save_trained(path, cfg, trained)
    write_loss_csv(out / f"{stem}_loss.csv", trained.losses)
    print(f"final loss {trained.losses[-1, 0]:.6f}  checkpoint {path}  ({trained.wall_s:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    method, model, meta = load_trained(args.checkpoint)
    check_checkpoint(cfg, meta)
    n = args.n or cfg.eval.n_eval
    check_eval_size(n)
    per_seed, walls = {}, {}
    for seed in cfg.eval.seeds:
        per_seed[seed], walls[seed] = evaluate_model(cfg, method, model, seed, args.tau, n)
    header, rows = eval_rows(meta["digest"], cfg.task.name, method, per_seed, walls,
                             metric_columns(cfg.eval.metrics))
    path = _out_dir(args) / "eval.csv"
    _append_rows(path, header, rows)
    for row in rows:
        print(",".join(str(x) for x in row))
    return 0


def cmd_generate(args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    method, model, meta = load_trained(args.checkpoint)
    cfg = load_config(args.config) if args.config else None
    if cfg is None:
        t = meta["config"]["task"]
        task = task_registry(t["name"], **{k: v for k, v in t.items() if k != "name"})
        cfg = ExperimentConfig(task, method)
    n = args.n or 1000
    tau = cfg.eval.tau if args.tau is None else args.tau
    seed = args.seed if args.seed is not None else 0
    samples, info = generate_samples(cfg, method, model, n, tau, seed)
    path = _out_dir(args) / f"samples_{method}_s{seed}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(samples.shape[1])])
        w.writerows([[repr(float(v)) for v in row] for row in samples])
    print(f"wrote {n} samples to {path}" + (f" ({info})" if info else ""))
    return 0


def ablation_rows(cfg: ExperimentConfig, log=None) -> list[list]:
    """Long-form rows for every (value, seed, metric) of the configured sweep."""
    ab = cfg.ablation
    if ab is None:
        raise ConfigError("config has no ablation section")
    rows = []
    cols = metric_columns(cfg.eval.metrics)

    def emit(run_cfg, seed, values, wall, value):
        d = config_digest(run_cfg)
        for c in cols:
            rows.append([d, run_cfg.task.name, run_cfg.method, seed, c, repr(float(values[c])),
                         ab.param, value, f"{wall:.3f}"])

    for seed in cfg.eval.seeds:
        base = cfg.with_seed(seed)
        if ab.param == "tau":
            trained = train_experiment(base, log)  # temperature acts at inference only
            for value in ab.values:
                vals, wall = evaluate_model(base, trained.method, trained.model, seed, tau=float(value))
                emit(base, seed, vals, wall + trained.wall_s, value)
            continue
        for value in ab.values:
            if ab.param == "beta":
                run_cfg = base.with_beta(float(value))
            else:
                run_cfg = base.with_task(**{ab.param: int(value)})
            trained = train_experiment(run_cfg, log)
            vals, wall = evaluate_model(run_cfg, trained.method, trained.model, seed)
            emit(run_cfg, seed, vals, wall + trained.wall_s, value)
    return rows


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, seeds=(args.seed,)))
    rows = ablation_rows(cfg, log=None)
    path = _out_dir(args) / "ablation.csv"
    _append_rows(path, LONG_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_full_suite

    results = run_full_suite(seed=args.seed or 0)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  cases={r.cases:3d}  max_rel_error={r.max_rel_error:.3e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("gradient check failed for: " + ", ".join(failed))
        return 1
    print("all gradient checks passed")
    return 0


def cmd_tasks(args) -> int:
    for name in TASK_NAMES:
        t = task_registry(name)
        print(f"{name:14s}  D={t.dim:<5d} source={t.source.kind:16s} target={t.target.kind}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "tasks": cmd_tasks,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment YAML file")
        p.add_argument("--checkpoint", help="checkpoint path (written by train, read by eval/generate)")
        p.add_argument("--out", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--tau", type=float, help="sampling temperature override")
        p.add_argument("--n", type=int, help="number of samples")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except VFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
