"""Experiment configuration: YAML parsing with field diagnostics and a stable digest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .cfm import CfmConfig
from .clm import ClmConfig
from .data import FlowTask, task_registry
from .errors import ConfigError, RegistryError
from .flow import TrainConfig
from .metrics import ASSIGNMENT_CAP
from .ode import OdeSolveConfig
from .vae import VaeConfig

METHODS = ("calmflow", "cfm")
METRIC_NAMES = ("mmd", "adaptive_mmd", "w2", "corr", "cluster_kld")
ABLATION_PARAMS = ("tau", "n_time_points", "n_trajectories", "n_space_tokens", "beta")
TASK_FIELDS = ("name", "n_time_points", "n_trajectories", "n_space_tokens", "conditional")


@dataclass(frozen=True)
class EvalConfig:
    metrics: tuple[str, ...] = ("mmd", "w2")
    n_eval: int = 1000
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    tau: float = 0.2
    solver: OdeSolveConfig = field(default_factory=OdeSolveConfig)


@dataclass(frozen=True)
class AblationConfig:
    param: str
    values: tuple


@dataclass(frozen=True)
class ExperimentConfig:
    task: FlowTask
    method: str = "calmflow"
    train: TrainConfig = field(default_factory=TrainConfig)
    cfm: CfmConfig = field(default_factory=CfmConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig | None = None

    def training_dict(self) -> dict:
        """Everything that determines a trained model (and nothing that does not)."""
        task = {k: getattr(self.task, k) for k in TASK_FIELDS}
        out = {"task": task, "method": self.method}
        if self.method == "calmflow":
            t = self.train
            out["model"] = {"clm": t.clm.to_dict(), "vae": t.vae.to_dict()}
            out["train"] = {"batch_size": t.batch_size, "steps": t.steps, "lr": t.lr,
                            "seed": t.seed, "pairing": t.pairing}
        else:
            out["model"] = {"cfm": self.cfm.to_dict()}
        return out

    @property
    def seed(self) -> int:
        return self.train.seed if self.method == "calmflow" else self.cfm.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed), cfm=replace(self.cfm, seed=seed))

    def with_task(self, **kw) -> "ExperimentConfig":
        return replace(self, task=self.task.with_overrides(**kw))

    def with_beta(self, beta: float) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, vae=replace(self.train.vae, beta=float(beta))))


def digest(data: dict) -> str:
    """SHA-256 of the canonical (sorted-key, compact) JSON rendering."""
    text = json.dumps(data, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_digest(cfg: ExperimentConfig) -> str:
    return digest(cfg.training_dict())


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _line_index(node, path=(), out=None) -> dict:
    """Map dotted key paths to 1-based source lines."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            p = path + (str(key.value),)
            out[".".join(p)] = key.start_mark.line + 1
            _line_index(value, p, out)
    return out


class _Reader:
    def __init__(self, lines: dict, source: str):
        self.lines = lines
        self.source = source

    def error(self, path: str, message: str) -> ConfigError:
        key = path
        while key and key not in self.lines:  # fall back to the nearest enclosing key
            key = key.rpartition(".")[0]
        line = self.lines.get(key)
        where = f"{self.source}:{line}" if line else self.source
        return ConfigError(f"{where}: field '{path}': {message}")

    def build(self, cls, values: dict, path: str):
        names = {f.name for f in fields(cls)}
        for key in values:
            if key not in names:
                raise self.error(f"{path}.{key}", f"unknown field; expected one of {sorted(names)}")
        try:
            obj = cls(**values)
            return obj.validate() if hasattr(obj, "validate") else obj
        except (TypeError, ValueError) as exc:
            raise self.error(path, str(exc)) from None


def _mapping(reader: _Reader, data: dict, key: str, path: str | None = None) -> dict:
    value = data.get(key) or {}
    if not isinstance(value, dict):
        raise reader.error(path or key, "expected a mapping")
    return value


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a mapping at the top level")
    r = _Reader(_line_index(node), source)
    top = {"task", "method", "model", "train", "eval", "ablation"}
    for key in data:
        if key not in top:
            raise r.error(key, f"unknown section; expected one of {sorted(top)}")

    task_data = data.get("task")
    if isinstance(task_data, str):
        task_data = {"name": task_data}
    if not isinstance(task_data, dict) or not task_data.get("name"):
        raise r.error("task.name", "missing task name")
    for key in task_data:
        if key not in TASK_FIELDS:
            raise r.error(f"task.{key}", f"unknown field; expected one of {list(TASK_FIELDS)}")
    try:
        task = task_registry(str(task_data["name"]),
                             **{k: v for k, v in task_data.items() if k != "name"})
    except (RegistryError, ValueError, TypeError) as exc:
        raise r.error("task.name", str(exc)) from None

    method = data.get("method", "calmflow")
    if method not in METHODS:
        raise r.error("method", f"expected one of {list(METHODS)}, got {method!r}")

    model = _mapping(r, data, "model")
    for key in model:
        if key not in ("clm", "vae", "cfm"):
            raise r.error(f"model.{key}", "unknown field; expected one of ['cfm', 'clm', 'vae']")
    clm_cfg = r.build(ClmConfig, _mapping(r, model, "clm", "model.clm"), "model.clm")
    vae_cfg = r.build(VaeConfig, _mapping(r, model, "vae", "model.vae"), "model.vae")
    train = dict(_mapping(r, data, "train"))
    cfm_values = dict(_mapping(r, model, "cfm", "model.cfm"))
    # the cfm run shares the train section's seed and schedule unless model.cfm overrides them
    for key in ("seed", "steps", "lr", "batch_size"):
        if key in train and key not in cfm_values and method == "cfm":
            cfm_values[key] = train[key]
    cfm_cfg = r.build(CfmConfig, cfm_values, "model.cfm")
    train_cfg = r.build(TrainConfig, {**train, "clm": clm_cfg, "vae": vae_cfg}, "train")

    ev = dict(_mapping(r, data, "eval"))
    solver = r.build(OdeSolveConfig, _mapping(r, ev, "solver", "eval.solver"), "eval.solver")
    ev["solver"] = solver
    for key in ("metrics", "seeds"):
        if key in ev:
            if not isinstance(ev[key], (list, tuple)) or not ev[key]:
                raise r.error(f"eval.{key}", "expected a non-empty list")
            ev[key] = tuple(ev[key])
    eval_cfg = r.build(EvalConfig, ev, "eval")
    for m in eval_cfg.metrics:
        if m not in METRIC_NAMES:
            raise r.error("eval.metrics", f"unknown metric {m!r}; expected one of {list(METRIC_NAMES)}")
    if eval_cfg.n_eval < 2:
        raise r.error("eval.n_eval", "must be at least 2")
    if eval_cfg.tau < 0:
        raise r.error("eval.tau", "must be non-negative")

    ablation = None
    if data.get("ablation") is not None:
        ab = _mapping(r, data, "ablation")
        for key in ab:
            if key not in ("param", "values"):
                raise r.error(f"ablation.{key}", "unknown field; expected one of ['param', 'values']")
        if ab.get("param") not in ABLATION_PARAMS:
            raise r.error("ablation.param",
                          f"unsupported sweep parameter {ab.get('param')!r}; supported: {list(ABLATION_PARAMS)}")
        values = ab.get("values")
        if not isinstance(values, (list, tuple)) or not values:
            raise r.error("ablation.values", "expected a non-empty list")
        ablation = AblationConfig(ab["param"], tuple(values))

    return ExperimentConfig(task, method, train_cfg, cfm_cfg, eval_cfg, ablation)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def check_eval_size(n: int) -> None:
    if n > ASSIGNMENT_CAP:
        raise ConfigError(f"n_eval={n} exceeds the assignment solver cap of {ASSIGNMENT_CAP}")
