"""Conditional flow matching baseline: an MLP velocity field integrated with an ODE solver."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import FlowTask
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .metrics import optimal_matching
from .ode import OdeResult, OdeSolveConfig, integrate
from .optim import AdamState, adam_step
from .tensor import GradTape, Tensor, backward


@dataclass(frozen=True)
class CfmConfig:
    width: int = 1024
    n_layers: int = 4  # linear layers; n_layers - 1 hidden activations
    batch_size: int = 256
    steps: int = 3000
    lr: float = 1e-3
    seed: int = 0
    ot_pairing: bool = False

    def validate(self) -> "CfmConfig":
        problems = []
        if self.width < 1:
            problems.append("width must be positive")
        if self.n_layers < 2:
            problems.append("n_layers must be at least 2")
        if self.batch_size < 1 or self.steps < 1:
            problems.append("batch_size and steps must be positive")
        if not self.lr > 0:
            problems.append("lr must be positive")
        if problems:
            raise ConfigError("invalid CfmConfig: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VectorFieldNet:
    d_in: int
    config: CfmConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def describe(self) -> dict:
        return {"d_in": self.d_in, "cfm": self.config.to_dict()}


def param_shapes(d_in: int, width: int, n_layers: int) -> dict[str, tuple[int, ...]]:
    dims = [d_in + 1] + [width] * (n_layers - 1) + [d_in]
    shapes = {}
    for i in range(n_layers):
        shapes[f"cfm.l{i}.w"] = (dims[i], dims[i + 1])
        shapes[f"cfm.l{i}.b"] = (dims[i + 1],)
    return shapes


def init_net(d_in: int, config: CfmConfig, seed: int | None = None) -> VectorFieldNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    config.validate()
    rng = np.random.default_rng([config.seed if seed is None else seed, 10])
    shapes = param_shapes(d_in, config.width, config.n_layers)
    params = {}
    for name, shape in shapes.items():
        bound = 1.0 / np.sqrt(shapes[name[:-2] + ".w"][0])
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), name=name)
    return VectorFieldNet(d_in, config, params)


def velocity(net: VectorFieldNet, x: Tensor, t) -> Tensor:
    """``v(x, t)`` for ``x`` of shape ``(n, D)`` and ``t`` scalar or ``(n,)``; time enters as a raw feature."""
    if x.shape[-1] != net.d_in:
        raise ShapeError(f"state dimension {x.shape[-1]} does not match the field ({net.d_in})")
    n = x.shape[0]
    tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,)).reshape(n, 1)
    h = T.concat([x, Tensor(tcol)], axis=-1)
    last = net.config.n_layers - 1
    for i in range(net.config.n_layers):
        h = T.linear(h, net.params[f"cfm.l{i}.w"], net.params[f"cfm.l{i}.b"])
        if i < last:
            h = T.gelu(h)
    return h


def cfm_loss(net: VectorFieldNet, z0, z1, t, x_t=None) -> Tensor:
    """Mean over the batch of ``||v(x_t, t) - (z1 - z0)||^2``."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if x_t is None:
        x_t = (1.0 - t)[:, None] * z0 + t[:, None] * z1
    pred = velocity(net, x_t if isinstance(x_t, Tensor) else Tensor(x_t), t)
    return T.mean(T.sum_(T.square(T.sub(pred, Tensor(z1 - z0))), axis=-1))


def sample_pairs(task: FlowTask, batch_size: int, rng, ot_pairing: bool) -> tuple[np.ndarray, np.ndarray]:
    z0 = task.sample_source(batch_size, rng)
    z1 = task.sample_target(batch_size, rng)
    if ot_pairing:
        z1 = z1[optimal_matching(z0, z1)]
    return z0, z1


@dataclass
class CfmTrainResult:
    net: VectorFieldNet
    losses: np.ndarray

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1])


def train_cfm(task: FlowTask, config: CfmConfig, log_every: int = 0, log=print) -> CfmTrainResult:
    """Adam on the flow matching regression with ``t ~ U[0, 1]``; deterministic per seed."""
    net = init_net(task.dim, config)
    rng = np.random.default_rng([config.seed, 11])
    state = AdamState(lr=config.lr)
    losses = np.zeros(config.steps)
    for step in range(config.steps):
        z0, z1 = sample_pairs(task, config.batch_size, rng, config.ot_pairing)
        t = rng.random(config.batch_size)
        x_t = (1.0 - t)[:, None] * z0 + t[:, None] * z1
        with GradTape() as tape:
            tape.watch(net.params)
            loss = cfm_loss(net, z0, z1, t, x_t)
        losses[step] = loss.item()
        if not np.isfinite(losses[step]):
            raise TrainingDivergedError(f"non-finite loss at step {step}", step=step, last_good=net)
        net.params = adam_step(state, net.params, backward(tape, loss))
        if log_every and (step % log_every == 0 or step == config.steps - 1):
            log(f"step {step:5d}  loss {losses[step]:.4f}")
    return CfmTrainResult(net, losses)


def field_fn(net: VectorFieldNet):
    """Wrap a trained net as an ODE right-hand side ``f(z, t)``."""
    def f(z: np.ndarray, t: np.ndarray) -> np.ndarray:
        return velocity(net, Tensor(z), t).numpy()
    return f


@dataclass
class CfmGeneration:
    samples: np.ndarray
    n_evals: np.ndarray  # per sample
    failed: np.ndarray  # per sample

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())


def generate_cfm(net: VectorFieldNet, task: FlowTask, n: int, solve: OdeSolveConfig, rng,
                 z0: np.ndarray | None = None) -> CfmGeneration:
    """Integrate ``z0 ~ p_0`` to ``t = 1``; samples whose solve fails are tallied, not raised."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if z0 is None:
        z0 = task.sample_source(n, rng)
    res: OdeResult = integrate(field_fn(net), z0, solve, strict=False)
    return CfmGeneration(res.z, res.n_evals, res.failed)


def net_from_state(desc: dict, params: dict[str, Tensor]) -> VectorFieldNet:
    return VectorFieldNet(int(desc["d_in"]), CfmConfig(**desc["cfm"]).validate(), dict(params))
