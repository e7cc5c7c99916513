"""Volterra flow matching with a causal transformer and a variational head.

Training is teacher forced: every input token is a ground-truth state on the
straight-line path between a source and a target sample, and the model learns
to predict the state at the next grid point. Generation feeds each predicted
state back in as the next input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import clm as C
from . import tensor as T
from . import tokenization as tk
from . import vae as V
from .data import FlowTask, sample_modes
from .errors import (ContractError, GenerationError, NumericalError, SequenceLengthError, ShapeError,
                     TrainingDivergedError)
from .metrics import optimal_matching
from .optim import AdamState, adam_step
from .tensor import GradTape, Tensor, backward

DIVERGENCE_LIMIT = 1e6


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class FlowModel:
    clm: C.ClmConfig
    vae: V.VaeConfig
    d_in: int
    n_space_tokens: int
    n_trajectories: int
    n_time_points: int
    params: dict[str, Tensor] = field(default_factory=dict)
    vocab: tk.PromptVocab | None = None

    @property
    def causal(self) -> C.CausalModel:
        return C.CausalModel(self.clm, self.params)

    @property
    def splitter(self) -> tk.SpatialSplitter:
        return tk.SpatialSplitter.from_params(self.params, self.n_space_tokens)

    @property
    def n_params(self) -> int:
        return T.stack_params(self.params)

    def describe(self) -> dict:
        return {
            "clm": self.clm.to_dict(),
            "vae": self.vae.to_dict(),
            "d_in": self.d_in,
            "n_space_tokens": self.n_space_tokens,
            "n_trajectories": self.n_trajectories,
            "n_time_points": self.n_time_points,
            "vocab": list(self.vocab.words) if self.vocab else None,
        }


def required_seq_len(task: FlowTask, prompt_len: int = 0) -> int:
    """Longest sequence the model sees: states t_0..t_{N-2} of every trajectory plus the prompt."""
    return prompt_len + (task.n_time_points - 1) * task.n_trajectories * task.n_space_tokens


def _longest_prompt(vocab: tk.PromptVocab | None, labels) -> int:
    if vocab is None:
        return 0
    return max(len(tk.encode_prompt(vocab, label)) for label in labels)


def _fan_in_init(name: str, shape, rng) -> Tensor:
    if name.endswith(".b"):
        return Tensor(np.zeros(shape), name=name)
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape), name=name)


def init_model(task: FlowTask, clm_config: C.ClmConfig, vae_config: V.VaeConfig, seed: int) -> FlowModel:
    """Transformer weights at std 0.02; input split and variational heads fan-in scaled."""
    vae_config.validate()
    vocab = tk.PromptVocab.build(task.labels) if task.labels else None
    if vocab is not None and clm_config.vocab_size != len(vocab):
        clm_config = C.ClmConfig(**{**clm_config.to_dict(), "vocab_size": len(vocab)})
    clm_config.validate()
    need = required_seq_len(task, _longest_prompt(vocab, task.labels))
    if need > clm_config.max_seq_len:
        raise SequenceLengthError(f"task needs max_seq_len >= {need}, config has {clm_config.max_seq_len}")
    rng = np.random.default_rng([seed, 0])
    params = C.init_params(clm_config, int(rng.integers(2**31))).params
    d = clm_config.d_model
    extra = tk.splitter_shapes(task.dim, task.n_space_tokens, d)
    extra.update(V.param_shapes(vae_config, d, task.dim))
    for name, shape in extra.items():
        params[name] = _fan_in_init(name, shape, rng)
    return FlowModel(clm_config, vae_config, task.dim, task.n_space_tokens, task.n_trajectories,
                     task.n_time_points, params, vocab)


def check_compatible(model: FlowModel, task: FlowTask) -> None:
    from .errors import CompatibilityError

    mismatches = []
    if model.d_in != task.dim:
        mismatches.append(f"state dimension {model.d_in} vs task {task.dim}")
    if model.n_space_tokens != task.n_space_tokens:
        mismatches.append(f"K={model.n_space_tokens} vs task K={task.n_space_tokens}")
    if model.n_trajectories != task.n_trajectories:
        mismatches.append(f"M={model.n_trajectories} vs task M={task.n_trajectories}")
    if mismatches:
        raise CompatibilityError("model does not match task: " + "; ".join(mismatches))


# ---------------------------------------------------------------------------
# Paths and batches
# ---------------------------------------------------------------------------


def ot_conditional_path(z0, z1, t):
    """``(1 - t) z0 + t z1``; endpoints are returned exactly."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ShapeError(f"path endpoints have shapes {z0.shape} and {z1.shape}")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"path time must lie in [0, 1], got {t}")
    if t == 0.0:
        return z0.copy()
    if t == 1.0:
        return z1.copy()
    return (1.0 - t) * z0 + t * z1


def path_on_grid(z0: np.ndarray, z1: np.ndarray, grid: tk.TimeGrid) -> np.ndarray:
    """``(..., D)`` endpoints -> ``(..., N, D)`` states on the grid."""
    return np.stack([ot_conditional_path(z0, z1, t) for t in grid.points], axis=-2)


@dataclass
class TrainingBatch:
    inputs: np.ndarray  # (B, M, N-1, D): states t_0 .. t_{N-2}
    targets: np.ndarray  # (B, (N-1)*M, D): next states in sequence order
    prompt_ids: np.ndarray | None  # (B, P)
    mask: np.ndarray  # (P + L,) prediction positions
    z0: np.ndarray
    z1: np.ndarray


PAIRINGS = ("independent", "ot")


def build_training_batch(task: FlowTask, batch_size: int, rng, vocab: tk.PromptVocab | None = None,
                         pairing: str = "independent") -> TrainingBatch:
    """Sample source/target pairs and lay out their grid paths.

    Pairs are independent draws unless ``pairing == "ot"``, which re-pairs the
    targets of each trajectory slot across the batch by an exact
    squared-distance assignment.

    Position for time ``t_i`` of trajectory ``m`` predicts that trajectory's
    state at ``t_{i+1}``; predictions are ordered time-major, trajectory-minor
    to match the token order.
    """
    b, m, d = batch_size, task.n_trajectories, task.dim
    z0 = task.sample_source(b * m, rng).reshape(b, m, d)
    prompt_ids = None
    if task.conditional:
        classes = rng.integers(0, task.target.n_modes, size=b)
        z1 = sample_modes(task.target, np.repeat(classes, m), rng).reshape(b, m, d)
        prompt_ids = np.array([tk.encode_prompt(vocab, str(c)) for c in classes])
    else:
        z1 = task.sample_target(b * m, rng).reshape(b, m, d)
        if pairing == "ot":
            # one assignment per trajectory slot, so the pairing minibatch is always B points
            for j in range(m):
                z1[:, j] = z1[optimal_matching(z0[:, j], z1[:, j]), j]
    grid = tk.TimeGrid.uniform(task.n_time_points)
    paths = path_on_grid(z0, z1, grid)  # (B, M, N, D)
    n = task.n_time_points
    targets = np.transpose(paths[:, :, 1:], (0, 2, 1, 3)).reshape(b, (n - 1) * m, d)
    p = 0 if prompt_ids is None else prompt_ids.shape[1]
    mask = np.zeros(p + (n - 1) * m * task.n_space_tokens, dtype=bool)
    mask[tk.prediction_positions(p, (n - 1) * m, task.n_space_tokens)] = True
    return TrainingBatch(paths[:, :, :-1], targets, prompt_ids, mask, z0, z1)


# ---------------------------------------------------------------------------
# Forward pass and losses
# ---------------------------------------------------------------------------


@dataclass
class HeadOutput:
    pred: Tensor  # (B, P', D)
    posterior: V.PosteriorParams
    hidden: Tensor


def hidden_states(model: FlowModel, states: Tensor, prompt_ids=None, rng=None) -> tuple[Tensor, np.ndarray]:
    """Run the transformer over ``(B, M, n, D)`` states; returns hiddens at prediction positions.

    The gathered hiddens are ordered time-major, trajectory-minor: ``(B, n*M, d)``.
    """
    if states.ndim != 4 or states.shape[1] != model.n_trajectories or states.shape[3] != model.d_in:
        raise ShapeError(f"expected states (B, {model.n_trajectories}, n, {model.d_in}), got {states.shape}")
    k = model.n_space_tokens
    tokens = tk.spatial_split(model.splitter, states)  # (B, M, n, K, d)
    seq = tk.flatten_multi_trajectory(tokens)
    prompt = None
    if prompt_ids is not None:
        prompt = C.embed_prompt(model.causal, np.asarray(prompt_ids))
    assembled = tk.assemble_input(prompt, seq, k, model.clm.max_seq_len)
    hidden = C.forward(model.causal, assembled.embeddings, rng)
    positions = np.flatnonzero(assembled.target_mask)
    return T.slice_(hidden, (slice(None), positions)), assembled.target_mask


def predict(model: FlowModel, states: Tensor, tau: float, noise, prompt_ids=None, rng=None) -> HeadOutput:
    hidden, _ = hidden_states(model, states, prompt_ids, rng)
    post = V.encode(model.params, hidden)
    z = V.sample_latent(post, tau, noise)
    return HeadOutput(V.decode(model.params, z), post, hidden)


def _select(x: Tensor, mask) -> Tensor:
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("loss mask selects no positions")
    if mask.shape[0] != x.shape[-2]:
        raise ShapeError(f"mask of length {mask.shape[0]} for {x.shape[-2]} positions")
    return T.slice_(x, (Ellipsis, np.flatnonzero(mask), slice(None)))


def cvfm_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Squared Euclidean error summed over state dims, averaged over (masked) positions and batch."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"cvfm_loss: shapes {pred.shape} and {target.shape} differ")
    diff = _select(T.sub(pred, target), mask)
    return T.mean(T.sum_(T.square(diff), axis=-1))


def mean_kl(posterior: V.PosteriorParams, mask=None) -> Tensor:
    kl = V.kl_to_standard_normal(posterior)  # (..., P)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ContractError("loss mask selects no positions")
        kl = T.slice_(kl, (Ellipsis, np.flatnonzero(mask)))
    return T.mean(kl)


def vcvfm_loss(pred: Tensor, target, mask, posterior: V.PosteriorParams, beta: float) -> Tensor:
    """``cvfm_loss + beta * mean KL`` over the same positions."""
    loss = cvfm_loss(pred, target, mask)
    if beta == 0:
        return loss
    return T.add(loss, T.scale(mean_kl(posterior, mask), float(beta)))


def batch_loss(model: FlowModel, batch: TrainingBatch, noise: np.ndarray, beta: float,
               rng=None) -> tuple[Tensor, Tensor, Tensor]:
    """(total, cvfm, mean KL) for one teacher-forced batch at training temperature 1."""
    out = predict(model, Tensor(batch.inputs), 1.0, noise, batch.prompt_ids, rng)
    cv = cvfm_loss(out.pred, batch.targets)
    kl = mean_kl(out.posterior)
    total = cv if beta == 0 else T.add(cv, T.scale(kl, float(beta)))
    return total, cv, kl


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 3000
    lr: float = 1e-3
    seed: int = 0
    clm: C.ClmConfig = field(default_factory=C.ClmConfig)
    vae: V.VaeConfig = field(default_factory=V.VaeConfig)
    tau_train: float = 1.0
    pairing: str = "ot"

    @property
    def beta(self) -> float:
        return self.vae.beta

    def validate(self) -> "TrainConfig":
        from .errors import ConfigError

        problems = []
        if self.batch_size < 1:
            problems.append("batch_size must be positive")
        if self.steps < 1:
            problems.append("steps must be positive")
        if not self.lr > 0:
            problems.append("lr must be positive")
        if self.pairing not in PAIRINGS:
            problems.append(f"pairing must be one of {PAIRINGS}")
        if self.tau_train != 1.0:
            problems.append("tau_train is fixed at 1")
        if problems:
            raise ConfigError("invalid TrainConfig: " + "; ".join(problems))
        self.clm.validate()
        self.vae.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: FlowModel
    losses: np.ndarray  # (steps, 3): total, cvfm, kl

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1, 0])


BatchHook = Callable[[int, TrainingBatch], None]


def train(task: FlowTask, config: TrainConfig, hook: BatchHook | None = None,
          log_every: int = 0, log=print) -> TrainResult:
    """Adam on the variational loss over freshly sampled batches; deterministic per seed.

    ``hook(step, batch)`` sees every batch before it is fed to the model.
    A non-finite loss aborts with :class:`TrainingDivergedError` carrying the
    last parameters that produced a finite loss.
    """
    config.validate()
    model = init_model(task, config.clm, config.vae, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2]) if config.clm.dropout > 0 else None
    state = AdamState(lr=config.lr)
    losses = np.zeros((config.steps, 3))
    for step in range(config.steps):
        batch = build_training_batch(task, config.batch_size, rng, model.vocab, config.pairing)
        if hook is not None:
            hook(step, batch)
        noise = rng.standard_normal(batch.targets.shape[:2] + (config.vae.d_latent,))
        try:
            # overflow is detected explicitly below, so numpy's warnings add nothing
            with GradTape() as tape, np.errstate(over="ignore", invalid="ignore"):
                tape.watch(model.params)
                total, cv, kl = batch_loss(model, batch, noise, config.beta, drop_rng)
        except NumericalError as exc:
            raise TrainingDivergedError(f"{exc} at step {step}", step=step, last_good=model) from exc
        losses[step] = (total.item(), cv.item(), kl.item())
        if not np.isfinite(losses[step]).all():
            raise TrainingDivergedError(
                f"non-finite loss at step {step}", step=step, last_good=model)
        grads = backward(tape, total)
        model.params = adam_step(state, model.params, grads)
        if log_every and (step % log_every == 0 or step == config.steps - 1):
            log(f"step {step:5d}  loss {losses[step, 0]:.4f}  cvfm {losses[step, 1]:.4f}  kl {losses[step, 2]:.3f}")
    return TrainResult(model, losses)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


@dataclass
class Generation:
    samples: np.ndarray  # (n, D) states at t = 1
    trajectories: np.ndarray  # (n, N, D)


StepHook = Callable[[int, np.ndarray, np.ndarray], None]


def generate(model: FlowModel, task: FlowTask, n_samples: int, tau: float, rng,
             z0: np.ndarray | None = None, label=None, hook: StepHook | None = None) -> Generation:
    """Autoregressive rollout from ``z0 ~ p_0`` over the time grid.

    Samples are drawn in groups of M trajectories; each group shares one
    sequence. At step ``i`` the model reads states ``t_0..t_i`` and emits the
    state at ``t_{i+1}`` for every trajectory; ``hook(i, inputs, new_states)``
    observes each step.
    """
    if n_samples < 1:
        raise ContractError(f"n_samples must be at least 1, got {n_samples}")
    if tau < 0:
        raise ContractError(f"temperature must be non-negative, got {tau}")
    check_compatible(model, task)
    m, d, n_t = model.n_trajectories, model.d_in, task.n_time_points
    groups = -(-n_samples // m)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if z0 is None:
        z0 = task.sample_source(groups * m, rng)
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape[0] < groups * m:
        raise ShapeError(f"need {groups * m} initial states, got {z0.shape[0]}")
    states = z0[: groups * m].reshape(groups, m, 1, d).astype(T.get_dtype())
    prompt_ids = None
    if model.vocab is not None:
        labels = label if isinstance(label, (list, tuple, np.ndarray)) else [label] * groups
        prompt_ids = np.array([tk.encode_prompt(model.vocab, None if lb is None else str(lb)) for lb in labels])
    for i in range(n_t - 1):
        hidden, _ = hidden_states(model, Tensor(states), prompt_ids)
        last = T.slice_(hidden, (slice(None), slice(i * m, (i + 1) * m)))
        post = V.encode(model.params, last)
        noise = rng.standard_normal(last.shape[:-1] + (model.vae.d_latent,)) if tau > 0 else None
        new = V.decode(model.params, V.sample_latent(post, tau, noise)).numpy()
        if not np.isfinite(new).all() or np.abs(new).max() > DIVERGENCE_LIMIT:
            raise GenerationError(f"generation diverged at step {i + 1} (t index {i + 1})")
        if hook is not None:
            hook(i, states.copy(), new.copy())
        states = np.concatenate([states, new[:, :, None, :]], axis=2)
    traj = states.reshape(groups * m, n_t, d)[:n_samples].astype(np.float64)
    return Generation(traj[:, -1], traj)


def model_from_state(desc: dict, params: dict[str, Tensor]) -> FlowModel:
    """Rebuild a model from :meth:`FlowModel.describe` output and its parameters."""
    vocab = tk.PromptVocab(list(desc["vocab"])) if desc.get("vocab") else None
    return FlowModel(C.ClmConfig(**desc["clm"]).validate(), V.VaeConfig(**desc["vae"]).validate(),
                     int(desc["d_in"]), int(desc["n_space_tokens"]), int(desc["n_trajectories"]),
                     int(desc["n_time_points"]), dict(params), vocab)
