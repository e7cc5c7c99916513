"""Decoder-only causal transformer over continuous input embeddings.

Pre-layer-norm GPT blocks with learned absolute positions. The model never
sees discrete tokens except through the optional prompt-token table; trajectory
tokens arrive already embedded (see :mod:`vflow.tokenization`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, SequenceLengthError
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ClmConfig:
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 1
    d_ff: int = 128
    max_seq_len: int = 256
    vocab_size: int = 0
    dropout: float = 0.0

    def validate(self) -> "ClmConfig":
        problems = []
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be a positive integer")
        if self.vocab_size < 0:
            problems.append("vocab_size must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            problems.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if problems:
            raise ConfigError("invalid ClmConfig: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CausalModel:
    config: ClmConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return T.stack_params(self.params)


def param_shapes(config: ClmConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter of the transformer."""
    d, ff = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {}
    if config.vocab_size:
        shapes["clm.wte"] = (config.vocab_size, d)
    shapes["clm.wpe"] = (config.max_seq_len, d)
    for i in range(config.n_layers):
        p = f"clm.h{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "attn.qkv.w"] = (d, 3 * d)
        shapes[p + "attn.qkv.b"] = (3 * d,)
        shapes[p + "attn.proj.w"] = (d, d)
        shapes[p + "attn.proj.b"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.fc.w"] = (d, ff)
        shapes[p + "mlp.fc.b"] = (ff,)
        shapes[p + "mlp.proj.w"] = (ff, d)
        shapes[p + "mlp.proj.b"] = (d,)
    shapes["clm.lnf.g"] = (d,)
    shapes["clm.lnf.b"] = (d,)
    return shapes


def init_tensor(name: str, shape: tuple[int, ...], rng: np.random.Generator, std: float = 0.02) -> Tensor:
    """Zero-mean normal weights; gains (``.g``) one, biases (``.b``) zero."""
    if name.endswith(".g"):
        arr = np.ones(shape)
    elif name.endswith(".b"):
        arr = np.zeros(shape)
    else:
        arr = rng.normal(0.0, std, size=shape)
    return Tensor(arr, name=name)


def init_params(config: ClmConfig, seed: int) -> CausalModel:
    config.validate()
    rng = np.random.default_rng(seed)
    params = {name: init_tensor(name, shape, rng) for name, shape in param_shapes(config).items()}
    return CausalModel(config, params)


def causal_mask(n: int) -> np.ndarray:
    """``(n, n)`` additive mask: 0 on and below the diagonal, -1e9 above."""
    return np.triu(np.full((n, n), MASK_VALUE, dtype=T.get_dtype()), k=1)


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return T.mul(x, Tensor(keep))


def _attention(x: Tensor, params: dict, prefix: str, n_heads: int, mask: Tensor) -> Tensor:
    b, n, d = x.shape
    dh = d // n_heads
    qkv = T.linear(x, params[prefix + "qkv.w"], params[prefix + "qkv.b"])

    def heads(t):
        if n_heads == 1:
            return t
        return T.transpose(T.reshape(t, (b, n, n_heads, dh)), (0, 2, 1, 3))

    q = heads(qkv[..., :d])
    k = heads(qkv[..., d:2 * d])
    v = heads(qkv[..., 2 * d:])
    scores = T.add(T.scale(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(dh)), mask)
    out = T.matmul(T.softmax(scores), v)
    if n_heads > 1:
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return T.linear(out, params[prefix + "proj.w"], params[prefix + "proj.b"])


def forward(model: CausalModel, embeddings: Tensor, rng=None) -> Tensor:
    """Hidden states for a ``(T, d_model)`` or ``(B, T, d_model)`` embedding sequence.

    Output position ``i`` depends only on inputs ``0..i``. ``rng`` enables
    dropout when the config asks for it; inference passes ``None``.
    """
    cfg = model.config
    params = model.params
    squeeze = embeddings.ndim == 2
    x = T.reshape(embeddings, (1,) + embeddings.shape) if squeeze else embeddings
    n = x.shape[1]
    if n > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    if x.shape[2] != cfg.d_model:
        raise ConfigError(f"embedding width {x.shape[2]} != d_model {cfg.d_model}")
    x = T.add(x, params["clm.wpe"][:n])
    x = _dropout(x, cfg.dropout, rng)
    mask = Tensor(causal_mask(n))
    for i in range(cfg.n_layers):
        p = f"clm.h{i}."
        h = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = T.add(x, _dropout(_attention(h, params, p + "attn.", cfg.n_heads, mask), cfg.dropout, rng))
        h = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = T.gelu(T.linear(h, params[p + "mlp.fc.w"], params[p + "mlp.fc.b"]))
        h = T.linear(h, params[p + "mlp.proj.w"], params[p + "mlp.proj.b"])
        x = T.add(x, _dropout(h, cfg.dropout, rng))
    x = T.layer_norm(x, params["clm.lnf.g"], params["clm.lnf.b"])
    return T.reshape(x, x.shape[1:]) if squeeze else x


def embed_prompt(model: CausalModel, ids) -> Tensor:
    """Look up prompt-token embeddings; ``ids`` may carry a leading batch axis."""
    if "clm.wte" not in model.params:
        raise ConfigError("model has no token table (vocab_size == 0)")
    return T.embedding(model.params["clm.wte"], ids)
