"""Variational decoding head: hidden state -> Gaussian posterior -> latent -> next state."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DomainError, NumericalError
from .tensor import Tensor


@dataclass(frozen=True)
class VaeConfig:
    d_latent: int = 16
    d_hidden: int = 32
    beta: float = 0.1

    def validate(self) -> "VaeConfig":
        problems = []
        if self.d_latent < 1:
            problems.append("d_latent must be a positive integer")
        if self.d_hidden < 1:
            problems.append("d_hidden must be a positive integer")
        if self.d_latent > self.d_hidden:
            problems.append(f"d_latent ({self.d_latent}) must not exceed d_hidden ({self.d_hidden})")
        if not self.beta >= 0.0:
            problems.append("beta must be non-negative")
        if problems:
            raise ConfigError("invalid VaeConfig: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PosteriorParams:
    mu: Tensor
    sigma: Tensor
    logvar: Tensor | None = None


_HEADS = ("mu", "logvar", "dec")


def param_shapes(config: VaeConfig, d_model: int, d_out: int) -> dict[str, tuple[int, ...]]:
    h, z = config.d_hidden, config.d_latent
    dims = {"mu": (d_model, z), "logvar": (d_model, z), "dec": (z, d_out)}
    shapes = {}
    for head in _HEADS:
        d_in, d_last = dims[head]
        shapes[f"vae.{head}.fc1.w"] = (d_in, h)
        shapes[f"vae.{head}.fc1.b"] = (h,)
        shapes[f"vae.{head}.fc2.w"] = (h, d_last)
        shapes[f"vae.{head}.fc2.b"] = (d_last,)
    return shapes


def _mlp(params: dict, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.linear(x, params[prefix + "fc1.w"], params[prefix + "fc1.b"]))
    return T.linear(h, params[prefix + "fc2.w"], params[prefix + "fc2.b"])


def _finite(x: Tensor, where: str) -> Tensor:
    if not T.all_finite([x]):
        raise NumericalError(f"non-finite values after {where}")
    return x


def encode(params: dict, hidden: Tensor) -> PosteriorParams:
    _finite(hidden, "encoder input")
    mu = _finite(_mlp(params, "vae.mu.", hidden), "vae.mu head")
    logvar = _finite(_mlp(params, "vae.logvar.", hidden), "vae.logvar head")
    sigma = _finite(T.exp(T.scale(logvar, 0.5)), "exp(0.5 * logvar)")
    return PosteriorParams(mu, sigma, logvar)


def sample_latent(p: PosteriorParams, tau: float, noise) -> Tensor:
    """``z = mu + sqrt(tau) * sigma * noise``; ``tau == 0`` returns ``mu`` itself."""
    if tau < 0:
        raise ContractError(f"temperature must be non-negative, got {tau}")
    if tau == 0:
        return p.mu
    noise = noise if isinstance(noise, Tensor) else Tensor(noise)
    return T.add(p.mu, T.scale(T.mul(p.sigma, noise), float(np.sqrt(tau))))


def decode(params: dict, z: Tensor) -> Tensor:
    return _mlp(params, "vae.dec.", z)


def kl_to_standard_normal(p: PosteriorParams) -> Tensor:
    """Per-position ``sum_d 0.5 (mu^2 + sigma^2 - 1 - ln sigma^2)``; reduces the last axis."""
    if np.any(p.sigma.data <= 0):
        raise DomainError("posterior sigma must be strictly positive")
    terms = T.sub(T.add(T.square(p.mu), T.square(p.sigma)), T.scale(T.log(p.sigma), 2.0))
    return T.scale(T.add(T.sum_(terms, axis=-1), Tensor(-float(p.mu.shape[-1]))), 0.5)
