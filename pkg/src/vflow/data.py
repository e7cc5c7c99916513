"""Seeded toy distributions, the high-dimensional lift, and the task registry."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, RegistryError

KINDS = ("gaussian", "gaussian_mixture", "two_moons")
MOONS_OFFSET = np.array([0.5, 0.25])


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class DistributionSpec:
    """A 2-D (or native D-dim Gaussian) sampler, optionally lifted to ``dim``."""

    kind: str
    dim: int = 2
    n_modes: int = 8
    radius: float = 4.0
    std: float = 0.3
    noise: float = 0.05
    fill_std: float = 0.1
    rotate: bool = False
    rotation_seed: int = 1234

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown distribution kind {self.kind!r}; expected one of {KINDS}")
        if self.dim < 2:
            raise ContractError(f"dim must be at least 2, got {self.dim}")
        if self.kind == "gaussian_mixture" and (self.n_modes < 1 or self.std <= 0):
            raise ContractError("a mixture needs n_modes >= 1 and std > 0")

    def centers(self) -> np.ndarray:
        """Mode centres on the circle of radius ``radius``, the first at angle 0."""
        angles = 2.0 * np.pi * np.arange(self.n_modes) / self.n_modes
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def sample_mixture(spec: DistributionSpec, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """2-D mixture points and the index of the mode each was drawn from."""
    labels = rng.integers(0, spec.n_modes, size=n)
    pts = spec.centers()[labels] + spec.std * rng.standard_normal((n, 2))
    return pts, labels


def sample_moons(n: int, noise: float, rng) -> np.ndarray:
    """Two interleaved half circles of radius 1, centred near the origin."""
    upper = rng.random(n) < 0.5
    theta = np.pi * rng.random(n)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x, y], axis=1) - MOONS_OFFSET
    if noise > 0:
        pts = pts + noise * rng.standard_normal((n, 2))
    return pts


def rotation_matrix(dim: int, seed: int) -> np.ndarray:
    """A fixed seeded orthogonal matrix (QR of a Gaussian matrix, sign-corrected)."""
    a = np.random.default_rng(seed).standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def lift_to_dim(points: np.ndarray, dim: int, fill_std: float = 0.1, seed=0,
                rotation: np.ndarray | None = None) -> np.ndarray:
    """Embed 2-D points in ``dim`` coordinates; extra coordinates are N(0, fill_std^2)."""
    points = np.asarray(points, dtype=np.float64)
    if dim < 2:
        raise ContractError(f"dim must be at least 2, got {dim}")
    n = points.shape[0]
    if dim == 2:
        out = points.copy()
    else:
        fill = fill_std * _rng(seed).standard_normal((n, dim - 2)) if fill_std > 0 else np.zeros((n, dim - 2))
        out = np.concatenate([points, fill], axis=1)
    if rotation is not None:
        out = out @ rotation.T
    return out


def sample(spec: DistributionSpec, n: int, seed=0) -> np.ndarray:
    """``n`` float64 points of dimension ``spec.dim``; bit-identical per (spec, n, seed)."""
    if n < 1:
        raise ContractError(f"n must be at least 1, got {n}")
    rng = _rng(seed)
    if spec.kind == "gaussian":
        return rng.standard_normal((n, spec.dim))
    if spec.kind == "gaussian_mixture":
        pts, _ = sample_mixture(spec, n, rng)
    else:
        pts = sample_moons(n, spec.noise, rng)
    if spec.dim == 2:
        return pts
    rot = rotation_matrix(spec.dim, spec.rotation_seed) if spec.rotate else None
    return lift_to_dim(pts, spec.dim, spec.fill_std, rng, rot)


@dataclass(frozen=True)
class FlowTask:
    name: str
    source: DistributionSpec
    target: DistributionSpec
    n_time_points: int = 10
    n_trajectories: int = 1
    n_space_tokens: int = 1
    conditional: bool = False  # prompt with the target mode index

    def __post_init__(self):
        if self.source.dim != self.target.dim:
            raise ContractError("source and target dimensions differ")
        if self.n_time_points < 2:
            raise ContractError(f"n_time_points must be at least 2, got {self.n_time_points}")
        if self.n_trajectories < 1 or self.n_space_tokens < 1:
            raise ContractError("n_trajectories and n_space_tokens must be positive")
        if self.conditional and self.target.kind != "gaussian_mixture":
            raise ContractError("conditional tasks need a gaussian_mixture target")

    @property
    def dim(self) -> int:
        return self.source.dim

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(str(i) for i in range(self.target.n_modes)) if self.conditional else ()

    def sample_source(self, n: int, rng) -> np.ndarray:
        return sample(self.source, n, rng)

    def sample_target(self, n: int, rng) -> np.ndarray:
        return sample(self.target, n, rng)

    def with_overrides(self, **kw) -> "FlowTask":
        return replace(self, **kw)


def _spec(token: str, dim: int) -> DistributionSpec:
    if token == "g":
        return DistributionSpec("gaussian", dim)
    if token == "2moons":
        return DistributionSpec("two_moons", dim)
    if token.endswith("g") and token[:-1].isdigit():
        return DistributionSpec("gaussian_mixture", dim, n_modes=int(token[:-1]))
    raise RegistryError(f"unknown distribution token {token!r}")


def _registry_names() -> list[str]:
    names = [f"g→{t}@{d}" for t in ("2g", "8g", "2moons") for d in (2, 100, 1000)]
    return names + ["2g→3g@100", "2g→4g@100", "2moons→8g@2"]


TASK_NAMES: tuple[str, ...] = tuple(_registry_names())


def canonical_task_name(name: str) -> str:
    return name.strip().replace("->", "→")


def task_registry(name: str, **overrides) -> FlowTask:
    """Resolve a registry name such as ``"g→8g@100"`` (``"->"`` accepted for ``"→"``)."""
    key = canonical_task_name(name)
    if key not in TASK_NAMES:
        raise RegistryError(f"unknown task {name!r}; valid names: {', '.join(TASK_NAMES)}")
    pair, dim = key.split("@")
    src, tgt = pair.split("→")
    task = FlowTask(key, _spec(src, int(dim)), _spec(tgt, int(dim)))
    return task.with_overrides(**overrides) if overrides else task


def sample_modes(spec: DistributionSpec, modes, seed=0) -> np.ndarray:
    """Mixture points drawn from the given mode indices, one point per entry."""
    if spec.kind != "gaussian_mixture":
        raise ContractError("per-mode sampling needs a gaussian_mixture target")
    rng = _rng(seed)
    modes = np.asarray(modes, dtype=int)
    pts = spec.centers()[modes] + spec.std * rng.standard_normal((modes.size, 2))
    if spec.dim == 2:
        return pts
    rot = rotation_matrix(spec.dim, spec.rotation_seed) if spec.rotate else None
    return lift_to_dim(pts, spec.dim, spec.fill_std, rng, rot)
