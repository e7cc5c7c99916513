from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from vflow import data as D
from vflow.errors import ContractError, RegistryError


def test_gaussian_moments():
    x = D.sample(D.DistributionSpec("gaussian"), 100_000, seed=0)
    assert np.abs(x.mean(axis=0)).max() < 0.02
    assert np.abs(np.cov(x.T) - np.eye(2)).max() < 0.05


def test_mixture_modes_balanced():
    spec = D.DistributionSpec("gaussian_mixture", n_modes=8)
    n = 8000
    x = D.sample(spec, n, seed=1)
    nearest = np.argmin(((x[:, None] - spec.centers()[None]) ** 2).sum(-1), axis=1)
    counts = np.bincount(nearest, minlength=8)
    p = 1 / 8
    bound = 3 * np.sqrt(n * p * (1 - p))
    assert (counts > 0).all()
    assert np.abs(counts - n * p).max() < bound


def test_mixture_component_std():
    spec = D.DistributionSpec("gaussian_mixture", n_modes=8, std=0.3)
    pts, labels = D.sample_mixture(spec, 100_000, np.random.default_rng(2))
    resid = pts - spec.centers()[labels]
    assert abs(resid.std() - 0.3) / 0.3 < 0.05


def test_moons_without_noise_lie_on_arcs():
    x = D.sample(D.DistributionSpec("two_moons", noise=0.0), 2000, seed=3) + D.MOONS_OFFSET
    upper = np.isclose(np.hypot(x[:, 0], x[:, 1]), 1.0) & (x[:, 1] >= -1e-12)
    lower = np.isclose(np.hypot(x[:, 0] - 1.0, x[:, 1] - 0.5), 1.0) & (x[:, 1] <= 0.5 + 1e-12)
    assert (upper | lower).all()
    assert upper.any() and lower.any()


def test_lift_identity_and_projection():
    pts = np.random.default_rng(4).normal(size=(50, 2))
    np.testing.assert_array_equal(D.lift_to_dim(pts, 2), pts)
    lifted = D.lift_to_dim(pts, 10, fill_std=0.0)
    np.testing.assert_array_equal(lifted[:, :2], pts)
    assert not lifted[:, 2:].any()


def test_rotated_lift_is_isometry():
    pts = np.random.default_rng(5).normal(size=(40, 2))
    lifted = D.lift_to_dim(pts, 20, fill_std=0.1, seed=1)
    rot = D.rotation_matrix(20, 7)
    rotated = D.lift_to_dim(pts, 20, fill_std=0.1, seed=1, rotation=rot)
    np.testing.assert_allclose(pdist(rotated), pdist(lifted), atol=1e-5)
    np.testing.assert_allclose(rot @ rot.T, np.eye(20), atol=1e-12)


@pytest.mark.parametrize("kind", D.KINDS)
@pytest.mark.parametrize("dim", [2, 100])
def test_sampling_reproducible(kind, dim):
    spec = D.DistributionSpec(kind, dim=dim, rotate=dim > 2)
    a, b = D.sample(spec, 64, seed=9), D.sample(spec, 64, seed=9)
    assert a.shape == (64, dim)
    assert a.tobytes() == b.tobytes()


def test_registry_names_and_contents():
    assert len(D.TASK_NAMES) == 12
    task = D.task_registry("g→8g@100")
    assert task.dim == 100
    assert task.source.kind == "gaussian"
    assert task.target.kind == "gaussian_mixture" and task.target.n_modes == 8
    moons = D.task_registry("2moons->8g@2")
    assert moons.name == "2moons→8g@2" and moons.source.kind == "two_moons" and moons.dim == 2
    assert D.task_registry("2g→4g@100").target.n_modes == 4


def test_registry_unknown_lists_names():
    with pytest.raises(RegistryError, match="g→8g@2"):
        D.task_registry("g→9g@2")


def test_task_overrides_and_validation():
    task = D.task_registry("g→8g@2", n_time_points=5, conditional=True)
    assert task.n_time_points == 5 and task.labels == tuple(str(i) for i in range(8))
    with pytest.raises(ContractError):
        D.task_registry("g→2moons@2", conditional=True)
    with pytest.raises(ContractError):
        D.task_registry("g→8g@2", n_time_points=1)


def test_sample_modes():
    spec = D.DistributionSpec("gaussian_mixture", n_modes=4, std=1e-9)
    pts = D.sample_modes(spec, [0, 1, 2, 3], seed=0)
    np.testing.assert_allclose(pts, spec.centers(), atol=1e-6)
