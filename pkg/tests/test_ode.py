from __future__ import annotations

import math

import numpy as np
import pytest

from vflow.errors import ConfigError, StiffnessError
from vflow.ode import OdeSolveConfig, integrate


def growth(z, t):
    return z


def test_dopri5_exponential():
    res = integrate(growth, np.array([[1.0]]), OdeSolveConfig(rtol=1e-6, atol=1e-6))
    assert abs(res.z[0, 0] - math.e) <= 10 * 1e-6 * math.e
    assert res.n_evals[0] > 0 and not res.failed.any()


@pytest.mark.parametrize("method", ["euler", "rk4", "dopri5"])
def test_zero_field_is_exact(method):
    z0 = np.random.default_rng(0).normal(size=(5, 3))
    res = integrate(lambda z, t: np.zeros_like(z), z0, OdeSolveConfig(method=method))
    np.testing.assert_array_equal(res.z, z0)


def test_rk4_fourth_order():
    errs = []
    for steps in (10, 20, 40):
        z = integrate(growth, np.array([[1.0]]), OdeSolveConfig(method="rk4", steps=steps)).z[0, 0]
        errs.append(abs(z - math.e))
    for a, b in zip(errs, errs[1:]):
        assert 13 <= a / b <= 19


def test_euler_first_order():
    errs = [abs(integrate(growth, np.array([[1.0]]), OdeSolveConfig(method="euler", steps=s)).z[0, 0] - math.e)
            for s in (100, 200)]
    assert 1.8 < errs[0] / errs[1] < 2.2


def test_dopri5_linear_family_meets_tolerance():
    rng = np.random.default_rng(1)
    rtol = 1e-6
    for _ in range(20):
        lam = rng.uniform(-3, 3, size=4)
        z0 = rng.uniform(0.5, 2.0, size=(1, 4))
        res = integrate(lambda z, t: z * lam, z0, OdeSolveConfig(rtol=rtol, atol=1e-9))
        exact = z0 * np.exp(lam)
        assert (np.abs(res.z - exact) <= 10 * rtol * np.abs(exact)).all()


def test_time_dependent_field():
    res = integrate(lambda z, t: np.cos(t)[:, None] * np.ones_like(z), np.zeros((2, 1)),
                    OdeSolveConfig(rtol=1e-8, atol=1e-10))
    np.testing.assert_allclose(res.z, math.sin(1.0), rtol=1e-6)


def test_samples_step_independently():
    # the second column carries each sample's decay rate and stays constant
    z0 = np.array([[1.0, 1.0], [1.0, 40.0]])
    field = lambda z, t: np.stack([-z[:, 1] * z[:, 0], np.zeros(len(z))], axis=1)
    res = integrate(field, z0, OdeSolveConfig())
    assert res.n_evals[1] > res.n_evals[0]
    alone = integrate(field, z0[:1], OdeSolveConfig())
    assert res.z[0].tobytes() == alone.z[0].tobytes()


def test_deterministic():
    z0 = np.random.default_rng(2).normal(size=(10, 2))
    f = lambda z, t: np.sin(z) * t[:, None]
    a, b = integrate(f, z0), integrate(f, z0)
    assert a.z.tobytes() == b.z.tobytes()
    np.testing.assert_array_equal(a.n_evals, b.n_evals)


def test_stiff_problem_exhausts_budget():
    cfg = OdeSolveConfig(rtol=1e-8, atol=1e-8, max_evals=200)
    stiff = lambda z, t: -1e5 * (z - np.cos(t)[:, None])
    res = integrate(stiff, np.zeros((3, 1)), cfg, strict=False)
    assert res.failed.all() and res.n_failed == 3
    assert (res.n_evals <= cfg.max_evals + 7).all()
    with pytest.raises(StiffnessError):
        integrate(stiff, np.zeros((1, 1)), cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        integrate(growth, np.ones((1, 1)), OdeSolveConfig(method="midpoint"))
    with pytest.raises(ConfigError):
        OdeSolveConfig(rtol=0).validate()
