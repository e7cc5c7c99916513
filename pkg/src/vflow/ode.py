"""Fixed-step and adaptive explicit Runge-Kutta integrators over batches of states.

Fields are called as ``field(z, t)`` with ``z`` of shape ``(n, D)`` and ``t``
of shape ``(n,)``; the adaptive solver steps every sample on its own clock and
only evaluates the field on samples that are still running.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, StiffnessError

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]
METHODS = ("euler", "rk4", "dopri5")


@dataclass(frozen=True)
class OdeSolveConfig:
    method: str = "dopri5"
    steps: int = 100
    rtol: float = 1e-5
    atol: float = 1e-5
    max_evals: int = 10_000
    t0: float = 0.0
    t1: float = 1.0

    def validate(self) -> "OdeSolveConfig":
        problems = []
        if self.method not in METHODS:
            problems.append(f"method must be one of {METHODS}, got {self.method!r}")
        if self.steps < 1:
            problems.append("steps must be at least 1")
        if not (self.rtol > 0 and self.atol > 0):
            problems.append("rtol and atol must be positive")
        if self.max_evals < 1:
            problems.append("max_evals must be positive")
        if not self.t1 > self.t0:
            problems.append("t1 must exceed t0")
        if problems:
            raise ConfigError("invalid OdeSolveConfig: " + "; ".join(problems))
        return self


@dataclass
class OdeResult:
    z: np.ndarray  # (n, D) state at t1 (or where the solve stopped)
    n_evals: np.ndarray  # (n,) field evaluations spent on each sample
    failed: np.ndarray  # (n,) True where the evaluation budget ran out
    n_accepted: np.ndarray | None = None
    n_rejected: np.ndarray | None = None

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())

    def raise_on_failure(self) -> "OdeResult":
        if self.failed.any():
            raise StiffnessError(
                f"{self.n_failed} of {len(self.failed)} samples exhausted the evaluation budget")
        return self


def _call(f: Field, z: np.ndarray, t) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
    return np.asarray(f(z, t), dtype=np.float64)


def _fixed(f: Field, z: np.ndarray, cfg: OdeSolveConfig) -> OdeResult:
    h = (cfg.t1 - cfg.t0) / cfg.steps
    per_step = 1 if cfg.method == "euler" else 4
    for i in range(cfg.steps):
        t = cfg.t0 + i * h
        if cfg.method == "euler":
            z = z + h * _call(f, z, t)
        else:
            k1 = _call(f, z, t)
            k2 = _call(f, z + 0.5 * h * k1, t + 0.5 * h)
            k3 = _call(f, z + 0.5 * h * k2, t + 0.5 * h)
            k4 = _call(f, z + h * k3, t + h)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    n = z.shape[0]
    evals = np.full(n, cfg.steps * per_step)
    return OdeResult(z, evals, np.zeros(n, dtype=bool), np.full(n, cfg.steps), np.zeros(n, dtype=int))


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

_SAFETY, _FAC_MIN, _FAC_MAX = 0.9, 0.2, 10.0
_BETA = 0.04  # PI controller weight on the previous error
_ALPHA = 0.2 - 0.75 * _BETA


def _err_norm(e: np.ndarray, y0: np.ndarray, y1: np.ndarray, rtol: float, atol: float) -> np.ndarray:
    sc = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return np.sqrt(np.mean((e / sc) ** 2, axis=1))


def _initial_step(f, z, t, f0, cfg) -> np.ndarray:
    """Per-sample starting step from the local scale of the solution and its derivative."""
    sc = cfg.atol + cfg.rtol * np.abs(z)
    d0 = np.sqrt(np.mean((z / sc) ** 2, axis=1))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2, axis=1))
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    f1 = _call(f, z + h0[:, None] * f0, t + h0)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2, axis=1)) / h0
    dmax = np.maximum(d1, d2)
    h1 = np.where(dmax <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(dmax, 1e-300)) ** 0.2)
    return np.minimum(np.minimum(100 * h0, h1), cfg.t1 - cfg.t0)


def _dopri5(f: Field, z: np.ndarray, cfg: OdeSolveConfig) -> OdeResult:
    n, d = z.shape
    t = np.full(n, cfg.t0)
    k_first = _call(f, z, t)
    evals = np.ones(n, dtype=np.int64)
    h = _initial_step(f, z, t, k_first, cfg)
    evals += 1
    err_prev = np.full(n, 1e-4)
    accepted = np.zeros(n, dtype=np.int64)
    rejected = np.zeros(n, dtype=np.int64)
    last_rejected = np.zeros(n, dtype=bool)
    done = np.zeros(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    while True:
        active = ~done & ~failed
        out_of_budget = active & (evals + 6 > cfg.max_evals)
        failed |= out_of_budget
        active &= ~out_of_budget
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        zi, ti = z[idx], t[idx]
        hi = np.minimum(h[idx], cfg.t1 - ti)
        ks = [k_first[idx]]
        for s in range(1, 7):
            incr = sum(a * k for a, k in zip(_A[s], ks))
            ks.append(_call(f, zi + hi[:, None] * incr, ti + _C[s] * hi))
        evals[idx] += 6
        z_new = zi + hi[:, None] * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err_vec = hi[:, None] * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        err = _err_norm(err_vec, zi, z_new, cfg.rtol, cfg.atol)
        ok = err <= 1.0
        safe_err = np.maximum(err, 1e-10)
        fac = np.where(ok, _SAFETY * safe_err ** -_ALPHA * err_prev[idx] ** _BETA,
                       _SAFETY * safe_err ** -0.2)
        fac_max = np.where(last_rejected[idx], 1.0, _FAC_MAX)
        fac = np.clip(fac, _FAC_MIN, fac_max)

        acc = idx[ok]
        z[acc] = z_new[ok]
        t[acc] = np.where(cfg.t1 - (ti[ok] + hi[ok]) <= 1e-12 * max(1.0, abs(cfg.t1)), cfg.t1, ti[ok] + hi[ok])
        k_first[acc] = ks[6][ok]  # first-same-as-last
        err_prev[acc] = np.maximum(err[ok], 1e-4)
        accepted[acc] += 1
        rej = idx[~ok]
        rejected[rej] += 1
        last_rejected[acc] = False
        last_rejected[rej] = True
        h[idx] = hi * fac
        done |= t >= cfg.t1
    return OdeResult(z, evals, failed, accepted, rejected)


def integrate(f: Field, z0, config: OdeSolveConfig = OdeSolveConfig(), strict: bool = True) -> OdeResult:
    """Solve ``dz/dt = f(z, t)`` from ``config.t0`` to ``config.t1`` for every row of ``z0``.

    With ``strict`` a sample that exhausts ``max_evals`` raises
    :class:`StiffnessError`; otherwise failures are reported in the result.
    """
    config.validate()
    z = np.array(z0, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if config.method == "dopri5":
        res = _dopri5(f, z, config)
    else:
        res = _fixed(f, z, config)
    return res.raise_on_failure() if strict else res
