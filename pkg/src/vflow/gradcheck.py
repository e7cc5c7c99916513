"""Finite-difference gradient oracle and the per-primitive check suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import GradTape, Tensor, backward


def finite_difference_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor,
                               h: float = 1e-3) -> Tensor:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate."""
    if h <= 0:
        raise ContractError(f"step h must be positive, got {h}")
    base = x.numpy().astype(np.float64).reshape(-1)
    grad = np.zeros(base.shape, dtype=np.float64)

    def value(arr):
        out = f(Tensor(arr.reshape(x.shape)))
        return float(out.item() if isinstance(out, Tensor) else out)

    for i in range(base.size):
        orig = base[i]
        base[i] = orig + h
        fp = value(base)
        base[i] = orig - h
        fm = value(base)
        base[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))


def relative_error(a, b) -> float:
    """``||a - b|| / max(||a||, ||b||)``; zero when both vanish."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[..., Tensor], inputs: list[Tensor], h: float = 1e-3,
                    seed: int = 0, oracle_dtype=np.float64) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` maps the input tensors to an output of any shape. Both routes
    contract that output with the same fixed random weights. The tape route
    runs at working precision; the finite-difference route runs at
    ``oracle_dtype`` (float64 by default, so the reference is not dominated by
    rounding noise) and contracts in float64.
    """
    probe = fn(*inputs)
    w = np.random.default_rng(seed).standard_normal(probe.shape)
    with GradTape() as tape:
        tape.watch({i: t for i, t in enumerate(inputs)})
        loss = T.sum_(T.mul(fn(*inputs), Tensor(w)))
    grads = backward(tape, loss)
    worst = 0.0
    for i, x in enumerate(inputs):
        def partial(xi, i=i):
            args = list(inputs)
            args[i] = xi
            return float(np.dot(w.reshape(-1), fn(*args).data.astype(np.float64).reshape(-1)))

        with T.precision(oracle_dtype or T.get_dtype()):
            fd = finite_difference_gradient(partial, x, h)
        worst = max(worst, relative_error(grads[i], fd))
    return worst


def _randn(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _positive(rng, *shape):
    return Tensor(rng.uniform(0.5, 2.0, shape))


def _random_shape(rng, rank, low=2):
    return tuple(int(s) for s in rng.integers(low, 5, size=rank))


def _case_matmul(rng):
    b, n, k, m = _random_shape(rng, 4)
    if rng.random() < 0.5:
        a, w = _randn(rng, b, n, k), _randn(rng, k, m)
    else:
        a, w = _randn(rng, b, n, k), _randn(rng, b, k, m)
    return T.matmul, [a, w]


def _binary(op):
    def case(rng):
        shape = _random_shape(rng, int(rng.integers(1, 4)))
        a = _randn(rng, *shape)
        if len(shape) > 1 and rng.random() < 0.5:
            b = _randn(rng, *shape[1:])  # leading-axis broadcast
        else:
            b = _randn(rng, *shape)
        return op, [a, b]
    return case


def _unary(op, positive=False):
    def case(rng):
        shape = _random_shape(rng, int(rng.integers(1, 4)))
        a = _positive(rng, *shape) if positive else _randn(rng, *shape)
        return op, [a]
    return case


def _case_scale(rng):
    c = float(rng.normal())
    return _unary(lambda x: T.scale(x, c))(rng)


def _case_layer_norm(rng):
    # d >= 3: for two features the normalised output is +-1 whatever the input
    shape = _random_shape(rng, int(rng.integers(1, 4)), low=3)
    d = shape[-1]
    return T.layer_norm, [_randn(rng, *shape), _randn(rng, d), _randn(rng, d)]


def _case_reduce(op):
    def case(rng):
        shape = _random_shape(rng, 3)
        axis = [None, 0, 1, 2, -1, (0, 2)][int(rng.integers(6))]
        keep = bool(rng.integers(2))
        return (lambda x: op(x, axis, keep)), [_randn(rng, *shape)]
    return case


def _case_concat(rng):
    n, d = _random_shape(rng, 2)
    axis = int(rng.integers(2))
    a = _randn(rng, n, d)
    b = _randn(rng, n + 1, d) if axis == 0 else _randn(rng, n, d + 2)
    return (lambda x, y: T.concat([x, y], axis)), [a, b]


_SLICES = [
    (slice(1, None), slice(None), slice(0, 2)),
    (Ellipsis, slice(None, None, 2)),
    (0,),
    (np.array([0, 0, 2]),),
]


def _case_slice(rng):
    n, m, d = _random_shape(rng, 3)
    index = _SLICES[int(rng.integers(len(_SLICES)))]
    return (lambda x: T.slice_(x, index)), [_randn(rng, n + 2, m, d)]


def _case_reshape(rng):
    n, m, d = _random_shape(rng, 3)
    return (lambda x: T.reshape(x, (n * m, d))), [_randn(rng, n, m, d)]


def _case_transpose(rng):
    perm = tuple(int(p) for p in rng.permutation(3))
    return (lambda x: T.transpose(x, perm)), [_randn(rng, *_random_shape(rng, 3))]


def _case_embedding(rng):
    v, d = _random_shape(rng, 2)
    ids = rng.integers(0, v + 2, size=(3, 4))
    return (lambda t: T.embedding(t, ids)), [_randn(rng, v + 2, d)]


PRIMITIVE_CASES: dict[str, Callable] = {
    "matmul": _case_matmul,
    "add": _binary(lambda a, b: T.add(a, b)),
    "multiply": _binary(lambda a, b: T.mul(a, b)),
    "subtract": _binary(lambda a, b: T.sub(a, b)),
    "scale": _case_scale,
    "exp": _unary(lambda a: T.exp(T.scale(a, 0.5))),
    "log": _unary(lambda a: T.log(a), positive=True),
    "sqrt": _unary(lambda a: T.sqrt(a), positive=True),
    "square": _unary(lambda a: T.square(a)),
    "softmax": _unary(lambda a: T.softmax(a)),
    "layer_norm": _case_layer_norm,
    "gelu": _unary(lambda a: T.gelu(a)),
    "sum": _case_reduce(lambda a, ax, k: T.sum_(a, ax, k)),
    "mean": _case_reduce(lambda a, ax, k: T.mean(a, ax, k)),
    "concat": _case_concat,
    "slice": _case_slice,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "embedding": _case_embedding,
}


@dataclass
class GradcheckResult:
    name: str
    cases: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _run_cases(name: str, builder, n_cases: int, seed: int, h: float, tol: float,
               oracle_dtype) -> GradcheckResult:
    worst = 0.0
    for k in range(n_cases):
        rng = np.random.default_rng([seed, k, sum(map(ord, name))])
        fn, inputs = builder(rng)
        worst = max(worst, check_gradients(fn, inputs, h, seed=k, oracle_dtype=oracle_dtype))
    return GradcheckResult(name, n_cases, worst, tol)


def check_primitive(name: str, n_cases: int = 20, seed: int = 0, h: float = 1e-3,
                    tol: float = 1e-3, oracle_dtype=np.float64) -> GradcheckResult:
    return _run_cases(name, PRIMITIVE_CASES[name], n_cases, seed, h, tol, oracle_dtype)


def run_primitive_suite(n_cases: int = 20, seed: int = 0, h: float = 1e-3,
                        tol: float = 1e-3, oracle_dtype=np.float64) -> list[GradcheckResult]:
    return [check_primitive(name, n_cases, seed, h, tol, oracle_dtype) for name in PRIMITIVE_CASES]


# ---------------------------------------------------------------------------
# Whole-model checks
# ---------------------------------------------------------------------------


def _tiny_flow_setup(rng):
    from . import clm as C
    from . import flow as F
    from . import vae as V
    from .data import task_registry

    m = int(rng.integers(1, 3))
    k = int(rng.integers(1, 3))
    task = task_registry("2moons→8g@2", n_time_points=3, n_trajectories=m, n_space_tokens=k)
    clm_cfg = C.ClmConfig(d_model=8, n_layers=2, n_heads=int(rng.choice([1, 2])), d_ff=16, max_seq_len=16)
    vae_cfg = V.VaeConfig(d_latent=4, d_hidden=8, beta=float(rng.uniform(0.1, 1.0)))
    model = F.init_model(task, clm_cfg, vae_cfg, int(rng.integers(1000)))
    # move parameters away from the ones/zeros initial values so every rule is exercised
    model.params = {name: Tensor(p.data + 0.1 * rng.standard_normal(p.shape)) for name, p in model.params.items()}
    batch = F.build_training_batch(task, 2, rng)
    noise = rng.standard_normal(batch.targets.shape[:2] + (vae_cfg.d_latent,))
    return F, V, model, batch, noise


def _case_calmflow_loss(rng):
    """Per-position loss terms ``||pred - target||^2 + beta * KL`` as a function of a few parameters."""
    F, V, model, batch, noise = _tiny_flow_setup(rng)
    names = sorted(model.params)
    chosen = [names[i] for i in rng.choice(len(names), size=3, replace=False)]

    def fn(*subset):
        params = dict(model.params)
        params.update(zip(chosen, subset))
        mdl = F.FlowModel(model.clm, model.vae, model.d_in, model.n_space_tokens, model.n_trajectories,
                          model.n_time_points, params, model.vocab)
        out = F.predict(mdl, Tensor(batch.inputs), 1.0, noise)
        sq = T.sum_(T.square(T.sub(out.pred, Tensor(batch.targets))), axis=-1)
        return T.add(sq, T.scale(V.kl_to_standard_normal(out.posterior), model.vae.beta))

    return fn, [model.params[n] for n in chosen]


def _case_vae_head(rng):
    from . import vae as V

    cfg = V.VaeConfig(d_latent=3, d_hidden=5)
    d_model, d_out = 4, 2
    params = {n: _randn(rng, *s) for n, s in V.param_shapes(cfg, d_model, d_out).items()}
    params = {n: Tensor(0.5 * p.data) for n, p in params.items()}
    hidden = _randn(rng, 2, 3, d_model)
    noise = rng.standard_normal((2, 3, cfg.d_latent))
    names = sorted(params)

    def fn(h, *ps):
        prm = dict(zip(names, ps))
        return V.decode(prm, V.sample_latent(V.encode(prm, h), 0.7, noise))

    return fn, [hidden] + [params[n] for n in names]


def _case_cfm_loss(rng):
    from . import cfm as CF

    net = CF.init_net(2, CF.CfmConfig(width=8, n_layers=3), int(rng.integers(1000)))
    z0, z1 = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    t = rng.random(5)
    names = sorted(net.params)
    x_t = (1.0 - t)[:, None] * z0 + t[:, None] * z1

    def fn(*ps):
        n2 = CF.VectorFieldNet(net.d_in, net.config, dict(zip(names, ps)))
        return T.sum_(T.square(T.sub(CF.velocity(n2, Tensor(x_t), t), Tensor(z1 - z0))), axis=-1)

    return fn, [net.params[n] for n in names]


MODEL_CASES: dict[str, Callable] = {
    "vae_head": _case_vae_head,
    "calmflow_loss": _case_calmflow_loss,
    "cfm_loss": _case_cfm_loss,
}


def check_model(name: str, n_cases: int = 20, seed: int = 0, h: float = 1e-3,
                tol: float = 1e-3, oracle_dtype=np.float64) -> GradcheckResult:
    return _run_cases(name, MODEL_CASES[name], n_cases, seed, h, tol, oracle_dtype)


def run_full_suite(n_cases: int = 20, seed: int = 0, h: float = 1e-3,
                   tol: float = 1e-3) -> list[GradcheckResult]:
    """Every primitive plus the variational head, the full flow loss and the baseline loss."""
    results = run_primitive_suite(n_cases, seed, h, tol)
    results += [check_model(name, n_cases, seed, h, tol) for name in MODEL_CASES]
    return results
