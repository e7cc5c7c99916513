"""Dense tensors with tape-based reverse-mode differentiation.

Tensors are immutable wrappers around row-major numpy arrays. Every primitive
below computes its forward value eagerly and, when a :class:`GradTape` is
active and one of the inputs is tracked by it, appends a record holding the
backward rule. :func:`backward` replays the records in reverse.

Elementwise binary operations accept equal shapes, or a shape that is a
trailing suffix of the other (broadcast over leading batch axes). Nothing else
broadcasts.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_DTYPE = np.float32
_ids = itertools.count()
_TAPES: list["GradTape"] = []


def get_dtype():
    return _DTYPE


@contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported precision {dtype!r}")
    old, _DTYPE = _DTYPE, dtype
    try:
        yield
    finally:
        _DTYPE = old


class Tensor:
    """Immutable N-d array of floats with shape metadata."""

    __slots__ = ("_data", "id", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=_DTYPE)
        arr.flags.writeable = False
        self._data = arr
        self.id = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, name: str | None = None) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(_DTYPE)
        arr.flags.writeable = False
        t._data = arr
        t.id = next(_ids)
        t.name = name
        return t

    # -- inspection ---------------------------------------------------------
    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def dtype(self):
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else self._raise_item()

    def _raise_item(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def tensor(data, name: str | None = None) -> Tensor:
    return Tensor(data, name=name)


def zeros(shape, name: str | None = None) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=_DTYPE), name)


def ones(shape, name: str | None = None) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=_DTYPE), name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class _Record:
    __slots__ = ("out", "inputs", "rule", "op")

    def __init__(self, out, inputs, rule, op):
        self.out = out
        self.inputs = inputs
        self.rule = rule
        self.op = op


class GradTape:
    """Ordered log of primitive applications, used as a context manager.

    Only operations with at least one tracked input are recorded; watched
    leaves are tracked from the moment :meth:`watch` is called.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._tracked: set[int] = set()
        self._watched: dict = {}

    def watch(self, tensors) -> "GradTape":
        if isinstance(tensors, Tensor):
            tensors = {tensors.id: tensors}
        elif not isinstance(tensors, Mapping):
            tensors = {t.id: t for t in tensors}
        for key, t in tensors.items():
            self._watched[key] = t
            self._tracked.add(t.id)
        return self

    @property
    def watched(self) -> dict:
        return dict(self._watched)

    def is_tracked(self, t: Tensor) -> bool:
        return t.id in self._tracked

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _record(self, op, out, inputs, rule) -> None:
        self.records.append(_Record(out, inputs, rule, op))
        self._tracked.add(out.id)


def _emit(op: str, arr: np.ndarray, inputs: tuple, rule) -> Tensor:
    out = Tensor._wrap(arr)
    for tape in _TAPES:
        if any(t.id in tape._tracked for t in inputs):
            tape._record(op, out, inputs, rule)
    return out


def backward(tape: GradTape, loss: Tensor) -> dict:
    """Gradients of a scalar ``loss`` with respect to every watched leaf.

    Returns a mapping keyed like :meth:`GradTape.watch` received its tensors.
    Leaves the loss does not depend on get zero tensors.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.id in tape._tracked:
        grads[loss.id] = np.ones(loss.shape, dtype=loss.dtype)
    for rec in reversed(tape.records):
        g = grads.get(rec.out.id)
        if g is None:
            continue
        in_grads = rec.rule(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or t.id not in tape._tracked:
                continue
            prev = grads.get(t.id)
            grads[t.id] = gi if prev is None else prev + gi
    out = {}
    for key, t in tape._watched.items():
        g = grads.get(t.id)
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        out[key] = Tensor._wrap(np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return out


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not conformable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _emit("subtract", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pair("multiply", a, b)
    ad, bd = a.data, b.data
    return _emit("multiply", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as inf for callers to check
        y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError(f"log of non-positive value (min {x.min():.3g})")
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError(f"sqrt of non-positive value (min {x.min():.3g})")
    y = np.sqrt(x)
    return _emit("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit("square", x * x, (a,), lambda g: (2.0 * g * x,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(u)
    y = 0.5 * x * (1.0 + th)

    def rule(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _emit("gelu", y, (a,), rule)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``.

    Either ``b`` is 2-D and ``a`` has any number of leading batch axes, or
    both operands share identical leading batch axes.
    """
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: shapes {sa} and {sb} are not conformable")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        def rule(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
            return ga, gb
    elif sa[:-2] == sb[:-2]:
        def rule(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    else:
        raise ShapeError(f"matmul: shapes {sa} and {sb} are not conformable")
    return _emit("matmul", ad @ bd, (a, b), rule)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# ---------------------------------------------------------------------------
# Normalisation and activations over the last axis
# ---------------------------------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", y, (a,),
                 lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    x = a.data
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: shapes {a.shape} and {p.shape} are not conformable")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    inputs = (a,) + tuple(p for p in (gain, bias) if p is not None)

    def rule(g):
        gx = g * gain.data if gain is not None else g
        gin = inv * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        out = [gin]
        lead = tuple(range(x.ndim - 1))
        if gain is not None:
            out.append((g * xhat).sum(axis=lead))
        if bias is not None:
            out.append(g.sum(axis=lead))
        return tuple(out)

    return _emit("layer_norm", y, inputs, rule)


# ---------------------------------------------------------------------------
# Reductions and structural ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    y = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(y), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    shape = a.shape
    y = a.data.mean(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("mean", np.asarray(y), (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: shapes {ref} and {t.shape} are not conformable")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=ax)))


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def slice_(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    advanced = _is_advanced(index)
    y = a.data[index]

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _emit("slice", np.array(y), (a,), rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: shapes {old} and {shape} are not conformable") from None
    return _emit("reshape", y, (a,), lambda g: (g.reshape(old),))


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table shape {table.shape} is not 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: ids out of range for table of {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit("embedding", table.data[ids], (table,), rule)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b``; a single vector ``x`` of shape ``(d,)`` is treated as one row."""
    if x.ndim == 1:
        return reshape(linear(reshape(x, (1, x.shape[0])), w, b), (w.shape[1],))
    y = matmul(x, w)
    return y if b is None else add(y, b)


def stack_params(params: Mapping[str, Tensor]) -> int:
    """Total number of scalar entries in a parameter mapping."""
    return int(sum(t.size for t in params.values()))


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
