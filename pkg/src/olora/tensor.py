"""Dense float64 arrays with a reverse-mode gradient tape.

Only the handful of primitives the adapters, losses and the toy transformer
need are provided.  Every op checks its output for non-finite values and, when
a :class:`Tape` is active and at least one input requires a gradient, records a
backward closure.  ``Tape.backward`` replays the records in reverse and
accumulates into ``Parameter.grad`` for trainable parameters only.

Arrays are usually 2-D matrices; ``matmul`` and ``row_softmax`` also accept a
leading batch axis so attention can run over a batch of sequences at once.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from olora.errors import DimensionError, NumericError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "as_tensor",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "gelu",
    "elementwise",
    "row_softmax",
    "frobenius_sq",
    "add_row",
    "scale_cols",
    "sum_all",
    "mean_axis",
    "reshape",
    "layer_norm",
    "finite_diff_check",
    "inject_backward_fault",
]

_TAPES: list["Tape"] = []
_FAULTS: set[str] = set()


class Tensor:
    """A float64 array node.  Non-parameter tensors never hold gradients."""

    __slots__ = ("data", "_requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self._requires_grad = requires_grad
        self.name = name

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"{type(self).__name__}{label}(shape={self.shape})"


class Parameter(Tensor):
    """A leaf tensor with a gradient accumulator of the same shape."""

    __slots__ = ("grad", "trainable")

    def __init__(self, data, trainable: bool = True, name: str | None = None):
        super().__init__(data, name=name)
        self.data = self.data.copy()
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable

    @property
    def requires_grad(self) -> bool:
        return self.trainable

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records primitive ops during one forward pass.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded.  After ``backward`` the records are dropped.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Parameter] = {}
        if isinstance(loss, Parameter) and loss.trainable:
            leaves[id(loss)] = loss
        for out, inputs, backward in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if isinstance(inp, Parameter):
                    leaves[key] = inp
        for key, p in leaves.items():
            p.grad += grads[key]
        self.records.clear()


def _finish(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{name} produced a non-finite value")
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out._requires_grad = True
        if name in _FAULTS:
            inner = backward
            backward = lambda g: tuple(None if x is None else 1.5 * x + 1e-3 for x in inner(g))
        _TAPES[-1].record(out, inputs, backward)
    return out


@contextmanager
def inject_backward_fault(*names: str):
    """Corrupt the backward rule of the named ops (negative-control hook)."""
    _FAULTS.update(names)
    try:
        yield
    finally:
        _FAULTS.difference_update(names)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``; a shared leading batch axis is allowed."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish("matmul", ad @ bd, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got {a.shape}")
    return _finish("transpose", np.swapaxes(a.data, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _finish("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _finish("gelu", 0.5 * x * (1.0 + t), (a,), backward)


def elementwise(a: Tensor, kind: str, other: Tensor | float | None = None) -> Tensor:
    """Dispatch helper: ``kind`` is add, sub, mul, relu, gelu or scale."""
    if kind == "relu":
        return relu(a)
    if kind == "gelu":
        return gelu(a)
    if kind == "scale":
        return scale(a, float(other))
    binary = {"add": add, "sub": sub, "mul": mul}
    if kind not in binary:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return binary[kind](a, as_tensor(other))


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _finish("row_softmax", y, (a,), backward)


def frobenius_sq(a: Tensor) -> Tensor:
    """Sum of squared entries, returned as a 0-d tensor."""
    ad = a.data
    return _finish("frobenius_sq", np.asarray(np.sum(ad * ad)), (a,),
                   lambda g: (2.0 * g * ad,))


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a ``(1, n)`` row to every row of ``a`` (bias broadcast)."""
    if row.shape != (1, a.shape[-1]):
        raise DimensionError(f"add_row: row {row.shape} does not fit {a.shape}")
    return _finish("add_row", a.data + row.data, (a, row),
                   lambda g: (g, _unbroadcast(g, row.shape)))


def scale_cols(a: Tensor, row: Tensor) -> Tensor:
    """Multiply column ``k`` of ``a`` by ``row[0, k]``; equals ``a @ diag(row)``."""
    if row.shape != (1, a.shape[-1]):
        raise DimensionError(f"scale_cols: row {row.shape} does not fit {a.shape}")
    ad, rd = a.data, row.data
    return _finish("scale_cols", ad * rd, (a, row),
                   lambda g: (g * rd, _unbroadcast(g * ad, rd.shape)))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _finish("sum_all", np.asarray(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _finish("mean_axis", a.data.mean(axis=axis), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _finish("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Parameter-free normalisation over the last axis."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _finish("layer_norm", xhat, (a,), backward)


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Parameter], h: float = 1e-6) -> float:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` takes no arguments and must read the given parameters.  Returns the
    max over all coordinates of ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
        if not np.isfinite(out.data).all():
            raise NumericError("objective is not finite")
        tape.backward(out)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("objective is not finite under perturbation")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
        p.zero_grad()
    return worst
