"""Low-rank weight increments and per-weight adapter stacks.

Shapes follow the input-by-output convention for increments: an adapter on a
layer mapping ``d1`` inputs to ``d2`` outputs holds ``A`` (d1 x r) and ``B``
(r x d2), and contributes ``x @ A @ B`` to the layer output.  The layer's own
weight keeps the usual ``(d2, d1)`` layout and is applied as ``x @ W.T``, so the
merged weight is ``W + sum(delta).T``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np

from olora import tensor as T
from olora.errors import DimensionError, RankError
from olora.tensor import Parameter, Tensor

INIT_STD = 0.02


def _check_rank(d1: int, d2: int, r: int) -> None:
    if r < 1:
        raise RankError(f"rank must be >= 1, got {r}")
    if r > min(d1, d2):
        raise RankError(f"rank {r} exceeds min(d1, d2) = {min(d1, d2)}")
    if 2 * r > min(d1, d2):
        warnings.warn(f"rank {r} is not small relative to {d1}x{d2}", stacklevel=3)


@dataclass(eq=False)
class LoraAdapter:
    A: Parameter
    B: Parameter

    kind = "lora"

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def d1(self) -> int:
        return self.A.shape[0]

    @property
    def d2(self) -> int:
        return self.B.shape[1]

    @property
    def active_rank(self) -> int:
        return self.rank

    def parameters(self) -> list[Parameter]:
        return [self.A, self.B]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def apply(self, x: Tensor) -> Tensor:
        return T.matmul(T.matmul(x, self.A), self.B)

    def delta(self) -> Tensor:
        return T.matmul(self.A, self.B)


@dataclass(eq=False)
class AdaLoraAdapter:
    """SVD-style increment ``A diag(Lambda * mask) B``.

    ``Lambda`` is stored as a ``(1, r)`` row.  Entries whose mask is false are
    multiplied by zero in every forward pass, whatever their stored value.
    """

    A: Parameter
    Lambda: Parameter
    B: Parameter
    mask: np.ndarray = field(default=None)

    kind = "adalora"

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.rank, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def d1(self) -> int:
        return self.A.shape[0]

    @property
    def d2(self) -> int:
        return self.B.shape[1]

    @property
    def active_rank(self) -> int:
        return int(self.mask.sum())

    def parameters(self) -> list[Parameter]:
        return [self.A, self.Lambda, self.B]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def effective_lambda(self) -> Tensor:
        return T.mul(self.Lambda, Tensor(self.mask.astype(np.float64)[None, :]))

    def apply(self, x: Tensor) -> Tensor:
        xa = T.scale_cols(T.matmul(x, self.A), self.effective_lambda())
        return T.matmul(xa, self.B)

    def delta(self) -> Tensor:
        return T.matmul(T.scale_cols(self.A, self.effective_lambda()), self.B)


Adapter = Union[LoraAdapter, AdaLoraAdapter]


def init_lora(d1: int, d2: int, r: int, seed) -> LoraAdapter:
    """Gaussian ``A`` and zero ``B``, so the increment starts at exactly zero."""
    _check_rank(d1, d2, r)
    rng = np.random.default_rng(seed)
    return LoraAdapter(
        A=Parameter(rng.normal(0.0, INIT_STD, (d1, r)), name="A"),
        B=Parameter(np.zeros((r, d2)), name="B"),
    )


def init_adalora(d1: int, d2: int, r: int, seed) -> AdaLoraAdapter:
    """Gaussian ``A`` and ``B`` with ``Lambda = 0`` and every triplet active."""
    _check_rank(d1, d2, r)
    rng = np.random.default_rng(seed)
    return AdaLoraAdapter(
        A=Parameter(rng.normal(0.0, INIT_STD, (d1, r)), name="A"),
        Lambda=Parameter(np.zeros((1, r)), name="Lambda"),
        B=Parameter(rng.normal(0.0, INIT_STD, (r, d2)), name="B"),
    )


def delta_weight(adapter: Adapter) -> np.ndarray:
    """The ``d1 x d2`` increment as a plain array."""
    return adapter.delta().data


@dataclass(eq=False)
class AdapterStack:
    """Frozen past-task adapters plus at most one trainable adapter."""

    d1: int
    d2: int
    frozen: list = field(default_factory=list)
    active: Adapter | None = None

    def __iter__(self) -> Iterator[Adapter]:
        yield from self.frozen
        if self.active is not None:
            yield self.active

    def __len__(self) -> int:
        return len(self.frozen) + (self.active is not None)

    def clear(self) -> None:
        self.frozen = []
        self.active = None


def freeze_and_extend(stack: AdapterStack, new_adapter: Adapter) -> AdapterStack:
    """Freeze the current active adapter (if any) and make ``new_adapter`` active."""
    if (new_adapter.d1, new_adapter.d2) != (stack.d1, stack.d2):
        raise DimensionError(
            f"adapter is {new_adapter.d1}x{new_adapter.d2}, stack expects {stack.d1}x{stack.d2}"
        )
    if stack.active is not None:
        stack.active.set_trainable(False)
        stack.frozen.append(stack.active)
    new_adapter.set_trainable(True)
    stack.active = new_adapter
    return stack


class LinearLayer:
    """``x @ W.T + b`` plus the contributions of every adapter in its stack."""

    def __init__(self, W: np.ndarray, b: np.ndarray | None = None, name: str = ""):
        W = np.asarray(W, dtype=np.float64)
        d2, d1 = W.shape
        if b is None:
            b = np.zeros((1, d2))
        b = np.asarray(b, dtype=np.float64).reshape(1, d2)
        self.name = name
        self.W = Parameter(W, trainable=False, name=f"{name}.W")
        self.b = Parameter(b, trainable=False, name=f"{name}.b")
        self.stack = AdapterStack(d1, d2)

    @property
    def d1(self) -> int:
        return self.W.shape[1]

    @property
    def d2(self) -> int:
        return self.W.shape[0]

    def base_forward(self, x: Tensor) -> Tensor:
        return T.add_row(T.matmul(x, T.transpose(self.W)), self.b)

    def __call__(self, x: Tensor) -> Tensor:
        return adapted_forward(self, x)


def adapted_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    """Layer output with every stacked increment, without forming ``d1 x d2`` deltas."""
    if x.shape[-1] != layer.d1:
        raise DimensionError(f"{layer.name}: input width {x.shape[-1]} != d1 = {layer.d1}")
    out = layer.base_forward(x)
    for adapter in layer.stack:
        out = T.add(out, adapter.apply(x))
    return out


def merge_stack(layer: LinearLayer, commit: bool = False) -> np.ndarray:
    """Effective weight in the layer's ``(d2, d1)`` layout.

    With ``commit=True`` the merged weight replaces ``W`` and the stack is emptied.
    """
    merged = layer.W.data.copy()
    for adapter in layer.stack:
        merged += delta_weight(adapter).T
    if commit:
        layer.W.data[...] = merged
        layer.stack.clear()
    return merged
