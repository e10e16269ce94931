"""Loss terms layered on top of the task loss.

* ``orth_loss``: squared Frobenius norm of ``A_prev.T @ A_new``; zero exactly
  when the column spaces of the two ``A`` matrices are orthogonal.
* ``adalora_reg``: pushes ``A`` towards orthonormal columns and ``B`` towards
  orthonormal rows.
* ``combined_loss``: task loss plus the weighted terms the training mode uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from olora import tensor as T
from olora.adapters import AdaLoraAdapter, AdapterStack, LoraAdapter
from olora.errors import ConfigError, DimensionError
from olora.tensor import Tensor

MODES = ("lora", "o_lora", "adalora", "o_adalora")


@dataclass
class LossBreakdown:
    task_loss: float
    orth_loss: float
    adalora_reg: float
    total: float
    lambda1: float
    lambda2: float
    # the scalar that gets backpropagated; excluded from equality and repr
    objective: Tensor | None = field(default=None, repr=False, compare=False)


def orth_loss(A_prev: Tensor, A_new: Tensor) -> Tensor:
    if A_prev.shape[0] != A_new.shape[0]:
        raise DimensionError(f"orth_loss: row counts differ, {A_prev.shape} vs {A_new.shape}")
    return T.frobenius_sq(T.matmul(T.transpose(A_prev), A_new))


def total_orth_loss(stacks: Iterable[AdapterStack]) -> Tensor:
    """Sum of ``orth_loss(frozen.A, active.A)`` over every stack and frozen adapter."""
    total = Tensor(0.0)
    for stack in stacks:
        if stack.active is None:
            if stack.frozen:
                raise ConfigError("stack has frozen adapters but no active adapter")
            continue
        for past in stack.frozen:
            total = T.add(total, orth_loss(past.A, stack.active.A))
    return total


def adalora_reg(A: Tensor, B: Tensor) -> Tensor:
    r = A.shape[1]
    if B.shape[0] != r:
        raise DimensionError(f"adalora_reg: A has rank {r} but B has {B.shape[0]} rows")
    eye = Tensor(np.eye(r))
    gram_a = T.sub(T.matmul(T.transpose(A), A), eye)
    gram_b = T.sub(T.matmul(B, T.transpose(B)), eye)
    return T.add(T.frobenius_sq(gram_a), T.frobenius_sq(gram_b))


def combined_loss(task_loss: Tensor, stacks, lambda1: float = 0.5, lambda2: float = 0.5,
                  mode: str = "o_lora") -> LossBreakdown:
    if mode not in MODES:
        raise ConfigError(f"unknown loss mode {mode!r}; expected one of {MODES}")
    stacks = list(stacks)
    want = AdaLoraAdapter if mode in ("adalora", "o_adalora") else LoraAdapter
    actives = [s.active for s in stacks if s.active is not None]
    if mode != "lora":
        for a in actives:
            if not isinstance(a, want):
                raise ConfigError(f"mode {mode} needs {want.kind} adapters, found {a.kind}")

    objective = task_loss
    orth = reg = 0.0
    if mode in ("o_lora", "o_adalora"):
        orth_t = total_orth_loss(stacks)
        orth = float(orth_t.data)
        objective = T.add(objective, T.scale(orth_t, lambda1))
    if mode in ("adalora", "o_adalora"):
        reg_t = Tensor(0.0)
        for a in actives:
            reg_t = T.add(reg_t, adalora_reg(a.A, a.B))
        reg = float(reg_t.data)
        objective = T.add(objective, T.scale(reg_t, lambda2))
    task = float(task_loss.data)
    return LossBreakdown(
        task_loss=task,
        orth_loss=orth,
        adalora_reg=reg,
        total=float(objective.data),
        lambda1=lambda1,
        lambda2=lambda2,
        objective=objective,
    )
