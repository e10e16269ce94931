"""Sensitivity-driven rank budgeting for SVD-style adapters.

Each trainable scalar gets a sensitivity ``|theta * dL/dtheta|`` smoothed by an
EMA, plus an EMA of its deviation from that smoothed value (the uncertainty).
A triplet ``(Lambda[k], A[:, k], B[k, :])`` is scored by the product of the
Lambda importance and the mean importances of its column and row, where an
importance is ``ema_sensitivity * ema_uncertainty``.  The budget shrinks from
``r_init`` to ``r_target`` per weight along a cubic schedule, and only the
top-scoring triplets across all weights stay unmasked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from olora.adapters import AdaLoraAdapter
from olora.errors import RankError, StateError


@dataclass
class _Stats:
    sens: np.ndarray
    unc: np.ndarray


@dataclass
class ImportanceState:
    beta1: float = 0.85
    beta2: float = 0.85
    stats: dict[str, dict[str, _Stats]] = field(default_factory=dict)

    def __post_init__(self):
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"smoothing factor {b} outside [0, 1)")

    def importance(self, key: str, part: str) -> np.ndarray:
        s = self.stats[key][part]
        return s.sens * s.unc

    def scores(self, key: str) -> np.ndarray:
        """Per-triplet score vector for adapter ``key``."""
        lam = self.importance(key, "Lambda")[0]
        col = self.importance(key, "A").mean(axis=0)
        row = self.importance(key, "B").mean(axis=1)
        return lam * col * row


@dataclass(frozen=True)
class BudgetSchedule:
    n_weights: int
    total_steps: int
    r_init: int = 12
    r_target: int = 8
    warmup_steps: int | None = None
    decay_end_step: int | None = None

    def __post_init__(self):
        if self.warmup_steps is None:
            object.__setattr__(self, "warmup_steps", int(round(0.1 * self.total_steps)))
        if self.decay_end_step is None:
            object.__setattr__(self, "decay_end_step", int(round(0.7 * self.total_steps)))
        if self.r_target > self.r_init:
            raise RankError(f"target rank {self.r_target} exceeds initial rank {self.r_init}")
        if not 0 <= self.warmup_steps <= self.decay_end_step <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= decay_end_step <= total_steps")


def update_importance(state: ImportanceState, adapters: Mapping[str, AdaLoraAdapter],
                      grads: Mapping[str, Sequence[np.ndarray]] | None = None) -> ImportanceState:
    """Fold the current gradients into the smoothed statistics.

    ``grads`` maps adapter keys to ``(gA, gLambda, gB)``; when omitted the
    adapters' own ``.grad`` accumulators are read, which must still hold the
    gradients of the latest backward pass.
    """
    b1, b2 = state.beta1, state.beta2
    for key, ad in adapters.items():
        if grads is not None:
            if key not in grads:
                raise StateError(f"no gradients supplied for adapter {key!r}")
            g_by_part = dict(zip(("A", "Lambda", "B"), grads[key]))
        else:
            if not ad.A.trainable:
                raise StateError(f"adapter {key!r} is frozen and has no gradients")
            g_by_part = {"A": ad.A.grad, "Lambda": ad.Lambda.grad, "B": ad.B.grad}
        per = state.stats.setdefault(key, {})
        for part, p in (("A", ad.A), ("Lambda", ad.Lambda), ("B", ad.B)):
            s = np.abs(p.data * g_by_part[part])
            if part not in per:
                per[part] = _Stats(np.zeros_like(s), np.zeros_like(s))
            st = per[part]
            st.sens = b1 * st.sens + (1.0 - b1) * s
            st.unc = b2 * st.unc + (1.0 - b2) * np.abs(s - st.sens)
    return state


def budget_at(schedule: BudgetSchedule, step: int) -> int:
    """Total number of active triplets allowed after ``step`` updates."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    n = schedule.n_weights
    hi, lo = n * schedule.r_init, n * schedule.r_target
    if step < schedule.warmup_steps:
        return hi
    if step >= schedule.decay_end_step:
        return lo
    frac = (step - schedule.warmup_steps) / (schedule.decay_end_step - schedule.warmup_steps)
    return int(math.floor(lo + (hi - lo) * (1.0 - frac) ** 3 + 0.5))


def apply_budget(adapters: Mapping[str, AdaLoraAdapter], state: ImportanceState | None,
                 budget: int, scores: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Keep the ``budget`` best triplets across all adapters; zero the rest of Lambda.

    Scores come from ``state`` unless given explicitly.  Ties go to the lower
    (adapter position, singular index).  Returns the new masks by key.
    """
    keys = list(adapters)
    capacity = sum(adapters[k].rank for k in keys)
    if not 0 <= budget <= capacity:
        raise RankError(f"budget {budget} outside [0, {capacity}]")
    entries = []
    for wi, key in enumerate(keys):
        sc = scores[key] if scores is not None else state.scores(key)
        for k, v in enumerate(np.asarray(sc, dtype=np.float64)):
            entries.append((-v, wi, k))
    entries.sort()
    keep = {(wi, k) for _, wi, k in entries[:budget]}
    masks = {}
    for wi, key in enumerate(keys):
        ad = adapters[key]
        mask = np.array([(wi, k) in keep for k in range(ad.rank)], dtype=bool)
        ad.mask = mask
        ad.Lambda.data[0, ~mask] = 0.0
        masks[key] = mask
    return masks
