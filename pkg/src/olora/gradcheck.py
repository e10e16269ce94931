"""The finite-difference gradient-check matrix behind ``olora gradcheck``."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from olora import tensor as T
from olora.adapters import freeze_and_extend, init_adalora, init_lora
from olora.model import BlockConfig, ToyModel, forward, task_loss
from olora.regularizers import MODES, adalora_reg, combined_loss, orth_loss
from olora.tensor import Parameter, Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float | None  # None when skipped

    @property
    def skipped(self) -> bool:
        return self.error is None

    @property
    def passed(self) -> bool:
        return self.error is None or self.error < TOLERANCE


def _op_check(rng: np.random.Generator, build: Callable[[list[Parameter]], Tensor], shapes) -> float:
    params = [Parameter(rng.normal(size=s)) for s in shapes]
    out_shape = build(params).shape
    weights = Tensor(rng.normal(size=out_shape))

    def f():
        out = build(params)
        if out.ndim == 0:
            return out
        return T.sum_all(T.mul(out, weights))

    return T.finite_diff_check(f, params)


def _op_checks() -> dict[str, tuple[Callable, list]]:
    return {
        "matmul": (lambda p: T.matmul(p[0], p[1]), [(3, 4), (4, 2)]),
        "matmul_batched": (lambda p: T.matmul(p[0], p[1]), [(2, 3, 4), (2, 4, 3)]),
        "transpose": (lambda p: T.transpose(p[0]), [(3, 4)]),
        "add": (lambda p: T.add(p[0], p[1]), [(3, 4), (3, 4)]),
        "sub": (lambda p: T.sub(p[0], p[1]), [(3, 4), (3, 4)]),
        "mul": (lambda p: T.mul(p[0], p[1]), [(3, 4), (3, 4)]),
        "scale": (lambda p: T.scale(p[0], -0.7), [(3, 4)]),
        "relu": (lambda p: T.relu(p[0]), [(3, 4)]),
        "gelu": (lambda p: T.gelu(p[0]), [(3, 4)]),
        "row_softmax": (lambda p: T.row_softmax(p[0]), [(3, 4)]),
        "frobenius_sq": (lambda p: T.frobenius_sq(p[0]), [(3, 4)]),
        "add_row": (lambda p: T.add_row(p[0], p[1]), [(3, 4), (1, 4)]),
        "scale_cols": (lambda p: T.scale_cols(p[0], p[1]), [(3, 4), (1, 4)]),
        "mean_axis": (lambda p: T.mean_axis(p[0], 1), [(2, 3, 4)]),
        "reshape": (lambda p: T.reshape(p[0], (4, 3)), [(3, 4)]),
        "layer_norm": (lambda p: T.layer_norm(p[0]), [(3, 4)]),
        "sum_all": (lambda p: T.sum_all(p[0]), [(3, 4)]),
    }


def toy_objective(mode: str, seed: int = 0, model_dim: int = 8, rank: int = 4):
    """A 1-block model with randomised adapters and its combined objective.

    Returns ``(f, params)`` for :func:`finite_diff_check`.  The ``o_`` modes get
    one frozen adapter per weight under the active one; AdaLoRA actives have
    their second triplet masked.
    """
    rng = np.random.default_rng(seed)
    cfg = BlockConfig(model_dim=model_dim, ff_dim=2 * model_dim, blocks=1, output_dim=3)
    model = ToyModel(cfg, seed=seed)
    kind = "adalora" if "adalora" in mode else "lora"
    init = init_adalora if kind == "adalora" else init_lora
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for layer in model.adapted_layers().values():
            n_adapters = 2 if mode.startswith("o_") else 1
            for _ in range(n_adapters):
                ad = init(layer.d1, layer.d2, rank, int(rng.integers(2**31)))
                for p in ad.parameters():
                    p.data[...] = rng.normal(0.0, 0.3, p.shape)
                if kind == "adalora":
                    ad.mask[1] = False
                freeze_and_extend(layer.stack, ad)
    x = rng.normal(size=(2, 3, model_dim))
    y = rng.normal(size=(2, 3))

    def f():
        return combined_loss(task_loss(forward(model, x), y), model.stacks(), 0.5, 0.5, mode).objective

    return f, model.trainable_parameters()


def run_gradcheck(modes=None, seed: int = 0) -> list[CheckResult]:
    """Every op on random 3x4 inputs, the two regularisers, and the full objective per mode.

    ``modes`` restricts the loss-level checks; checks that belong only to
    excluded modes are reported as skipped.
    """
    modes = tuple(MODES if not modes else modes)
    rng = np.random.default_rng(seed)
    results = []
    for name, (build, shapes) in _op_checks().items():
        results.append(CheckResult(f"op:{name}", _op_check(rng, build, shapes)))

    wanted = lambda *owners: any(m in modes for m in owners)
    if wanted("o_lora", "o_adalora"):
        err = _op_check(rng, lambda p: orth_loss(p[0], p[1]), [(5, 2), (5, 3)])
    else:
        err = None
    results.append(CheckResult("loss:orth_loss", err))
    if wanted("adalora", "o_adalora"):
        err = _op_check(rng, lambda p: adalora_reg(p[0], p[1]), [(5, 3), (3, 4)])
    else:
        err = None
    results.append(CheckResult("loss:adalora_reg", err))
    for mode in MODES:
        if mode in modes:
            f, params = toy_objective(mode, seed)
            results.append(CheckResult(f"model:{mode}", T.finite_diff_check(f, params)))
        else:
            results.append(CheckResult(f"model:{mode}", None))
    return results
