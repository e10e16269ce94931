"""A small encoder-only transformer whose six per-block weights carry adapter stacks."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from olora import tensor as T
from olora.adapters import LinearLayer
from olora.errors import ConfigError, DimensionError
from olora.tensor import Parameter, Tensor

ADAPTED = ("wq", "wk", "wv", "wo", "fc1", "fc2")


@dataclass(frozen=True)
class BlockConfig:
    model_dim: int = 128
    ff_dim: int = 256
    heads: int = 1
    blocks: int = 2
    output_dim: int = 4
    activation: str = "relu"
    layer_norm: bool = False
    # std of the frozen output head, in units of 1/sqrt(model_dim)
    head_scale: float = 0.25
    targets: tuple[str, ...] = ADAPTED

    def __post_init__(self):
        if self.heads != 1:
            raise ConfigError("only single-head attention is supported")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        unknown = set(self.targets) - set(ADAPTED)
        if unknown:
            raise ConfigError(f"unknown target matrices {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BlockConfig":
        d = dict(d)
        if "targets" in d:
            d["targets"] = tuple(d["targets"])
        return cls(**d)


def _linear(rng: np.random.Generator, d_in: int, d_out: int, name: str, std: float | None = None) -> LinearLayer:
    std = 1.0 / math.sqrt(d_in) if std is None else std
    return LinearLayer(rng.normal(0.0, std, (d_out, d_in)), rng.normal(0.0, 0.02, (1, d_out)), name=name)


class Block:
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, prefix: str):
        d, ff = cfg.model_dim, cfg.ff_dim
        self.wq = _linear(rng, d, d, f"{prefix}.wq")
        self.wk = _linear(rng, d, d, f"{prefix}.wk")
        self.wv = _linear(rng, d, d, f"{prefix}.wv")
        self.wo = _linear(rng, d, d, f"{prefix}.wo")
        self.fc1 = _linear(rng, d, ff, f"{prefix}.fc1")
        self.fc2 = _linear(rng, ff, d, f"{prefix}.fc2")

    def layers(self) -> dict[str, LinearLayer]:
        return {n: getattr(self, n) for n in ADAPTED}


class ToyModel:
    """Frozen embedding, ``cfg.blocks`` attention blocks, mean pooling, frozen head."""

    def __init__(self, cfg: BlockConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.model_dim
        self.embed = _linear(rng, d, d, "embed")
        self.blocks = [Block(cfg, rng, f"block{i}") for i in range(cfg.blocks)]
        self.head = _linear(rng, d, cfg.output_dim, "head", std=cfg.head_scale / math.sqrt(d))

    def adapted_layers(self) -> dict[str, LinearLayer]:
        """The layers that may carry adapters, keyed ``block{i}.{name}``."""
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, layer in blk.layers().items():
                if name in self.cfg.targets:
                    out[f"block{i}.{name}"] = layer
        return out

    def all_layers(self) -> Iterator[LinearLayer]:
        yield self.embed
        for blk in self.blocks:
            yield from blk.layers().values()
        yield self.head

    def base_parameters(self) -> list[Parameter]:
        return [p for layer in self.all_layers() for p in (layer.W, layer.b)]

    def adapter_parameters(self) -> list[Parameter]:
        return [p for layer in self.all_layers() for ad in layer.stack for p in ad.parameters()]

    def parameters(self) -> list[Parameter]:
        return self.base_parameters() + self.adapter_parameters()

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def stacks(self):
        return [layer.stack for layer in self.adapted_layers().values()]

    def set_base_trainable(self, flag: bool) -> None:
        for p in self.base_parameters():
            p.trainable = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clone(self) -> "ToyModel":
        return copy.deepcopy(self)


def _act(cfg: BlockConfig, x: Tensor) -> Tensor:
    return T.relu(x) if cfg.activation == "relu" else T.gelu(x)


def forward(model: ToyModel, x, return_hidden: bool = False):
    """Predictions for a ``(batch, seq, model_dim)`` input.

    With ``return_hidden`` the pooled representation fed to the head is
    returned as well.
    """
    cfg = model.cfg
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != cfg.model_dim:
        raise DimensionError(f"expected (batch, seq, {cfg.model_dim}) input, got {x.shape}")
    nb, L, d = x.shape
    norm = T.layer_norm if cfg.layer_norm else (lambda t: t)
    h = model.embed(T.reshape(x, (nb * L, d)))
    inv_sqrt_d = 1.0 / math.sqrt(d)
    for blk in model.blocks:
        a_in = norm(h)
        q = T.reshape(blk.wq(a_in), (nb, L, d))
        k = T.reshape(blk.wk(a_in), (nb, L, d))
        v = T.reshape(blk.wv(a_in), (nb, L, d))
        att = T.row_softmax(T.scale(T.matmul(q, T.transpose(k)), inv_sqrt_d))
        ctx = T.reshape(T.matmul(att, v), (nb * L, d))
        h = T.add(h, blk.wo(ctx))
        f = blk.fc2(_act(cfg, blk.fc1(norm(h))))
        h = T.add(h, f)
    pooled = T.mean_axis(T.reshape(h, (nb, L, d)), 1)
    out = model.head(pooled)
    return (out, pooled) if return_hidden else out


def task_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over batch and output dims."""
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"task_loss: predictions {pred.shape} vs targets {target.shape}")
    return T.scale(T.frobenius_sq(T.sub(pred, target)), 1.0 / pred.data.size)


def trainable_param_count(model: ToyModel) -> tuple[int, float]:
    """Trainable scalar count and its share of all scalars, adapters included."""
    params = model.parameters()
    total = sum(p.size for p in params)
    trainable = sum(p.size for p in params if p.trainable)
    return trainable, trainable / total
