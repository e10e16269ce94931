import subprocess
import sys
import warnings

import numpy as np
import pytest

from olora import tensor as T
from olora.adapters import freeze_and_extend, init_adalora, init_lora
from olora.config import RunConfig
from olora.errors import ConfigError, DimensionError
from olora.gradcheck import toy_objective
from olora.model import ADAPTED, BlockConfig, ToyModel, forward, task_loss, trainable_param_count
from olora.tensor import Tensor

SMALL = BlockConfig(model_dim=16, ff_dim=32, blocks=2, output_dim=3)


def attach(model, init, r, seed=0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i, layer in enumerate(model.adapted_layers().values()):
            freeze_and_extend(layer.stack, init(layer.d1, layer.d2, r, seed + i))


def inputs(seed, n=5, L=4, d=16):
    return np.random.default_rng(seed).normal(size=(n, L, d))


class TestForward:
    def test_fresh_adapters_leave_outputs_identical(self):
        model = ToyModel(SMALL, seed=1)
        x = inputs(0)
        base = forward(model, x).data.copy()
        attach(model, init_lora, 4)
        attach(model, init_adalora, 3, seed=100)
        assert np.array_equal(forward(model, x).data, base)

    def test_single_token_attention_is_one(self):
        cfg = BlockConfig(model_dim=8, ff_dim=16, blocks=1, output_dim=2)
        model = ToyModel(cfg, seed=0)
        x = inputs(1, n=3, L=1, d=8)
        blk = model.blocks[0]
        h = model.embed(T.reshape(Tensor(x), (3, 8)))
        q = T.reshape(blk.wq(h), (3, 1, 8))
        k = T.reshape(blk.wk(h), (3, 1, 8))
        att = T.row_softmax(T.matmul(q, T.transpose(k))).data
        assert np.array_equal(att, np.ones((3, 1, 1)))
        # with one token the context is just the value projection
        pooled_direct = forward(model, x, return_hidden=True)[1].data
        v = blk.wv(h).data
        h1 = h.data + blk.wo(Tensor(v)).data
        h2 = h1 + blk.fc2(T.relu(blk.fc1(Tensor(h1)))).data
        np.testing.assert_allclose(pooled_direct, h2, atol=1e-13)

    def test_same_seed_same_outputs_across_processes(self):
        code = ("import numpy as np;from olora.model import BlockConfig, ToyModel, forward;"
                "m=ToyModel(BlockConfig(model_dim=16, ff_dim=32, output_dim=3), seed=7);"
                "x=np.random.default_rng(3).normal(size=(5,4,16));"
                "print(forward(m,x).data.tobytes().hex())")
        outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                               check=True).stdout for _ in range(2)}
        assert len(outs) == 1

    def test_batch_permutation(self):
        model = ToyModel(SMALL, seed=2)
        attach(model, init_lora, 2)
        for layer in model.adapted_layers().values():
            layer.stack.active.B.data[...] = np.random.default_rng(0).normal(size=layer.stack.active.B.shape)
        x = inputs(3, n=6)
        y = np.random.default_rng(4).normal(size=(6, 3))
        perm = np.random.default_rng(5).permutation(6)
        pred = forward(model, x).data
        pred_perm = forward(model, x[perm]).data
        per_example = ((pred - y) ** 2).mean(axis=1)
        per_example_perm = ((pred_perm - y[perm]) ** 2).mean(axis=1)
        np.testing.assert_allclose(per_example_perm, per_example[perm], rtol=1e-12, atol=1e-15)

    def test_gelu_and_layer_norm_variants(self):
        cfg = BlockConfig(model_dim=16, ff_dim=32, output_dim=3, activation="gelu", layer_norm=True)
        out = forward(ToyModel(cfg, seed=0), inputs(0))
        assert out.shape == (5, 3) and np.isfinite(out.data).all()

    def test_rejects_wrong_width(self):
        with pytest.raises(DimensionError):
            forward(ToyModel(SMALL), np.zeros((2, 3, 8)))

    def test_o_adalora_objective_gradcheck(self):
        f, params = toy_objective("o_adalora")
        assert T.finite_diff_check(f, params) < 1e-4


class TestTaskLoss:
    def test_equal(self):
        assert task_loss(Tensor([[1.0, 2.0]]), [[1.0, 2.0]]).item() == 0.0

    def test_unit(self):
        assert task_loss(Tensor([[1.0]]), [[0.0]]).item() == 1.0

    def test_hand_mse(self):
        assert task_loss(Tensor([[1.0, 3.0]]), [[0.0, 1.0]]).item() == 2.5

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            task_loss(Tensor([[1.0, 3.0]]), [[0.0]])


class TestParamCount:
    def test_full_fine_tuning(self):
        model = ToyModel(SMALL)
        model.set_base_trainable(True)
        count, frac = trainable_param_count(model)
        assert frac == 1.0 and count == sum(p.size for p in model.base_parameters())

    def test_lora_on_one_square_weight(self):
        cfg = BlockConfig(model_dim=32, ff_dim=64, blocks=1, targets=("wq",))
        model = ToyModel(cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            freeze_and_extend(model.adapted_layers()["block0.wq"].stack, init_lora(32, 32, 32, 0))
        assert trainable_param_count(model)[0] == 2048

    def test_adalora_on_one_square_weight(self):
        cfg = BlockConfig(model_dim=32, ff_dim=64, blocks=1, targets=("wq",))
        model = ToyModel(cfg)
        freeze_and_extend(model.adapted_layers()["block0.wq"].stack, init_adalora(32, 32, 12, 0))
        assert trainable_param_count(model)[0] == 780

    def test_default_adalora_smaller_than_lora(self):
        cfg = RunConfig()
        a, b = ToyModel(cfg.model), ToyModel(cfg.model)
        attach(a, init_adalora, cfg.rank_init)
        attach(b, init_lora, cfg.rank)
        assert trainable_param_count(a)[0] < trainable_param_count(b)[0]


class TestConfig:
    def test_round_trip(self):
        cfg = BlockConfig(model_dim=8, ff_dim=12, activation="gelu", targets=("wq", "fc2"))
        assert BlockConfig.from_dict(cfg.to_dict()) == cfg

    def test_adapted_names(self):
        names = list(ToyModel(SMALL).adapted_layers())
        assert names == [f"block{i}.{n}" for i in range(2) for n in ADAPTED]

    @pytest.mark.parametrize("kw", [{"activation": "tanh"}, {"model_dim": 10, "heads": 3},
                                    {"targets": ("wq", "nope")}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            BlockConfig(**kw)

    def test_base_is_frozen_by_default(self):
        model = ToyModel(SMALL)
        assert model.trainable_parameters() == []
