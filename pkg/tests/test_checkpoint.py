import json

import numpy as np
import pytest

from olora.bench import ContinualLearner
from olora.checkpoint import load_checkpoint, load_into, read_checkpoint, save_checkpoint
from olora.model import ToyModel, forward


@pytest.fixture
def trained(tiny):
    learner = ContinualLearner(tiny(), "o_adalora", 0)
    learner.run_stage(0)
    learner.run_stage(1)
    return learner


def test_full_round_trip(trained, tmp_path):
    path = save_checkpoint(trained.model, tmp_path / "m.npz")
    restored = load_checkpoint(path)
    x = trained.tasks[0].eval_x
    assert np.array_equal(forward(restored, x).data, forward(trained.model, x).data)
    for name, layer in restored.adapted_layers().items():
        orig = trained.model.adapted_layers()[name].stack
        assert len(layer.stack.frozen) == len(orig.frozen) == 1
        assert np.array_equal(layer.stack.active.mask, orig.active.mask)
        assert not any(p.trainable for p in layer.stack.frozen[0].parameters())
        assert all(p.trainable for p in layer.stack.active.parameters())


def test_adapter_only_checkpoint(trained, tmp_path):
    path = save_checkpoint(trained.model, tmp_path / "a.npz", include_base=False)
    header, arrays = read_checkpoint(path)
    assert header["base"] is None and header["model"] is None
    with pytest.raises(ValueError, match="adapters only"):
        load_checkpoint(path)
    model = trained.base.clone()
    load_into(model, header, arrays)
    x = trained.tasks[1].eval_x
    assert np.array_equal(forward(model, x).data, forward(trained.model, x).data)


def test_header_layout(trained, tmp_path):
    header, arrays = read_checkpoint(save_checkpoint(trained.model, tmp_path / "m.npz"))
    assert header["format_version"] == 1
    entries = header["weights"]["block0.wq"]
    assert [e["role"] for e in entries] == ["frozen", "active"]
    assert entries[1]["kind"] == "adalora" and len(entries[1]["mask"]) == entries[1]["r"]
    for e in entries:
        for key in e["arrays"].values():
            assert arrays[key].dtype == np.float64


def test_unknown_version(tmp_path, tiny):
    path = save_checkpoint(ToyModel(tiny().model), tmp_path / "m.npz")
    with np.load(path) as data:
        contents = {k: data[k] for k in data.files}
    header = json.loads(bytes(contents["header"]).decode())
    header["format_version"] = 99
    contents["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(tmp_path / "bad.npz", **contents)
    with pytest.raises(ValueError, match="unsupported"):
        read_checkpoint(tmp_path / "bad.npz")
