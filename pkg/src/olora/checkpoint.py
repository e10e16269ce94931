"""Adapter and model checkpoints.

A checkpoint is an ``.npz`` archive.  The entry ``header`` holds a UTF-8 JSON
document::

    {
      "format_version": 1,
      "model": {...BlockConfig fields...} | null,
      "weights": {
        "<layer name>": [
          {"role": "frozen" | "active", "kind": "lora" | "adalora",
           "d1": int, "d2": int, "r": int, "mask": [bool, ...] | null,
           "arrays": {"A": "<npz key>", "B": "<npz key>", "Lambda": "<npz key>"}},
          ...
        ]
      },
      "base": {"<layer name>": {"W": "<npz key>", "b": "<npz key>"}} | null
    }

Every other entry is a float64 array referenced from the header.  ``base`` is
present only in full model checkpoints.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from olora.adapters import AdaLoraAdapter, LoraAdapter
from olora.model import BlockConfig, ToyModel
from olora.tensor import Parameter

FORMAT_VERSION = 1


def _adapter_entry(ad, role: str, key: str, arrays: dict) -> dict:
    names = {"A": f"{key}.A", "B": f"{key}.B"}
    arrays[names["A"]] = ad.A.data
    arrays[names["B"]] = ad.B.data
    mask = None
    if ad.kind == "adalora":
        names["Lambda"] = f"{key}.Lambda"
        arrays[names["Lambda"]] = ad.Lambda.data
        mask = [bool(v) for v in ad.mask]
    return {"role": role, "kind": ad.kind, "d1": ad.d1, "d2": ad.d2, "r": ad.rank,
            "mask": mask, "arrays": names}


def to_container(model: ToyModel, include_base: bool = True) -> tuple[dict, dict]:
    """Return ``(header, arrays)`` describing the model's adapters (and base)."""
    arrays: dict[str, np.ndarray] = {}
    weights = {}
    for name, layer in model.adapted_layers().items():
        entries = []
        for i, ad in enumerate(layer.stack.frozen):
            entries.append(_adapter_entry(ad, "frozen", f"{name}.frozen{i}", arrays))
        if layer.stack.active is not None:
            entries.append(_adapter_entry(layer.stack.active, "active", f"{name}.active", arrays))
        weights[name] = entries
    base = None
    if include_base:
        base = {}
        for layer in model.all_layers():
            arrays[f"{layer.name}.W"] = layer.W.data
            arrays[f"{layer.name}.b"] = layer.b.data
            base[layer.name] = {"W": f"{layer.name}.W", "b": f"{layer.name}.b"}
    header = {
        "format_version": FORMAT_VERSION,
        "model": model.cfg.to_dict() if include_base else None,
        "weights": weights,
        "base": base,
    }
    return header, arrays


def save_checkpoint(model: ToyModel, path, include_base: bool = True) -> Path:
    header, arrays = to_container(model, include_base)
    path = Path(path)
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)
    path.write_bytes(buf.getvalue())
    return path


def _build_adapter(entry: dict, arrays) -> LoraAdapter | AdaLoraAdapter:
    trainable = entry["role"] == "active"
    get = lambda k: Parameter(arrays[entry["arrays"][k]], trainable=trainable, name=k)
    if entry["kind"] == "lora":
        return LoraAdapter(A=get("A"), B=get("B"))
    if entry["kind"] == "adalora":
        return AdaLoraAdapter(A=get("A"), Lambda=get("Lambda"), B=get("B"), mask=np.array(entry["mask"]))
    raise ValueError(f"unknown adapter kind {entry['kind']!r}")


def read_checkpoint(path) -> tuple[dict, dict]:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["header"]).decode())
        arrays = {k: data[k] for k in data.files if k != "header"}
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header.get('format_version')!r}")
    return header, arrays


def load_into(model: ToyModel, header: dict, arrays: dict) -> ToyModel:
    """Replace the model's stacks (and base weights, if stored) with the checkpoint's."""
    if header.get("base"):
        for layer in model.all_layers():
            keys = header["base"][layer.name]
            layer.W.data[...] = arrays[keys["W"]]
            layer.b.data[...] = arrays[keys["b"]]
    layers = model.adapted_layers()
    for name, entries in header["weights"].items():
        stack = layers[name].stack
        stack.clear()
        for entry in entries:
            ad = _build_adapter(entry, arrays)
            if entry["role"] == "frozen":
                stack.frozen.append(ad)
            else:
                stack.active = ad
    return model


def load_checkpoint(path) -> ToyModel:
    """Rebuild a full model from a checkpoint written with ``include_base=True``."""
    header, arrays = read_checkpoint(path)
    if header.get("model") is None or not header.get("base"):
        raise ValueError("checkpoint holds adapters only; use load_into with an existing model")
    model = ToyModel(BlockConfig.from_dict(header["model"]), seed=0)
    return load_into(model, header, arrays)
