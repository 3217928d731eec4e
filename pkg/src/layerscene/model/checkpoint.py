"""Checkpoints: a JSON manifest plus one blob of little-endian float32 values.

The manifest ``<name>.json`` lists every stored array (parameters first, then
Adam moments) with its shape and byte offset into ``<name>.bin``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import AdamState, Tensor
from .config import ModelConfig, TrainConfig

FORMAT = "layerscene-checkpoint"
VERSION = 1
BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(OSError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    config: ModelConfig
    train_config: TrainConfig | None = None
    progress: dict = field(default_factory=lambda: {"stage1_step": 0, "stage2_step": 0})
    optimizers: dict[str, AdamState] = field(default_factory=dict)


def blob_path(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def _entries(ckpt: Checkpoint):
    for name in sorted(ckpt.params):
        yield name, ckpt.params[name].data
    for stage in sorted(ckpt.optimizers):
        st = ckpt.optimizers[stage]
        for kind, moments in (("m", st.m), ("v", st.v)):
            for name in sorted(moments):
                yield f"adam/{stage}/{kind}/{name}", moments[name]


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write ``path`` (manifest) and its ``.bin`` blob; returns the manifest path."""
    path = Path(path)
    tensors, chunks, offset = [], [], 0
    for name, arr in _entries(ckpt):
        data = np.ascontiguousarray(arr, dtype=BLOB_DTYPE)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "format": FORMAT, "version": VERSION, "dtype": "float32-le", "blob": blob_path(path).name,
        "config": ckpt.config.to_dict(),
        "train_config": None if ckpt.train_config is None else ckpt.train_config.to_dict(),
        "progress": dict(ckpt.progress),
        "optimizers": {k: {"step": v.step} for k, v in sorted(ckpt.optimizers.items())},
        "tensors": tensors,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        blob_path(path).write_bytes(b"".join(chunks))
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path, dtype=np.float32) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        blob = (path.parent / manifest["blob"]).read_bytes()
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} manifest")
    params: dict[str, Tensor] = {}
    optimizers = {k: AdamState(step=v["step"]) for k, v in manifest["optimizers"].items()}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + count * BLOB_DTYPE.itemsize > len(blob):
            raise CheckpointError(f"{path}: blob too short for {entry['name']}")
        arr = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=start).reshape(shape)
        arr = arr.astype(dtype)
        name = entry["name"]
        if name.startswith("adam/"):
            _, stage, kind, pname = name.split("/", 3)
            getattr(optimizers[stage], kind)[pname] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True, name=name)
    tc = manifest.get("train_config")
    return Checkpoint(params, ModelConfig.from_dict(manifest["config"]),
                      None if tc is None else TrainConfig.from_dict(tc),
                      dict(manifest["progress"]), optimizers)


__all__ = ["Checkpoint", "CheckpointError", "blob_path", "load_checkpoint", "save_checkpoint"]
