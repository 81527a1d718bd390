"""Module checkpoints: one NVRD1 blob per state tensor plus ``meta.json``."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from . import blobs


def save_module(module: torch.nn.Module, directory, meta: dict) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in module.state_dict().items():
        fname = f"{name}.nvrd"
        digest = blobs.save(d / fname, t.detach().cpu().numpy())
        tensors[name] = {"file": fname, "shape": list(t.shape), "sha256": digest}
    full = dict(meta, tensors=tensors)
    (d / "meta.json").write_text(json.dumps(full, indent=2, sort_keys=True))
    return full


def read_meta(directory) -> dict:
    return json.loads((Path(directory) / "meta.json").read_text())


def load_state(module: torch.nn.Module, directory) -> dict:
    d = Path(directory)
    meta = read_meta(d)
    state = {}
    for name, info in meta["tensors"].items():
        arr = blobs.load(d / info["file"])
        if list(arr.shape) != info["shape"]:
            raise ValueError(f"{name}: shape {arr.shape} != {info['shape']}")
        state[name] = torch.from_numpy(np.array(arr))
    module.load_state_dict(state)
    return meta


def parameter_checksum(module: torch.nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
