"""Checkpoint container: a zip of raw float32 tensors plus ``meta.json``.

Archive members::

    meta.json                 fingerprint, config, history, tensor index
    tensors/<name>.f32        little-endian float32, C order

Integer buffers (BatchNorm step counters) are stored as float32 and cast back
to their recorded dtype on load.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

__all__ = ["Checkpoint", "FingerprintMismatch", "save_checkpoint", "load_checkpoint",
           "state_to_numpy", "transfer_init"]


class FingerprintMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    fingerprint: str
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def state_dict(self, reference: dict | None = None) -> dict:
        out = {}
        for name, arr in self.tensors.items():
            t = torch.from_numpy(np.array(arr, dtype=np.float32))
            dtype = self.metadata.get("dtypes", {}).get(name)
            if reference is not None and name in reference:
                t = t.to(reference[name].dtype)
            elif dtype is not None:
                t = t.to(getattr(torch, dtype))
            out[name] = t
        return out


def state_to_numpy(module: torch.nn.Module) -> tuple[dict, dict]:
    tensors, dtypes = {}, {}
    for name, t in module.state_dict().items():
        tensors[name] = t.detach().cpu().numpy().astype(np.float32)
        dtypes[name] = str(t.dtype).replace("torch.", "")
    return tensors, dtypes


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {name: {"shape": list(np.shape(arr)), "file": f"tensors/{name}.f32"}
             for name, arr in ckpt.tensors.items()}
    meta = {"format": "artery-checkpoint", "version": 1, "fingerprint": ckpt.fingerprint,
            "config": ckpt.config, "history": ckpt.history, "metadata": ckpt.metadata,
            "tensors": index}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1))
        for name, arr in ckpt.tensors.items():
            zf.writestr(index[name]["file"], np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        tensors = {}
        for name, info in meta["tensors"].items():
            raw = zf.read(info["file"])
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(info["shape"]).copy()
    return Checkpoint(tensors, meta["fingerprint"], meta.get("config", {}),
                      meta.get("history", []), meta.get("metadata", {}))


def transfer_init(module: torch.nn.Module, ckpt: Checkpoint, expected_fingerprint: str):
    """Load checkpoint weights into ``module`` after checking architecture fingerprints."""
    if ckpt.fingerprint != expected_fingerprint:
        raise FingerprintMismatch(
            f"checkpoint fingerprint {ckpt.fingerprint} != model fingerprint {expected_fingerprint}")
    module.load_state_dict(ckpt.state_dict(module.state_dict()))
    return module
