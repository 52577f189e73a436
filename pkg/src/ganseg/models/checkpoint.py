"""Single-file checkpoint container.

Byte layout (documented contract, see docs/checkpoint_format.md):

    bytes 0..7    magic b"GSEGCKPT"
    bytes 8..15   u64 little-endian: length of the JSON header in bytes
    header        UTF-8 JSON object with keys component, step, config_hash,
                  selection_score, tensors (list of {name, dtype, shape,
                  offset, nbytes}; offset is relative to the payload start)
    payload       concatenated raw tensor bytes, C-order, little-endian

Round-tripping reproduces every tensor bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GSEGCKPT"

COMPONENTS = ("G", "D_r", "D_m", "E", "DL", "UN", "classifier")


@dataclass
class ModelCheckpoint:
    component: str
    parameters: dict            # name -> np.ndarray
    step: int = 0
    selection_score: float = 0.0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValueError(f"unknown component {self.component!r}")

    def load_into(self, module: torch.nn.Module):
        """Copy stored parameters into a torch module (strict key match)."""
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.parameters.items()}
        module.load_state_dict(state)
        return module


def _to_numpy_state(module_or_state) -> dict:
    if isinstance(module_or_state, torch.nn.Module):
        state = module_or_state.state_dict()
    else:
        state = module_or_state
    out = {}
    for name, t in state.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        out[name] = np.ascontiguousarray(arr)
    return out


def save_checkpoint(path, component: str, module_or_state, step: int = 0,
                    selection_score: float = 0.0, config_hash: str = "",
                    extra: dict | None = None):
    """Write the single-file container; returns the path."""
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}")
    params = _to_numpy_state(module_or_state)
    tensors = []
    offset = 0
    for name in params:
        arr = params[name]
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "component": component,
        "step": int(step),
        "selection_score": float(selection_score),
        "config_hash": config_hash,
        "extra": extra or {},
        "tensors": tensors,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for name in params:
            arr = params[name]
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            f.write(arr.tobytes(order="C"))
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (hdr_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hdr_len).decode("utf-8"))
        payload = f.read()
    params = {}
    for spec in header["tensors"]:
        raw = payload[spec["offset"]:spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(spec["dtype"]))
        params[spec["name"]] = arr.reshape(spec["shape"]).copy()
    return ModelCheckpoint(component=header["component"], parameters=params,
                           step=header["step"],
                           selection_score=header["selection_score"],
                           config_hash=header["config_hash"],
                           extra=header.get("extra", {}))


def state_dict_bytes(module: torch.nn.Module) -> bytes:
    """Deterministic digest of all parameters; used for freeze invariants."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.digest()
