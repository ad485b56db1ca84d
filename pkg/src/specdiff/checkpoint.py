"""Repo-wide checkpoint format.

One raw little-endian float32 blob per tensor plus an index file listing
name, shape, dtype and the blob's sha256. Loads are all-or-nothing:
hash, shape or name mismatches reject the checkpoint.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError",
           "save_module", "load_into_module"]

INDEX_NAME = "index.tsv"


class CheckpointError(RuntimeError):
    pass


def _blob_name(tensor_name: str) -> str:
    return tensor_name.replace("/", "_").replace(".", "_") + ".f32"


def save_checkpoint(path, tensors: dict) -> None:
    """tensors: name -> numpy array or torch tensor (stored as float32)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        # asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d
        arr = np.asarray(value, dtype="<f4", order="C")
        blob = arr.tobytes()
        digest = hashlib.sha256(blob).hexdigest()
        (path / _blob_name(name)).write_bytes(blob)
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t{shape}\tfloat32\t{digest}")
    (path / INDEX_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> dict:
    path = Path(path)
    index = path / INDEX_NAME
    if not index.exists():
        raise CheckpointError(f"no checkpoint index at {index}")
    tensors = {}
    for line in index.read_text(encoding="utf-8").splitlines():
        name, shape_s, dtype, digest = line.split("\t")
        if dtype != "float32":
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        blob_path = path / _blob_name(name)
        if not blob_path.exists():
            raise CheckpointError(f"missing tensor blob for {name}")
        blob = blob_path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != digest:
            raise CheckpointError(f"hash mismatch for tensor {name}")
        shape = tuple(int(s) for s in shape_s.split(",") if s)
        arr = np.frombuffer(blob, dtype="<f4")
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"size mismatch for tensor {name}")
        tensors[name] = arr.reshape(shape).copy()
    return tensors


def save_module(path, module: torch.nn.Module) -> None:
    save_checkpoint(path, dict(module.state_dict()))


def load_into_module(path, module: torch.nn.Module) -> None:
    """Full-match load: every parameter present, every shape equal."""
    tensors = load_checkpoint(path)
    state = module.state_dict()
    missing = set(state) - set(tensors)
    extra = set(tensors) - set(state)
    if missing or extra:
        raise CheckpointError(
            f"name mismatch: missing={sorted(missing)} extra={sorted(extra)}"
        )
    for name, arr in tensors.items():
        if tuple(state[name].shape) != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {tuple(state[name].shape)} vs {arr.shape}"
            )
    module.load_state_dict(
        {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    )
