"""
Binary checkpoint files.

Layout, all little-endian::

    b"HNCK"  u16 version
    u16 len + utf-8 model kind ("teacher" | "student" | "sequence")
    u32 len + utf-8 json config blob {"arch": <architecture>, "meta": {...}}
    u32 tensor count, then per tensor:
        u16 len + utf-8 name, u8 dtype code, u8 ndim, ndim x u32 dims, raw data
"""

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .models import (
    SequenceConfig,
    SequenceModel,
    StudentConfig,
    StudentModel,
    TeacherConfig,
    TeacherModel,
)

MAGIC = b"HNCK"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
KINDS = {
    "teacher": (TeacherModel, TeacherConfig),
    "student": (StudentModel, StudentConfig),
    "sequence": (SequenceModel, SequenceConfig),
}


class CheckpointError(ValueError):
    pass


def arch_dict(config):
    return json.loads(json.dumps(dataclasses.asdict(config)))


def _config_from_arch(kind, arch):
    cfg_cls = KINDS[kind][1]
    arch = dict(arch)
    for key in ("channels", "attribute_arities"):
        if key in arch:
            arch[key] = tuple(arch[key])
    return cfg_cls(**arch)


def save_checkpoint(model, path, meta=None):
    kind = model.kind
    if kind not in KINDS:
        raise CheckpointError(f"cannot checkpoint model kind {kind!r}")
    meta = dict(meta or {})
    if kind == "teacher":
        meta.setdefault("frozen", bool(model.frozen))
    blob = json.dumps({"arch": arch_dict(model.config), "meta": meta}, sort_keys=True).encode()
    codes = {v: k for k, v in DTYPES.items()}
    out = bytearray(MAGIC + struct.pack("<H", VERSION))
    kb = kind.encode()
    out += struct.pack("<H", len(kb)) + kb
    out += struct.pack("<I", len(blob)) + blob
    state = model.state_dict()
    out += struct.pack("<I", len(state))
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        dt = arr.dtype.newbyteorder("<")
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", codes[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype(dt, copy=False).tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path):
    """-> (kind, blob dict, {name: ndarray})."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    (n,) = struct.unpack_from("<H", data, pos)
    kind = data[pos + 2 : pos + 2 + n].decode()
    pos += 2 + n
    (n,) = struct.unpack_from("<I", data, pos)
    blob = json.loads(data[pos + 4 : pos + 4 + n])
    pos += 4 + n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2 : pos + 2 + n].decode()
        pos += 2 + n
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dt = DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(
            shape
        )
        pos += size
    return kind, blob, tensors


def load_checkpoint(path, expected_kind=None, expected_config=None):
    """Rebuild the model a checkpoint describes.

    A config that disagrees with `expected_config`, or tensors that do not
    match the architecture, raise CheckpointError.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    kind, blob, tensors = read_checkpoint(path)
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"{path}: expected a {expected_kind} checkpoint, found {kind}")
    if expected_config is not None and arch_dict(expected_config) != blob["arch"]:
        raise CheckpointError(f"{path}: architecture config does not match the expected one")
    model = KINDS[kind][0](_config_from_arch(kind, blob["arch"]))
    state = model.state_dict()
    if set(state) != set(tensors):
        raise CheckpointError(f"{path}: parameter names do not match the architecture")
    for name, arr in tensors.items():
        if tuple(state[name].shape) != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {tuple(state[name].shape)}")
        if state[name].dtype != torch.from_numpy(arr.copy()).dtype:
            raise CheckpointError(f"{path}: {name} dtype mismatch")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    meta = blob.get("meta", {})
    if kind == "teacher" and meta.get("frozen"):
        model.freeze()
    model.eval()
    model.checkpoint_meta = meta
    return model
