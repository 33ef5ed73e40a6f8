"""Binary checkpoints with per-array digests.

Layout (all integers little-endian):

    magic                b"PXVCKPT\\x01"
    u32 header_len       JSON bytes: {"config": {...}, "meta": {...}}
    u32 param_count
    per parameter, in registry order:
        u16 name_len, name utf-8
        u8  dtype code (0 = float32, 1 = float64)
        u8  ndim, then ndim * u32 dims
        64 ascii hex    sha256 of the raw value bytes
        raw values      row-major, little-endian
    u8 has_optimizer
    if set: u64 step_count, then param_count first-moment arrays and
    param_count second-moment arrays, same record format minus the name.

Digests are verified on load; any mismatch, truncation, or trailing garbage
raises CheckpointError rather than returning a silently corrupt model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .optim import Adam
from .tensor import Parameter

MAGIC = b"PXVCKPT\x01"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    config: dict
    meta: dict
    tensors: dict[str, np.ndarray]
    opt_step: int | None = None
    opt_m: list[np.ndarray] | None = None
    opt_v: list[np.ndarray] | None = None


# ---- writing ----


def _array_record(arr: np.ndarray) -> bytes:
    code = _CODE_FOR.get(np.dtype(arr.dtype))
    if code is None:
        raise CheckpointError(f"cannot store dtype {arr.dtype}; use float32 or float64")
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + hashlib.sha256(payload).hexdigest().encode("ascii") + payload


def save_checkpoint(path, config: dict, params: list[Parameter], opt: Adam | None = None,
                    meta: dict | None = None) -> None:
    header = json.dumps({"config": config, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)) + name + _array_record(p.data))
    if opt is None:
        chunks.append(struct.pack("<B", 0))
    else:
        step, m, v = opt.state_arrays()
        if len(m) != len(params):
            raise CheckpointError(f"optimizer tracks {len(m)} parameters, checkpoint has {len(params)}")
        chunks.append(struct.pack("<BQ", 1, step))
        chunks.extend(_array_record(a) for a in m)
        chunks.extend(_array_record(a) for a in v)
    blob = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(blob)


# ---- reading ----


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.off}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, label: str) -> np.ndarray:
        code, ndim = self.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{label}: unknown dtype code {code}")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPE_CODES[code]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        digest = self.take(64).decode("ascii")
        payload = self.take(count * dt.itemsize)
        if hashlib.sha256(payload).hexdigest() != digest:
            raise CheckpointError(f"{label}: stored digest does not match array bytes")
        return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"duplicate parameter {name!r} in checkpoint")
        tensors[name] = r.array(name)
    (has_opt,) = r.unpack("<B")
    opt_step = opt_m = opt_v = None
    if has_opt:
        (opt_step,) = r.unpack("<Q")
        opt_m = [r.array(f"m[{i}]") for i in range(count)]
        opt_v = [r.array(f"v[{i}]") for i in range(count)]
    if r.off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.off} trailing bytes after checkpoint data")
    return Checkpoint(config=header.get("config", {}), meta=header.get("meta", {}),
                      tensors=tensors, opt_step=opt_step, opt_m=opt_m, opt_v=opt_v)


def load_model(path):
    """Rebuild a Model from a checkpoint; returns (model, checkpoint)."""
    from .model import Model, ModelConfig

    ckpt = load_checkpoint(path)
    model = Model(ModelConfig.from_dict(ckpt.config), seed=int(ckpt.meta.get("seed", 0)))
    model.load_state(ckpt.tensors)
    return model, ckpt


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
