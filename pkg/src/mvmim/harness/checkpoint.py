"""MSKE checkpoint container.

Layout (all integers little-endian):
    b"MSKE" | u32 version | u32 metadata length | canonical JSON metadata
    then per tensor: u16 name length | name (utf-8) | u8 rank | u32 dims[rank] | f32 payload (row-major)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..backbone import BackboneConfig, BackboneState, param_shapes
from ..errors import FormatError, MissingFileError

MAGIC = b"MSKE"
VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


@dataclass
class Checkpoint:
    metadata: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # name -> float32 ndarray, insertion order preserved

    def to_bytes(self) -> bytes:
        meta = canonical_json(self.metadata).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            a = np.ascontiguousarray(arr, dtype="<f4")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<B", a.ndim))
            parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
            parts.append(a.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise FormatError("not an MSKE checkpoint (bad magic)")
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        off = 12
        metadata = json.loads(buf[off : off + meta_len].decode("utf-8"))
        off += meta_len
        tensors = {}
        while off < len(buf):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = off + 4 * count
            if end > len(buf):
                raise FormatError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(buf[off:end], dtype="<f4").reshape(dims).copy()
            off = end
        return cls(metadata, tensors)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


def state_to_checkpoint(state, metadata: dict | None = None) -> Checkpoint:
    meta = {"model": state.config.to_dict()}
    meta.update(metadata or {})
    return Checkpoint(meta, {name: p.data.astype("<f4") for name, p in state.params.items()})


def checkpoint_to_state(ckpt: Checkpoint) -> BackboneState:
    cfg = BackboneConfig(**ckpt.metadata["model"])
    cfg.validate()
    expected = param_shapes(cfg)
    if set(expected) != set(ckpt.tensors):
        missing = sorted(set(expected) - set(ckpt.tensors))
        extra = sorted(set(ckpt.tensors) - set(expected))
        raise FormatError(f"checkpoint tensors do not match config (missing {missing[:3]}, extra {extra[:3]})")
    params = {}
    for name, shape in expected.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != tuple(shape):
            raise FormatError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        params[name] = T.parameter(arr.astype(np.float64), name)
    return BackboneState(cfg, params)
