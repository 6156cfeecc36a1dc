"""Binary checkpoint format for model bundles.

Layout (all integers little-endian):

    magic   b"RGAN"
    u32     format version (currently 1)
    u16+s   architecture id (UTF-8)
    u32     epoch
    u16+s   mode (UTF-8)
    u64     seed
    u32     tensor count
    per tensor:
        u16+s   name (UTF-8)
        u8      frozen flag
        u8      ndim
        u32*n   dims
        f32*    row-major little-endian data

Round trips are byte-exact; loads refuse wrong magic/version, truncated
files, and any name/shape that disagrees with the declared architecture.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .networks import ModelBundle, param_template

MAGIC = b"RGAN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointMeta:
    epoch: int = 0
    mode: str = ""
    seed: int = 0


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"string too long for checkpoint: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint "
                                  f"(wanted {n} bytes at offset {self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")


def save_checkpoint(bundle: ModelBundle, meta: CheckpointMeta, path: str) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(bundle.architecture_id),
             struct.pack("<I", meta.epoch), _pack_str(meta.mode),
             struct.pack("<Q", meta.seed & (2 ** 64 - 1)),
             struct.pack("<I", len(bundle.params))]
    for name, p in bundle.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<BB", 1 if name in bundle.frozen_names else 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path: str) -> tuple[ModelBundle, CheckpointMeta]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                              f"(expected {VERSION})")
    arch = r.string()
    expected = param_template(arch)     # raises on unknown architecture
    meta = CheckpointMeta(epoch=r.u32(), mode=r.string(), seed=r.u64())
    count = r.u32()
    if count != len(expected):
        raise CheckpointError(f"{path}: {count} tensors stored, architecture "
                              f"{arch} declares {len(expected)}")
    bundle = ModelBundle(architecture_id=arch)
    for _ in range(count):
        name = r.string()
        frozen = bool(r.u8())
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name!r} for {arch}")
        if shape != expected[name]:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {shape}, "
                                  f"architecture {arch} requires {expected[name]}")
        n_elem = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * n_elem), dtype="<f4").reshape(shape)
        bundle.add(name, data.copy(), frozen=frozen)
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    bundle.validate()
    return bundle, meta
