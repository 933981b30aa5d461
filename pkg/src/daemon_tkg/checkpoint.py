"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic      8s   b"DAEMONCK"
    version    u32
    digest     32s  sha256 of the canonical config JSON
    relations  u32  base relation count
    dim, layers u32 u32
    config     u32 length + UTF-8 JSON
    count      u32  number of arrays
    per array: u16 name length, name, u8 ndim, u64 * ndim shape, float64 data
    adam_step  u64
    checksum   32s  sha256 of everything above

Optimizer moments, when present, are arrays named ``adam.m/<param>`` and
``adam.v/<param>``. Nothing in the file is indexed by entity.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DAEMONCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    num_base_relations: int
    dim: int
    layers: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(_config_json(self.config)).digest()

    def check_compatible(self, num_base_relations: int) -> None:
        if num_base_relations != self.num_base_relations:
            raise IncompatibleCheckpoint(
                f"checkpoint has {self.num_base_relations} base relations, dataset has {num_base_relations}")


def _config_json(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode()


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f8")
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def dumps(ckpt: Checkpoint) -> bytes:
    cfg = _config_json(ckpt.config)
    arrays = dict(ckpt.params)
    arrays.update({f"adam.m/{k}": v for k, v in ckpt.adam_m.items()})
    arrays.update({f"adam.v/{k}": v for k, v in ckpt.adam_v.items()})
    body = [
        MAGIC,
        struct.pack("<I", VERSION),
        ckpt.digest,
        struct.pack("<III", ckpt.num_base_relations, ckpt.dim, ckpt.layers),
        struct.pack("<I", len(cfg)), cfg,
        struct.pack("<I", len(arrays)),
    ]
    body.extend(_pack_array(k, v) for k, v in arrays.items())
    body.append(struct.pack("<Q", ckpt.adam_step))
    blob = b"".join(body)
    return blob + hashlib.sha256(blob).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 36 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    r = _Reader(blob[:-32])
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {VERSION}")
    if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise ChecksumError("checkpoint checksum mismatch (file corrupted)")
    digest = r.take(32)
    nrel, dim, layers = r.unpack("<III")
    (clen,) = r.unpack("<I")
    config = json.loads(r.take(clen))
    (count,) = r.unpack("<I")
    params, m, v = {}, {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    (step,) = r.unpack("<Q")
    ckpt = Checkpoint(config, nrel, dim, layers, params, m, v, step)
    if ckpt.digest != digest:
        raise ChecksumError("config digest does not match embedded config")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
