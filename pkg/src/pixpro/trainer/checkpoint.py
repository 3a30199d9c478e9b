"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PXPRO1"  u32 version  32-byte sha256 config digest
    u32 len + config JSON   u64 step   u32 len + RNG-state JSON
    u32 n_entries, then per entry:
        u16 name_len, name, u8 dtype code, u8 ndim, u32 * ndim shape,
        u64 payload offset, u64 payload bytes
    payload: raw row-major tensor bytes, in manifest order
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PXPRO1"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    step: int
    tensors: dict[str, np.ndarray]
    rng_state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def config_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def manifest(self) -> list[tuple[str, str, tuple[int, ...]]]:
        return [(k, str(v.dtype), tuple(v.shape)) for k, v in self.tensors.items()]


def _pack_str(s: str, fmt: str = "<I") -> bytes:
    raw = s.encode()
    return struct.pack(fmt, len(raw)) + raw


def to_bytes(ckpt: Checkpoint) -> bytes:
    cfg_json = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":"))
    head = [MAGIC, struct.pack("<I", FORMAT_VERSION), bytes.fromhex(ckpt.config_digest),
            _pack_str(cfg_json), struct.pack("<Q", ckpt.step),
            _pack_str(json.dumps(ckpt.rng_state, sort_keys=True, separators=(",", ":"))),
            struct.pack("<I", len(ckpt.tensors))]
    payload = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        head.append(_pack_str(name, "<H"))
        head.append(struct.pack("<BB", code, arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.append(struct.pack("<QQ", offset, len(raw)))
        payload.append(raw)
        offset += len(raw)
    return b"".join(head + payload)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: needed {self.pos + n} bytes, found {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, found {magic!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version: expected {FORMAT_VERSION}, found {version}")
    digest = r.take(32).hex()
    (n,) = r.unpack("<I")
    config = json.loads(r.take(n))
    (step,) = r.unpack("<Q")
    (n,) = r.unpack("<I")
    rng_state = json.loads(r.take(n))
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        offset, nbytes = r.unpack("<QQ")
        entries.append((name, _DTYPES[code], shape, offset, nbytes))
    base = r.pos
    expected = base + sum(e[4] for e in entries)
    if len(blob) != expected:
        raise CheckpointError(f"truncated checkpoint: expected {expected} bytes, found {len(blob)}")
    tensors = {}
    for name, dt, shape, offset, nbytes in entries:
        if int(np.prod(shape)) * dt.itemsize != nbytes:
            raise CheckpointError(f"{name}: payload size {nbytes} does not match shape {shape}")
        raw = blob[base + offset: base + offset + nbytes]
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    ckpt = Checkpoint(config, step, tensors, rng_state, version)
    if ckpt.config_digest != digest:
        raise CheckpointError("config digest does not match the stored config")
    return ckpt


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
