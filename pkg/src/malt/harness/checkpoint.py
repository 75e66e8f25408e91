"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MALTCKPT"                      magic, 8 bytes
    u32  format version
    u64  byte length of the JSON header, then the UTF-8 JSON text
    u64  number of tensor records
    per record:
        u32 name length, UTF-8 name
        u32 rank, rank x u64 extents
        prod(extents) x f64 payload

The JSON header holds the run config plus bookkeeping such as the step. It is
written with sorted keys so identical state produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MALTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Bad magic, unsupported version or truncated/corrupt file."""


def dumps(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<Q", len(text)), text, struct.pack("<Q", len(tensors))]
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint: magic {magic!r} != {MAGIC!r}")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    try:
        header = json.loads(r.take(r.unpack("<Q")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    tensors = {}
    for _ in range(r.unpack("<Q")):
        name = r.take(r.unpack("<I")).decode("utf-8")
        rank = r.unpack("<I")
        shape = tuple(r.unpack("<Q") for _ in range(rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record")
    return header, tensors


def save(path, header: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(header, tensors))
    tmp.replace(path)
    return path


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def prefixed(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def strip(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}
