"""Binary parameter files with a JSON sidecar for configuration.

Layout: 8-byte magic ``VFLOWCKP``, u32 version, u32 tensor count, then per
tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims and the
little-endian float32 payload. All integers are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"VFLOWCKP"
VERSION = 1


def encode_tensors(tensors: dict[str, Tensor | np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return tensors


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load(path) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    tensors = {k: Tensor(v, name=k) for k, v in decode_tensors(path.read_bytes()).items()}
    side = sidecar_path(path)
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    return tensors, meta
