"""Little-endian checkpoint container: named float64 tensors plus a config digest.

Layout::

    b"MCKP" | u32 version | u32 digest_len | digest | u32 count |
    count * (u32 name_len | name (utf-8) | u32 rank | rank * u64 dims | float64 data)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> bytes:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).digest()


def encode(tensors: dict[str, np.ndarray], digest: bytes) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(digest)), digest, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], bytes]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 4
    try:
        version, dlen = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        digest = blob[pos:pos + dlen]
        pos += dlen
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            tensors[name] = data.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint tensor table")
    return tensors, digest


def save(path: str | Path, tensors: dict[str, np.ndarray], digest: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, digest))
    os.replace(tmp, path)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], bytes]:
    return decode(Path(path).read_bytes())
