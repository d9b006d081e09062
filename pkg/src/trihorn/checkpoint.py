"""THN1 parameter checkpoints.

Layout (all integers little-endian)::

    b"THN1"  u32 version  u32 count
    count x { u32 name_len, name (UTF-8), u32 rank, rank x u64 dim, float32 payload }
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"THN1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(state: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")  # tobytes() below is C order; keeps rank 0
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a THN1 checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch (corrupt or truncated file)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(body):
                raise CheckpointError(f"record {name!r} runs past the end of the file")
            out[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
            pos += size
    except struct.error:
        raise CheckpointError("truncated checkpoint record") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last record")
    return out


def save_checkpoint(path, state: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(state))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def save_model(path, model) -> Path:
    return save_checkpoint(path, model.state_dict())


def load_model_weights(path, model):
    model.load_state_dict(load_checkpoint(path))
    return model
