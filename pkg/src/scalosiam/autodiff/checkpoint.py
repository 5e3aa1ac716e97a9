"""Binary parameter checkpoints.

Layout (all little-endian)::

    b"OSTB"                      magic
    u16  version                 currently 1
    repeated per parameter:
        u16  name length, then that many UTF-8 bytes
        u8   rank
        u32  dims[rank]
        f32  payload, row-major, prod(dims) values
    u32  CRC32 of every preceding byte (zlib polynomial)

Records run until the final 4 bytes, which hold the checksum.
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

MAGIC = b"OSTB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(params):
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name, array in params.items():
        array = np.asarray(array)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob):
    if len(blob) < 10 or blob[:4] != MAGIC:
        raise CheckpointError("not an OSTB checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos, params = 6, {}
    while pos < len(body):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        end = pos + 4 * count
        if end > len(body):
            raise CheckpointError(f"truncated payload for {name!r}")
        params[name] = np.frombuffer(body[pos:end], dtype="<f4").reshape(dims).copy()
        pos = end
    return params


def atomic_write(path, data, mode="wb"):
    """Write ``data`` to ``path`` via a same-directory temp file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, params):
    atomic_write(path, encode(params))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
