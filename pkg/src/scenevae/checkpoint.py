"""The VAEC tensor container.

Layout (little-endian)::

    b"VAEC"  magic
    u32      format version
    u32      tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8  ndim, then ndim x u32 dims
        raw float32 values, row-major
    remaining bytes: UTF-8 JSON metadata (model config, kind tag)
"""

import json
import struct

import numpy as np

MAGIC = b"VAEC"
VERSION = 1


class FormatError(ValueError):
    pass


def dumps(tensors: dict, meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(json.dumps(meta, sort_keys=True).encode("utf-8"))
    return b"".join(parts)


def loads(buf: bytes):
    """Return ``(tensors, meta)``; raises FormatError on any corruption."""
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("not a VAEC checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported VAEC version {version}")
    off = 12
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError("truncated tensor name")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if off + nbytes > len(buf):
                raise FormatError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims).copy()
            off += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated VAEC file: {exc}") from None
    try:
        meta = json.loads(buf[off:].decode("utf-8")) if off < len(buf) else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad metadata block: {exc}") from None
    return tensors, meta


def save(path, tensors: dict, meta: dict):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, meta))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
