"""Container format shared by checkpoints, optimizer state and datasets.

Byte layout::

    offset 0   4 bytes   magic b"CAWB"
    offset 4   4 bytes   header length H, uint32 little-endian
    offset 8   H bytes   UTF-8 JSON header (sorted keys, compact separators)
    offset 8+H           payload: every float array as little-endian float64,
                         then every int array as little-endian int32, each
                         C-ordered, in the order listed in the header

Header keys: ``kind``, ``version``, ``float_shapes``, ``int_shapes``,
``payload_bytes``, ``crc32`` (zlib CRC-32 of the payload) and ``meta``
(format-specific fields).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import (ChecksumError, CorruptHeaderError, LengthMismatchError,  # noqa: F401
                     TruncatedPayloadError, VersionMismatchError)

MAGIC = b"CAWB"
_PREFIX = struct.Struct("<4sI")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode(kind: str, version: int, meta: dict, float_arrays=(), int_arrays=()) -> bytes:
    floats = [np.ascontiguousarray(a, dtype="<f8") for a in float_arrays]
    ints = [np.ascontiguousarray(a, dtype="<i4") for a in int_arrays]
    payload = b"".join(a.tobytes() for a in floats) + b"".join(a.tobytes() for a in ints)
    header = {
        "kind": kind,
        "version": version,
        "float_shapes": [list(a.shape) for a in floats],
        "int_shapes": [list(a.shape) for a in ints],
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
        "meta": meta,
    }
    hbytes = canonical_json(header).encode("utf-8")
    return _PREFIX.pack(MAGIC, len(hbytes)) + hbytes + payload


def write(path, kind: str, version: int, meta: dict, float_arrays=(), int_arrays=()) -> None:
    blob = encode(kind, version, meta, float_arrays, int_arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def decode(blob: bytes, kind: str, version: int):
    """Return (meta, float_arrays, int_arrays) or raise a typed FileFormatError."""
    if len(blob) < _PREFIX.size:
        raise TruncatedPayloadError(f"file is {len(blob)} bytes, shorter than the fixed prefix")
    magic, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r}")
    if len(blob) < _PREFIX.size + hlen:
        raise TruncatedPayloadError("file ends inside the header")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise CorruptHeaderError("header must be a JSON object")
    if header.get("kind") != kind:
        raise CorruptHeaderError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    if header.get("version") != version:
        raise VersionMismatchError(
            f"{kind} format version {header.get('version')!r} is not supported (expected {version})")
    try:
        float_shapes = [tuple(int(d) for d in s) for s in header["float_shapes"]]
        int_shapes = [tuple(int(d) for d in s) for s in header["int_shapes"]]
        declared = int(header["payload_bytes"])
        crc = int(header["crc32"])
        meta = header["meta"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"header missing/invalid field: {exc}") from exc
    if any(d < 0 for s in float_shapes + int_shapes for d in s):
        raise CorruptHeaderError("negative dimension in header")

    implied = sum(8 * int(np.prod(s)) for s in float_shapes) + sum(4 * int(np.prod(s)) for s in int_shapes)
    if implied != declared:
        raise LengthMismatchError(f"shapes imply {implied} payload bytes, header declares {declared}")
    payload = blob[_PREFIX.size + hlen:]
    if len(payload) < declared:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header declares {declared}")
    if len(payload) > declared:
        raise LengthMismatchError(f"payload has {len(payload)} bytes, header declares {declared}")
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload checksum mismatch")

    offset = 0
    floats, ints = [], []
    for shape in float_shapes:
        n = int(np.prod(shape))
        floats.append(np.frombuffer(payload, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape))
        offset += 8 * n
    for shape in int_shapes:
        n = int(np.prod(shape))
        ints.append(np.frombuffer(payload, dtype="<i4", count=n, offset=offset).astype(np.int64).reshape(shape))
        offset += 4 * n
    return meta, floats, ints


def read(path, kind: str, version: int):
    return decode(Path(path).read_bytes(), kind, version)
