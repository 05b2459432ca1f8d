"""Versioned binary container used for dataset and checkpoint files.

Layout (all integers little-endian)::

    magic        4 bytes   e.g. b"DPCT" (checkpoint) or b"DPDS" (dataset)
    version      u16
    n_sections   u32
    n_sections x section:
        name_len     u16
        name         utf-8 bytes
        payload_len  u64
        payload      bytes
        crc32        u32   (of payload)

Array payloads::

    dtype   1 byte   b"d" float64 or b"q" int64
    ndim    u8
    dims    ndim x u64
    data    row-major, little-endian

JSON payloads are UTF-8 text written with sorted keys.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import IntegrityError, VersionError

_DTYPES = {b"d": np.dtype("<f8"), b"q": np.dtype("<i8")}


def pack_array(a) -> bytes:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        code, dt = b"d", _DTYPES[b"d"]
    elif a.dtype.kind in "iub":
        code, dt = b"q", _DTYPES[b"q"]
    else:
        raise TypeError(f"cannot store dtype {a.dtype}")
    head = code + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype=dt).tobytes()


def unpack_array(buf: bytes) -> np.ndarray:
    code = buf[:1]
    if code not in _DTYPES:
        raise IntegrityError(f"unknown array dtype code {code!r}")
    (ndim,) = struct.unpack_from("<B", buf, 1)
    shape = struct.unpack_from(f"<{ndim}Q", buf, 2)
    start = 2 + 8 * ndim
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) - start != count * dt.itemsize:
        raise IntegrityError("array payload size does not match its shape")
    return np.frombuffer(buf, dtype=dt, offset=start, count=count).reshape(shape).astype(dt.newbyteorder("="))


def pack_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def unpack_json(buf: bytes):
    return json.loads(buf.decode("utf-8"))


def write_container(path, magic: bytes, version: int, sections) -> None:
    """Atomically write ``sections`` (iterable of ``(name, payload)``) to ``path``."""
    parts = [magic, struct.pack("<H", version)]
    sections = list(sections)
    parts.append(struct.pack("<I", len(sections)))
    for name, payload in sections:
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<Q", len(payload)), payload,
                  struct.pack("<I", zlib.crc32(payload))]
    data = b"".join(parts)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path, magic: bytes, version: int) -> dict[str, bytes]:
    """Read and verify a container; returns section name -> payload."""
    data = Path(path).read_bytes()

    def need(offset, size, what):
        if offset + size > len(data):
            raise IntegrityError(f"file truncated while reading {what}", offset)

    need(0, 6, "header")
    if data[:4] != magic:
        raise IntegrityError(f"bad magic {data[:4]!r}, expected {magic!r}", 0)
    (found,) = struct.unpack_from("<H", data, 4)
    if found != version:
        raise VersionError(f"unsupported format version {found}; this build reads version {version}")
    need(6, 4, "section count")
    (count,) = struct.unpack_from("<I", data, 6)
    pos = 10
    out = {}
    for _ in range(count):
        need(pos, 2, "section name length")
        (nlen,) = struct.unpack_from("<H", data, pos)
        need(pos + 2, nlen + 8, "section header")
        name = data[pos + 2:pos + 2 + nlen].decode("utf-8", errors="replace")
        (plen,) = struct.unpack_from("<Q", data, pos + 2 + nlen)
        start = pos + 10 + nlen
        need(start, plen + 4, f"section {name!r}")
        payload = data[start:start + plen]
        (crc,) = struct.unpack_from("<I", data, start + plen)
        if zlib.crc32(payload) != crc:
            raise IntegrityError(f"checksum mismatch in section {name!r}", start)
        out[name] = payload
        pos = start + plen + 4
    if pos != len(data):
        raise IntegrityError("trailing bytes after last section", pos)
    return out
