"""The ``TAKD`` named-array container used for datasets and checkpoints.

Layout (all integers little-endian)::

    b"TAKD" | version u16 | record count u32
    per record:
        name length u16 | UTF-8 name | dtype tag u8 | ndim u8 | dims u32 * ndim
        | payload (C order, little-endian) | CRC32(payload) u32
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"TAKD"
VERSION = 1

DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


def encode(records) -> bytes:
    items = list(records.items()) if isinstance(records, Mapping) else list(records)
    out = [MAGIC, struct.pack("<HI", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.dtype not in TAGS:
            raise TypeError(f"record {name!r}: unsupported dtype {arr.dtype}")
        tag = TAGS[arr.dtype]
        raw = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(payload)
        out.append(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    return b"".join(out)


def decode(buf: bytes) -> dict:
    mv = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(mv):
            raise ContainerError(f"truncated container: need {n} bytes at offset {pos}")
        chunk = mv[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError("bad magic, not a TAKD container")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    records = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in DTYPES:
            raise ContainerError(f"record {name!r}: unknown dtype tag {tag}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = DTYPES[tag]
        payload = bytes(take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize))
        (crc,) = struct.unpack("<I", take(4))
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ChecksumError(f"checksum mismatch in record {name!r}")
        records[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(mv):
        raise ContainerError(f"{len(mv) - pos} trailing bytes after last record")
    return records


def write(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(records))
    return path


def read(path) -> dict:
    return decode(Path(path).read_bytes())


def group(records: Mapping, prefix: str) -> dict:
    """Sub-dictionary of records under ``prefix/`` with the prefix stripped."""
    p = prefix.rstrip("/") + "/"
    return {k[len(p):]: v for k, v in records.items() if k.startswith(p)}


def flatten(tree: Mapping, prefix: str = "") -> Iterable:
    for k, v in tree.items():
        name = f"{prefix}/{k}" if prefix else k
        if isinstance(v, Mapping):
            yield from flatten(v, name)
        else:
            yield name, v
