"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"SVLP" | version | entry count | entries...
    entry = name length | UTF-8 name | dtype u8 | ndim | dims... | raw LE data

dtype codes: 0 = f32, 1 = f64, 2 = u8 (masks and text metadata).
Entries are written in the order given, so a dict round-trips byte-for-byte.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SVLP"
VERSION = 1
META_ENTRY = "__meta__"

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {code: dt for dt, code in _CODES.items()}


class CheckpointError(IOError):
    pass


def _norm_dtype(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype
    if dt == np.bool_:
        return arr.astype(np.uint8)
    if dt.kind == "f":
        return arr.astype("<f4" if dt.itemsize == 4 else "<f8", copy=False)
    if dt == np.uint8:
        return arr
    raise CheckpointError(f"unsupported dtype {dt}")


def encode(entries: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = _norm_dtype(np.asarray(arr))
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {pos + n} bytes, have {len(view)}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise CheckpointError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        entries[name] = np.frombuffer(bytes(take(nbytes)), dtype=dt).reshape(dims).copy()
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last entry")
    return entries


def save(path: str | os.PathLike, entries: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(entries))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def pack_meta(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_meta(arr: np.ndarray) -> dict:
    return json.loads(arr.tobytes().decode("utf-8"))
