"""Little-endian binary container for dataset caches and checkpoints.

Layout (all integers little-endian):

    magic      4 bytes  b"MVCL"
    version    u16      currently 1
    hdr_len    u32      length of the UTF-8 JSON header blob
    header     bytes    JSON object (dims, counts, seed, free-form metadata)
    n_arrays   u32
    then per array:
        name_len   u16
        name       UTF-8 bytes
        dtype_len  u8
        dtype      UTF-8 bytes, numpy dtype string, little-endian or endian-free
        ndim       u8
        shape      ndim * u64
        data       raw array bytes, C order

Round-trips are bit-exact: array bytes are written verbatim and read back
with the recorded dtype and shape.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"MVCL"
VERSION = 1


class ContainerError(ValueError):
    """Malformed or truncated container file."""


def _canonical_dtype(arr: np.ndarray) -> np.ndarray:
    """Return arr converted to a little-endian (or endian-free) dtype."""
    dt = arr.dtype
    if dt.byteorder == ">":
        return arr.astype(dt.newbyteorder("<"))
    return arr


def write_container(path: str, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write header + named arrays to `path` atomically (tmp file + rename)."""
    hdr_blob = json.dumps(header, sort_keys=True).encode("utf-8")
    dirpath = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=dirpath, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<HI", VERSION, len(hdr_blob)))
            f.write(hdr_blob)
            f.write(struct.pack("<I", len(arrays)))
            for name, arr in arrays.items():
                arr = _canonical_dtype(np.asarray(arr))
                if not arr.flags.c_contiguous:
                    # ascontiguousarray would also promote 0-d to 1-d, so
                    # only call it when a copy is actually needed
                    arr = np.ascontiguousarray(arr)
                name_b = name.encode("utf-8")
                dtype_b = arr.dtype.str.encode("ascii")
                f.write(struct.pack("<H", len(name_b)))
                f.write(name_b)
                f.write(struct.pack("<B", len(dtype_b)))
                f.write(dtype_b)
                f.write(struct.pack("<B", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
                f.write(arr.tobytes(order="C"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container written by write_container; returns (header, arrays)."""
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ContainerError(f"truncated container: reading {what} at offset {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise ContainerError(f"bad magic in {path!r}: expected {MAGIC!r}")
    version, hdr_len = struct.unpack("<HI", take(6, "version/header length"))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    header = json.loads(take(hdr_len, "header").decode("utf-8"))
    (n_arrays,) = struct.unpack("<I", take(4, "array count"))
    arrays: dict[str, np.ndarray] = {}
    for i in range(n_arrays):
        (name_len,) = struct.unpack("<H", take(2, f"array {i} name length"))
        name = take(name_len, f"array {i} name").decode("utf-8")
        (dtype_len,) = struct.unpack("<B", take(1, f"array {name} dtype length"))
        dtype = np.dtype(take(dtype_len, f"array {name} dtype").decode("ascii"))
        (ndim,) = struct.unpack("<B", take(1, f"array {name} ndim"))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"array {name} shape")) if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = take(count * dtype.itemsize, f"array {name} data")
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    if off != len(blob):
        raise ContainerError(f"{len(blob) - off} trailing bytes after last array")
    return header, arrays
