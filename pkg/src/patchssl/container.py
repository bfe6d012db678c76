"""Binary tensor container used for checkpoints, patch stores and score maps.

Layout::

    b"PSSLCKPT"                 8-byte magic
    uint64 (little endian)      length of the JSON header in bytes
    JSON header (utf-8)         {"version", "tensors", "meta", "data_bytes", "crc32"}
    data blob                   concatenated little-endian float32 arrays

``tensors`` maps each tensor name to ``{"dtype": "<f4", "shape": [...],
"offset": int, "nbytes": int}``; offsets are relative to the start of the
data blob. ``crc32`` covers the data blob only.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"PSSLCKPT"
VERSION = 1
_DTYPE = np.dtype("<f4")


class ContainerError(IOError):
    """Raised for malformed, truncated or corrupted container files."""


def save_container(
    path: str | os.PathLike,
    tensors: Mapping[str, np.ndarray],
    meta: Mapping[str, Any] | None = None,
) -> None:
    """Write ``tensors`` (cast to float32) and JSON-serialisable ``meta``.

    The file is written to a temporary sibling and renamed so a crash never
    leaves a half-written container behind.
    """
    entries: dict[str, dict[str, Any]] = {}
    blobs: list[bytes] = []
    offset = 0
    for name, array in tensors.items():
        arr = np.asarray(array).astype(_DTYPE)  # keeps 0-d shapes, unlike ascontiguousarray
        raw = arr.tobytes(order="C")
        entries[name] = {
            "dtype": _DTYPE.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    data = b"".join(blobs)
    header = {
        "version": VERSION,
        "tensors": entries,
        "meta": dict(meta or {}),
        "data_bytes": len(data),
        "crc32": zlib.crc32(data),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(data)
    os.replace(tmp, path)


def read_header(path: str | os.PathLike) -> dict[str, Any]:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh)
    return header


def _read_header(fh) -> tuple[dict[str, Any], int]:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ContainerError("not a patchssl container (bad magic)")
    raw_len = fh.read(8)
    if len(raw_len) != 8:
        raise ContainerError("truncated container header")
    (n,) = struct.unpack("<Q", raw_len)
    raw = fh.read(n)
    if len(raw) != n:
        raise ContainerError("truncated container header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except ValueError as exc:
        raise ContainerError(f"corrupt container header: {exc}") from exc
    return header, len(MAGIC) + 8 + n


def load_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a container written by :func:`save_container`.

    Returns ``(tensors, meta)``. Raises :class:`ContainerError` when the file
    is shorter than the header promises or the checksum does not match.
    """
    with open(path, "rb") as fh:
        header, _ = _read_header(fh)
        data = fh.read()
    expected = int(header["data_bytes"])
    if len(data) != expected:
        raise ContainerError(
            f"container length mismatch: expected {expected} data bytes, found {len(data)}"
        )
    if zlib.crc32(data) != header["crc32"]:
        raise ContainerError("container checksum mismatch")

    tensors: dict[str, np.ndarray] = {}
    for name, entry in header["tensors"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(data):
            raise ContainerError(f"tensor {name!r} extends past end of data")
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]), count=nbytes // 4, offset=start)
        tensors[name] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]
