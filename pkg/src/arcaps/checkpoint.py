"""Binary checkpoint container.

Layout:
  8 bytes   magic "ARCAPS01"
  8 bytes   metadata length, unsigned little-endian
  N bytes   metadata, UTF-8 text (config lines plus optimizer step count)
  records until end of file, each:
    8 bytes           name length (LE unsigned)
    name bytes        UTF-8
    8 bytes           rank (LE unsigned)
    rank * 8 bytes    extents (LE unsigned)
    prod(extents)*4   float32 values, little-endian

Round-trips are byte exact: values are written raw from float32 storage.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InputDataError

MAGIC = b"ARCAPS01"


def _write_record(fh, name, array):
    data = np.ascontiguousarray(array, dtype="<f4")
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<Q", data.ndim))
    for extent in data.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(data.tobytes())


def _read_exact(fh, count, path, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise InputDataError(
            f"{path}: truncated checkpoint while reading {what} "
            f"(wanted {count} bytes at offset {fh.tell() - len(buf)})")
    return buf


def save(path, metadata_text, arrays):
    """Write metadata plus named float32 arrays (insertion order kept)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        meta = metadata_text.encode("utf-8")
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        for name, arr in arrays.items():
            _write_record(fh, name, arr)


def load(path):
    """Read a checkpoint; returns (metadata_text, name -> float32 array)."""
    arrays = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise InputDataError(
                f"{path}: bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, path, "metadata length"))
        meta = _read_exact(fh, meta_len, path, "metadata").decode("utf-8")
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise InputDataError(
                    f"{path}: truncated record header at offset {fh.tell() - len(head)}")
            (name_len,) = struct.unpack("<Q", head)
            name = _read_exact(fh, name_len, path, "record name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8, path, f"rank of {name!r}"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, path, f"extent of {name!r}"))[0]
                for _ in range(rank)
            )
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, count * 4, path, f"data of {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return meta, arrays
