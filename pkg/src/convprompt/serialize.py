"""Binary tensor persistence.

Single tensor: little-endian, magic "CPT1", u32 rank, u32 dims, f64
payload in row-major order. Archives store named tensors as a JSON index
header (name -> offset, shape) followed by concatenated "CPT1" blobs;
offsets are relative to the start of the blob region. A free-form JSON
manifest may ride along in the header.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CPT1"


def dumps_tensor(arr) -> bytes:
    # note: ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(arr, dtype="<f8", order="C")
    head = MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def loads_tensor(buf: bytes, offset: int = 0):
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("bad tensor magic")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    n = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=start).reshape(shape)
    return arr.astype(np.float64), start + 8 * n


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        arr, _ = loads_tensor(fh.read())
    return arr


def save_archive(path, tensors: dict, manifest: dict | None = None):
    """Write named tensors with a JSON index header and optional manifest."""
    blobs = {}
    region = b""
    for name, arr in tensors.items():
        blobs[name] = {"offset": len(region), "shape": list(np.shape(arr))}
        region += dumps_tensor(arr)
    header = json.dumps(
        {"index": blobs, "manifest": manifest or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(region)


def load_archive(path):
    """Return (tensors dict, manifest dict); round-trips bit-exactly."""
    with open(path, "rb") as fh:
        buf = fh.read()
    (hlen,) = struct.unpack_from("<I", buf, 0)
    header = json.loads(buf[4:4 + hlen].decode("utf-8"))
    base = 4 + hlen
    tensors = {}
    for name, entry in header["index"].items():
        arr, _ = loads_tensor(buf, base + entry["offset"])
        tensors[name] = arr
    return tensors, header["manifest"]
