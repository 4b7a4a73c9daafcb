"""Binary container: magic, JSON header, raw little-endian row-major payloads.

Layout::

    8 bytes   magic  b"LRSHARE1"
    8 bytes   header length N (uint64, little endian)
    N bytes   UTF-8 JSON header; header["tensors"] lists name/dtype/shape/offset/nbytes
    ...       payloads, offsets relative to the end of the header
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LRSHARE1"


def write_container(path, header: dict, tensors: dict) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps({**header, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_container(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an lrshare container")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode("utf-8"))
    base = 16 + n
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return header, tensors
