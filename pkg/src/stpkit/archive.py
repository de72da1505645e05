"""Single-file named-tensor archive: JSON header + packed little-endian data.

Layout:
    magic "NTAR1\\n" | uint64 LE header length | header JSON (UTF-8) | raw data

The header carries user metadata under "meta" and an ordered tensor index
under "tensors" ({name, dtype, shape}); tensor payloads are concatenated in
index order, little-endian, C-contiguous. The format is deliberately trivial
so a non-Python inference path can read it with a few dozen lines.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTAR1\n"


class ArchiveError(Exception):
    pass


def save_archive(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    index = []
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<=|"), "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    doc = {"meta": header, "tensors": index}
    head = json.dumps(doc, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in payloads:
            fh.write(blob)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ArchiveError(f"{path} is not a tensor archive (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ArchiveError(f"{path} is not a tensor archive (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        doc = json.loads(fh.read(hlen).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        for entry in doc["tensors"]:
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ArchiveError(f"{path}: truncated payload for tensor {entry['name']!r}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
            tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return doc["meta"], tensors
