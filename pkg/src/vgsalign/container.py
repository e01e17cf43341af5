"""Tensor container shared by checkpoints and the MFCC cache.

Layout: a magic line, a line holding the byte length of a JSON header, the
header itself (free-form ``meta`` plus a tensor directory of name, dtype,
shape and byte offset), then raw little-endian tensor data.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"VGSALIGN-TENSORS 1\n"
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class ContainerError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        directory.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": directory}, sort_keys=True).encode()
    return MAGIC + f"{len(header)}\n".encode() + header + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if not blob.startswith(MAGIC):
        raise ContainerError("not a tensor container (bad magic)")
    rest = blob[len(MAGIC) :]
    nl = rest.index(b"\n")
    size = int(rest[:nl])
    header = json.loads(rest[nl + 1 : nl + 1 + size])
    data = memoryview(rest)[nl + 1 + size :]
    tensors = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(data):
            raise ContainerError(f"tensor {entry['name']!r} truncated")
        tensors[entry["name"]] = np.frombuffer(data[start:end], dtype=dtype).reshape(entry["shape"]).copy()
    return tensors, header["meta"]


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(tensors, meta)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode(Path(path).read_bytes())
