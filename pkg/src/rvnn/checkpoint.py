"""Versioned parameter container.

Layout: 8-byte magic ``RVNN0001``, a little-endian uint64 manifest length, a
JSON manifest (parameter names, shapes, dtypes, byte offsets, plus free-form
metadata), then the concatenated raw little-endian value arrays.
"""

import json
import struct

import numpy as np

MAGIC = b"RVNN0001"


def save_params(path, named_params, meta=None):
    """Write (name, tensor-or-array) pairs and optional metadata to ``path``."""
    entries = []
    blobs = []
    offset = 0
    for name, value in named_params:
        arr = np.ascontiguousarray(getattr(value, "data", value))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": le.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"params": entries, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)


def load_params(path):
    """Read a container back; returns (dict name -> ndarray, meta dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a parameter container (bad magic)")
    (mlen,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ValueError(f"{path}: corrupt manifest: {err}")
    data = blob[16 + mlen :]
    params = {}
    for entry in manifest["params"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(data):
            raise ValueError(f"{path}: truncated container (missing {entry['name']!r} data)")
        arr = np.frombuffer(data[start : start + n], dtype=np.dtype(entry["dtype"]))
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return params, manifest.get("meta", {})


def restore_params(named_params, loaded):
    """Copy loaded arrays into live tensors in place; shapes must match."""
    for name, tensor in named_params:
        if name not in loaded:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        arr = loaded[name]
        if tuple(arr.shape) != tuple(tensor.data.shape):
            raise ValueError(f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
