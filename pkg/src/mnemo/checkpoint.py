"""Checkpoint directory format: manifest.json + raw little-endian blobs.

The manifest maps tensor names to {shape, dtype, offset, blob}. Model
checkpoints store float32 (documented precision loss on save); memory
snapshots store float64 so state round-trips bit-exactly. Blobs are
row-major and little-endian regardless of host byte order.
"""

from __future__ import annotations

import json
import os

import numpy as np

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(Exception):
    pass


def save_tensors(
    path: str,
    tensors: dict[str, np.ndarray],
    dtype: str = "float32",
    extra: dict | None = None,
) -> None:
    """Write tensors to a checkpoint directory, overwriting any existing one."""
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype!r}")
    os.makedirs(path, exist_ok=True)
    np_dtype = np.dtype(_DTYPES[dtype])
    manifest: dict = {"format": "mnemo-checkpoint-v1", "tensors": {}}
    if extra is not None:
        manifest["extra"] = extra
    offset = 0
    with open(os.path.join(path, BLOB_NAME), "wb") as blob:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np_dtype)
            blob.write(arr.tobytes())
            manifest["tensors"][name] = {
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offset,
                "blob": BLOB_NAME,
            }
            offset += arr.nbytes
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_tensors(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint directory back as float64 arrays plus the extra table."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"no manifest at {manifest_path}")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest at {manifest_path}: {e}")
    if manifest.get("format") != "mnemo-checkpoint-v1":
        raise CheckpointError(f"unrecognized checkpoint format in {manifest_path}")

    blobs: dict[str, bytes] = {}
    tensors: dict[str, np.ndarray] = {}
    for name, meta in manifest["tensors"].items():
        blob_file = meta["blob"]
        if blob_file not in blobs:
            with open(os.path.join(path, blob_file), "rb") as f:
                blobs[blob_file] = f.read()
        np_dtype = np.dtype(_DTYPES[meta["dtype"]])
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        raw = blobs[blob_file][start : start + count * np_dtype.itemsize]
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return tensors, manifest.get("extra", {})
