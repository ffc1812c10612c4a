"""Flat binary tensor files with JSON sidecars.

Every array is stored as raw C-order bytes in ``<name>.bin`` next to a
``<name>.json`` sidecar recording shape, dtype (numpy dtype string, which
encodes byte order) and layout.  Directories of named tensors additionally
carry a ``meta.json``.  All writes are deterministic byte-for-byte so that
save -> load -> save round-trips are bit-identical.
"""

from __future__ import annotations

import json
import os
from typing import Any, Dict

import numpy as np


class TensorIOError(RuntimeError):
    """Raised when a tensor file or sidecar is missing, malformed or truncated."""


def dump_json(path: str, obj: Any) -> None:
    """Write JSON with a stable layout (sorted keys, fixed separators)."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2, separators=(",", ": "))
        f.write("\n")


def read_json(path: str) -> Any:
    if not os.path.isfile(path):
        raise TensorIOError(f"missing JSON file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise TensorIOError(f"corrupt JSON file: {path}: {e}") from e


def save_array(base: str, arr: np.ndarray) -> None:
    """Save ``arr`` as ``<base>.bin`` + ``<base>.json``."""
    # np.ascontiguousarray would promote 0-dim arrays to 1-dim; asarray with
    # an explicit order keeps scalar shapes intact.
    arr = np.asarray(arr, order="C")
    arr.tofile(base + ".bin")
    dump_json(base + ".json", {
        "shape": list(arr.shape),
        "dtype": arr.dtype.str,
        "order": "C",
    })


def load_array(base: str) -> np.ndarray:
    """Load an array saved by :func:`save_array`, validating size and sidecar."""
    validate_array(base)
    sidecar = read_json(base + ".json")
    shape = tuple(int(s) for s in sidecar["shape"])
    dtype = np.dtype(sidecar["dtype"])
    return np.fromfile(base + ".bin", dtype=dtype).reshape(shape)


def validate_array(base: str) -> None:
    """Check sidecar and binary file size without reading the data."""
    sidecar = read_json(base + ".json")
    for key in ("shape", "dtype"):
        if key not in sidecar:
            raise TensorIOError(f"sidecar {base}.json missing key '{key}'")
    shape = tuple(int(s) for s in sidecar["shape"])
    dtype = np.dtype(sidecar["dtype"])
    bin_path = base + ".bin"
    if not os.path.isfile(bin_path):
        raise TensorIOError(f"missing tensor file: {bin_path}")
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = os.path.getsize(bin_path)
    if actual != expected:
        raise TensorIOError(
            f"tensor file {bin_path} has {actual} bytes, expected {expected} "
            f"for shape {list(shape)} dtype {dtype.str}"
        )


def save_tensor_dir(path: str, arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> None:
    """Save a directory of named tensors plus a ``meta.json``.

    Tensor names may contain '.' (e.g. "pose.blocks.0.attn.weight"); they are
    flattened to file names with '.' intact.
    """
    os.makedirs(path, exist_ok=True)
    names = sorted(arrays.keys())
    for name in names:
        save_array(os.path.join(path, name), arrays[name])
    meta = dict(meta)
    meta["tensors"] = names
    dump_json(os.path.join(path, "meta.json"), meta)


def load_tensor_dir(path: str) -> tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Load a directory written by :func:`save_tensor_dir`."""
    if not os.path.isdir(path):
        raise TensorIOError(f"missing tensor directory: {path}")
    meta = read_json(os.path.join(path, "meta.json"))
    if "tensors" not in meta:
        raise TensorIOError(f"meta.json in {path} missing 'tensors' list")
    arrays = {name: load_array(os.path.join(path, name)) for name in meta["tensors"]}
    return arrays, meta
