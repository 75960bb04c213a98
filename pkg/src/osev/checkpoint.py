"""Flat binary checkpoints: little-endian float64 blobs plus a JSON sidecar.

The binary file is the concatenation of each array's raw bytes in file order;
the sidecar (same path with ``.json`` appended) lists names, shapes and byte
offsets along with caller-provided metadata such as whether the checkpoint is
a full training state or stripped to the inference branch.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["load_checkpoint", "save_checkpoint", "sidecar_path"]

FORMAT_NAME = "osev-checkpoint-v1"


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_checkpoint(path, arrays, meta: dict | None = None) -> Path:
    """Write named float64 arrays; ``arrays`` is a dict or (name, array) pairs."""
    items = list(arrays.items()) if isinstance(arrays, dict) else list(arrays)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        raise ValueError("duplicate array names in checkpoint")
    p = Path(path)
    entries = []
    offset = 0
    with open(p, "wb") as fh:
        for name, arr in items:
            a = np.asarray(arr, dtype="<f8")
            # ascontiguousarray would promote 0-d to (1,); keep the true shape
            fh.write(np.ascontiguousarray(a).tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.nbytes
    sidecar = {
        "format": FORMAT_NAME,
        "dtype": "<f8",
        "total_bytes": offset,
        "arrays": entries,
        "meta": meta or {},
    }
    with open(sidecar_path(p), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return p


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back into {name: array} plus its metadata."""
    p = Path(path)
    with open(sidecar_path(p), "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    if sidecar.get("format") != FORMAT_NAME:
        raise ValueError(f"unrecognized checkpoint format: {sidecar.get('format')!r}")
    blob = p.read_bytes()
    if len(blob) != sidecar["total_bytes"]:
        raise ValueError(
            f"checkpoint size mismatch: sidecar says {sidecar['total_bytes']} bytes, file has {len(blob)}"
        )
    arrays: dict[str, np.ndarray] = {}
    for entry in sidecar["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return arrays, sidecar.get("meta", {})
