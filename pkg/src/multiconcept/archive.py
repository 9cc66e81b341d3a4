"""Flat named-array archives with a JSON manifest.

An archive is a ``.npz`` file whose arrays are stored under their names plus one
extra ``__manifest__`` entry holding UTF-8 JSON: ``{"arrays": {name: {"shape",
"dtype"}}, "meta": {...}}``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MANIFEST_KEY = "__manifest__"


def save_archive(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "arrays": {
            name: {"shape": list(np.shape(a)), "dtype": str(np.asarray(a).dtype)}
            for name, a in sorted(arrays.items())
        },
        "meta": dict(meta or {}),
    }
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    payload = {name: np.asarray(a) for name, a in arrays.items()}
    payload[MANIFEST_KEY] = blob
    # np.savez appends .npz when missing; write through a handle to keep the exact name
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_archive(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(Path(path), allow_pickle=False) as data:
        if MANIFEST_KEY not in data.files:
            raise ValueError(f"{path}: not a named-array archive (no manifest)")
        manifest = json.loads(bytes(data[MANIFEST_KEY]).decode("utf-8"))
        arrays = {name: data[name] for name in data.files if name != MANIFEST_KEY}
    for name, entry in manifest["arrays"].items():
        if name not in arrays or list(arrays[name].shape) != entry["shape"]:
            raise ValueError(f"{path}: array {name!r} does not match its manifest entry")
    return arrays, manifest.get("meta", {})


def hash_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
