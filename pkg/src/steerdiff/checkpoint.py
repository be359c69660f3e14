"""Checkpoint format: a JSON manifest plus a flat little-endian float32 blob.

``<stem>.json`` lists every tensor's name, shape and byte offset (with an
optional ``meta`` block for architecture/schedule/provenance); ``<stem>.bin``
holds the concatenated float32 data. Loading validates stored shapes against
the model that receives them.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


FORMAT_VERSION = 1


def save_checkpoint(stem, tensors: dict, meta: dict | None = None):
    """Write name->array mapping to <stem>.json + <stem>.bin."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blob = bytearray()
    for name in tensors:
        arr = np.asarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob.extend(arr.tobytes())  # C-order little-endian float32
        offset += arr.nbytes
    manifest = {
        "format": FORMAT_VERSION,
        "dtype": "<f4",
        "total_bytes": offset,
        "tensors": entries,
        "meta": meta or {},
    }
    with open(stem.with_suffix(".json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(stem.with_suffix(".bin"), "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(stem):
    """Read back (tensors, meta) from a checkpoint stem."""
    stem = Path(stem)
    man_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    if not man_path.exists() or not bin_path.exists():
        raise FileNotFoundError(f"checkpoint {stem} incomplete: needs .json and .bin")
    with open(man_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob = bin_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(
            f"checkpoint blob is {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return tensors, manifest.get("meta", {})


def save_module(stem, module, meta: dict | None = None):
    save_checkpoint(stem, module.state_dict(), meta)


def load_module(stem, module, expect_meta: dict | None = None) -> dict:
    """Load parameters into a module; shape validation happens in load_state_dict.

    If ``expect_meta`` is given, those keys must match the stored meta exactly.
    Returns the stored meta.
    """
    tensors, meta = load_checkpoint(stem)
    if expect_meta:
        for key, want in expect_meta.items():
            if meta.get(key) != want:
                raise ValueError(
                    f"checkpoint meta mismatch for {key!r}: stored {meta.get(key)!r}, "
                    f"expected {want!r}")
    module.load_state_dict(tensors)
    return meta
