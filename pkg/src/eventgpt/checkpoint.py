"""Checkpoint container: ``manifest.json`` + ``params.bin`` of little-endian float32."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

MANIFEST = "manifest.json"
PARAMS = "params.bin"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(directory: str | os.PathLike, arrays: Mapping[str, np.ndarray], extra: Mapping | None = None) -> Path:
    """Write ``arrays`` in sorted-name order; returns the directory path.

    Files are written to temporaries and renamed so an interrupted save never
    leaves a half-written container behind.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=_LE_F32)
        blob = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": "float32", "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    manifest = {"format": "eventgpt-checkpoint", "version": 1, "byte_order": "little",
                "tensors": entries, "total_bytes": offset}
    if extra:
        manifest["extra"] = dict(extra)
    tmp_bin = d / (PARAMS + ".tmp")
    tmp_man = d / (MANIFEST + ".tmp")
    with open(tmp_bin, "wb") as f:
        for blob in blobs:
            f.write(blob)
    tmp_man.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp_bin, d / PARAMS)
    os.replace(tmp_man, d / MANIFEST)
    return d


def load_checkpoint(directory: str | os.PathLike) -> dict[str, np.ndarray]:
    d = Path(directory)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
        raw = (d / PARAMS).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from exc
    if manifest.get("total_bytes") != len(raw):
        raise CheckpointError(
            f"{d / PARAMS}: expected {manifest.get('total_bytes')} bytes, found {len(raw)}"
        )
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "float32":
            raise CheckpointError(f"{e['name']}: unsupported dtype {e['dtype']}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * n
        if end > len(raw):
            raise CheckpointError(f"{e['name']}: data runs past end of {PARAMS}")
        out[e["name"]] = np.frombuffer(raw, dtype=_LE_F32, count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    return out


def load_manifest(directory: str | os.PathLike) -> dict:
    return json.loads((Path(directory) / MANIFEST).read_text())


def file_digest(directory: str | os.PathLike) -> str:
    """SHA-256 over the params blob; equal digests mean bit-identical weights."""
    return hashlib.sha256((Path(directory) / PARAMS).read_bytes()).hexdigest()
