"""Checkpoint archives: a JSON manifest plus raw little-endian float32 tensor blobs in one zip."""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


def save_archive(path: str | Path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    directory = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for i, (name, array) in enumerate(tensors.items()):
            array = np.asarray(array)
            blob = f"tensors/{i:04d}.bin"
            zf.writestr(blob, np.ascontiguousarray(array, dtype="<f4").tobytes(order="C"))
            directory.append(
                {"name": name, "file": blob, "shape": list(array.shape),
                 "dtype": "float32", "source_dtype": str(array.dtype)}
            )
        full = dict(manifest, format_version=FORMAT_VERSION, tensors=directory)
        zf.writestr(MANIFEST, json.dumps(full, indent=2, sort_keys=True))


def load_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read(MANIFEST))
        tensors = {}
        for entry in manifest["tensors"]:
            raw = np.frombuffer(zf.read(entry["file"]), dtype="<f4").reshape(entry["shape"])
            tensors[entry["name"]] = raw.astype(entry.get("source_dtype", "float32"))
    return manifest, tensors
