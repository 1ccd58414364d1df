"""Raw tensor files plus a JSON manifest with shapes and checksums.

Every persisted artifact in this package is a directory holding a
``manifest.json`` and a flat set of data files. Tensor files are raw
little-endian values in row-major order, one file per tensor; the manifest's
file table records dtype, shape, and the SHA-256 of the file bytes so any
language can read and verify them.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ValidationError

MANIFEST_NAME = "manifest.json"

# dtype tag -> numpy dtype string (little-endian on disk)
DTYPES = {
    "f32": "<f4",
    "f64": "<f8",
    "i64": "<i8",
    "u32": "<u4",
    "u8": "|u1",
}


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_tensor(directory: Path, name: str, array: np.ndarray, dtype: str) -> dict:
    """Write one tensor file and return its file-table entry."""
    if dtype not in DTYPES:
        raise ValidationError(f"unknown dtype tag {dtype!r}")
    data = np.ascontiguousarray(array, dtype=DTYPES[dtype]).tobytes()
    path = Path(directory) / name
    path.write_bytes(data)
    return {"dtype": dtype, "shape": list(np.shape(array)), "sha256": sha256_bytes(data)}


def write_blob(directory: Path, name: str, data: bytes) -> dict:
    path = Path(directory) / name
    path.write_bytes(data)
    return {"bytes": len(data), "sha256": sha256_bytes(data)}


def read_blob(directory: Path, name: str, entry: dict) -> bytes:
    path = Path(directory) / name
    if not path.is_file():
        raise ValidationError(f"missing file {name} in {directory}")
    data = path.read_bytes()
    if sha256_bytes(data) != entry["sha256"]:
        raise ValidationError(f"checksum mismatch for {name}")
    return data


def read_tensor(directory: Path, name: str, entry: dict) -> np.ndarray:
    """Read and verify one tensor file against its file-table entry."""
    dtype = entry.get("dtype")
    if dtype not in DTYPES:
        raise ValidationError(f"unknown dtype tag {dtype!r} for {name}")
    data = read_blob(directory, name, entry)
    np_dtype = np.dtype(DTYPES[dtype])
    shape = tuple(int(s) for s in entry["shape"])
    expected = int(np.prod(shape)) if shape else 1
    if len(data) != expected * np_dtype.itemsize:
        raise ValidationError(
            f"shape mismatch for {name}: manifest says {shape} "
            f"({expected * np_dtype.itemsize} bytes) but file holds {len(data)} bytes"
        )
    return np.frombuffer(data, dtype=np_dtype).reshape(shape).copy()


def write_manifest(directory: Path, manifest: dict) -> None:
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (Path(directory) / MANIFEST_NAME).write_text(text, encoding="utf-8")


def read_manifest(directory: Path, expected_kind: str | None = None) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise ValidationError(f"missing {MANIFEST_NAME} in {directory}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"corrupt manifest in {directory}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ValidationError(f"corrupt manifest in {directory}: not an object")
    if expected_kind is not None and manifest.get("kind") != expected_kind:
        raise ValidationError(
            f"manifest kind {manifest.get('kind')!r} in {directory}, expected {expected_kind!r}"
        )
    return manifest


def file_entry(manifest: dict, name: str) -> dict:
    files = manifest.get("files", {})
    if name not in files:
        raise ValidationError(f"manifest lists no file {name!r}")
    return files[name]
