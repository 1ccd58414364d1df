"""Writers for the bundle and kernel-fixture directory formats.

Implemented against the documented contracts (raw little-endian tensors plus
a checksummed JSON manifest) rather than by importing the consumer library,
so the exporter stays a standalone tool.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import VisionEncoder

MANIFEST = "manifest.json"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_tensor(directory: Path, name: str, array: np.ndarray, dtype: str = "f32") -> dict:
    np_dtype = {"f32": "<f4", "u8": "|u1"}[dtype]
    data = np.ascontiguousarray(array, dtype=np_dtype).tobytes()
    (directory / name).write_bytes(data)
    return {"dtype": dtype, "shape": list(np.shape(array)), "sha256": _sha256(data)}


def write_blob(directory: Path, name: str, data: bytes) -> dict:
    (directory / name).write_bytes(data)
    return {"bytes": len(data), "sha256": _sha256(data)}


def write_manifest(directory: Path, manifest: dict) -> None:
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (directory / MANIFEST).write_text(text, encoding="utf-8")


def rle_encode(raster: np.ndarray) -> np.ndarray:
    """Row-major run lengths, zero-run first."""
    flat = np.asarray(raster).ravel(order="C").astype(bool)
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def pack_masks(masks: list[tuple[int, np.ndarray]]) -> bytes:
    """Length-prefixed records of (image index, run-length data)."""
    chunks = []
    for image_index, raster in masks:
        runs = np.ascontiguousarray(rle_encode(raster), dtype="<u4")
        chunks.append(struct.pack("<II", image_index, runs.size))
        chunks.append(runs.tobytes())
    return b"".join(chunks)


def write_bundle(
    out: Path,
    images: list[dict],
    masks: list[tuple[int, np.ndarray]],
    embeddings: np.ndarray,
    text_weights: np.ndarray,
    class_names: list[str],
    temperature: float,
    has_background: bool,
) -> None:
    """Open-vocabulary dataset bundle: no supervision tensors."""
    out.mkdir(parents=True, exist_ok=True)
    areas = np.array(
        [float(np.count_nonzero(raster)) for _, raster in masks], dtype=np.float32
    )
    files = {
        "embeddings.f32": write_tensor(out, "embeddings.f32", embeddings),
        "text.f32": write_tensor(out, "text.f32", text_weights),
        "areas.f32": write_tensor(out, "areas.f32", areas),
        "masks.rle": write_blob(out, "masks.rle", pack_masks(masks)),
        "classes.txt": write_blob(
            out, "classes.txt", ("\n".join(class_names) + "\n").encode("utf-8")
        ),
    }
    write_manifest(
        out,
        {
            "kind": "dataset_bundle",
            "version": 1,
            "n": int(embeddings.shape[0]),
            "d": int(embeddings.shape[1]),
            "k": int(text_weights.shape[0]),
            "supervision": "open-vocabulary",
            "has_background": has_background,
            "temperature": temperature,
            "images": images,
            "files": files,
        },
    )


def write_kernel_fixture(out: Path, encoder: VisionEncoder, tokens: torch.Tensor) -> None:
    """Token grid plus last-block weights in the kernel fixture layout.

    Projection matrices are stored input-major (tokens @ matrix), hence the
    transposes of the torch linear weights.
    """
    out.mkdir(parents=True, exist_ok=True)
    block = encoder.last_block
    width = encoder.config.width
    in_w = block.attn.in_proj.weight.detach().numpy()
    in_b = block.attn.in_proj.bias.detach().numpy()

    def t(tensor: torch.Tensor) -> np.ndarray:
        return tensor.detach().numpy()

    tensors = {
        "tokens.f32": tokens.detach().numpy(),
        "ln_gain.f32": t(block.ln_1.weight),
        "ln_bias.f32": t(block.ln_1.bias),
        "wq.f32": in_w[:width].T,
        "bq.f32": in_b[:width],
        "wk.f32": in_w[width:2 * width].T,
        "bk.f32": in_b[width:2 * width],
        "wv.f32": in_w[2 * width:].T,
        "bv.f32": in_b[2 * width:],
        "wp.f32": t(block.attn.out_proj.weight).T,
        "bp.f32": t(block.attn.out_proj.bias),
        "ln2_gain.f32": t(block.ln_2.weight),
        "ln2_bias.f32": t(block.ln_2.bias),
        "fc1.f32": t(block.mlp_fc.weight).T,
        "fb1.f32": t(block.mlp_fc.bias),
        "fc2.f32": t(block.mlp_proj.weight).T,
        "fb2.f32": t(block.mlp_proj.bias),
        "lnp_gain.f32": t(encoder.ln_post.weight),
        "lnp_bias.f32": t(encoder.ln_post.bias),
        "proj.f32": t(encoder.proj),
    }
    files = {name: write_tensor(out, name, array) for name, array in tensors.items()}
    grid = encoder.config.grid
    write_manifest(
        out,
        {
            "kind": "kernel_fixture",
            "version": 1,
            "grid_h": grid,
            "grid_w": grid,
            "head_count": encoder.config.heads,
            "head_kind": "full",
            "upsample": "bilinear",
            "files": files,
        },
    )
