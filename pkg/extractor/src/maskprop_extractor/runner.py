"""Job execution: images + masks + checkpoint in, bundle directory out."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from . import formats
from .masks import load_image, load_masks_for_image
from .model import VisionEncoder, load_checkpoint
from .pooling import ExtractionJob, extract_image_embeddings, normalize_image, _resize_image


def _load_text(job: ExtractionJob, embed_dim: int) -> tuple[np.ndarray, list[str]]:
    if job.text_file is None or job.classes_file is None:
        raise ValueError("a text embedding file and class list are required")
    class_names = [
        line
        for line in Path(job.classes_file).read_text(encoding="utf-8").splitlines()
        if line
    ]
    raw = np.fromfile(job.text_file, dtype="<f4")
    if raw.size != len(class_names) * embed_dim:
        raise ValueError(
            f"text file holds {raw.size} floats, expected {len(class_names)} x {embed_dim}"
        )
    weights = raw.reshape(len(class_names), embed_dim)
    norms = np.linalg.norm(weights, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("text embeddings contain a zero row")
    return (weights / norms).astype(np.float32), class_names


def run_extraction(job: ExtractionJob) -> Path:
    """Extract every image's mask embeddings and write the bundle."""
    encoder = load_checkpoint(job.checkpoint)
    text_weights, class_names = _load_text(job, encoder.config.embed_dim)

    images: list[dict] = []
    packed_masks: list[tuple[int, np.ndarray]] = []
    rows: list[np.ndarray] = []
    for image_path in job.images:
        image = load_image(image_path)
        rasters = load_masks_for_image(job.masks_dir, Path(image_path))
        embeddings = extract_image_embeddings(encoder, image, rasters, job.gsw)
        image_index = len(images)
        images.append(
            {"id": Path(image_path).stem, "height": image.shape[0], "width": image.shape[1]}
        )
        for raster in rasters:
            packed_masks.append((image_index, raster))
        rows.append(embeddings)

    formats.write_bundle(
        out=Path(job.out),
        images=images,
        masks=packed_masks,
        embeddings=np.vstack(rows),
        text_weights=text_weights,
        class_names=class_names,
        temperature=job.temperature,
        has_background=job.has_background,
    )
    return Path(job.out)


@torch.no_grad()
def export_kernel_fixture(checkpoint: Path, image_path: Path, out: Path) -> Path:
    """Export the last-layer inputs and weights for one image.

    The image is resized to the model input, so the exported token grid
    corresponds to the degenerate single-pass case.
    """
    encoder = load_checkpoint(checkpoint)
    size = encoder.config.image_size
    tensor = normalize_image(load_image(image_path))
    if tensor.shape[1:] != (size, size):
        tensor = _resize_image(tensor, (size, size))
    tokens = encoder.tokens_before_last_block(tensor)
    formats.write_kernel_fixture(Path(out), encoder, tokens)
    return Path(out)
