"""Loading precomputed class-agnostic masks.

Masks arrive as one directory per image (named after the image file's stem)
holding one binary PNG per mask; any nonzero pixel counts as set. Files are
taken in sorted name order so exports are reproducible.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def load_masks_for_image(masks_dir: Path, image_path: Path) -> list[np.ndarray]:
    directory = masks_dir / image_path.stem
    if not directory.is_dir():
        raise FileNotFoundError(f"no mask directory {directory}")
    rasters = []
    for mask_file in sorted(directory.glob("*.png")):
        with Image.open(mask_file) as img:
            raster = (np.asarray(img.convert("L")) > 0).astype(np.uint8)
        if raster.sum() == 0:
            raise ValueError(f"mask {mask_file} is empty")
        rasters.append(raster)
    if not rasters:
        raise ValueError(f"no mask PNGs under {directory}")
    return rasters
