"""Mask-aware pooling of encoder outputs, plus the sliding-window strategy.

For every mask, the last encoder block is rerun with an additive attention
bias that confines query/query and key/key affinities to the mask's tokens.
The resulting feature map is upsampled to pixels and averaged over the mask.

Inference over one image averages a global pass (whole image resized to the
model input) with aligned sliding-window passes over an upscaled canvas;
an image that already matches the model input size degenerates to the global
pass alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .model import VisionEncoder

BIAS_CONSTANT = 1e4

# channel statistics used by CLIP-style preprocessing
IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class GswSettings:
    window: int = 224
    stride: int = 112
    short_side: int = 448

    def validate(self) -> None:
        if self.stride < 1 or self.window < 1 or self.short_side < self.window:
            raise ValueError("bad sliding-window settings")


@dataclass
class ExtractionJob:
    """One export run: images, their masks, a checkpoint, and output paths."""

    images: list[Path]
    masks_dir: Path
    checkpoint: Path
    out: Path
    text_file: Path | None = None
    classes_file: Path | None = None
    temperature: float = 100.0
    has_background: bool = False
    gsw: GswSettings = field(default_factory=GswSettings)


def downsample_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Token-level mask: coverage above one half, best-covered fallback."""
    h, w = mask.shape
    row_edges = (np.arange(grid_h + 1) * h) // grid_h
    col_edges = (np.arange(grid_w + 1) * w) // grid_w
    coverage = np.empty((grid_h, grid_w), dtype=np.float64)
    for i in range(grid_h):
        for j in range(grid_w):
            cell = mask[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]]
            coverage[i, j] = float(np.count_nonzero(cell)) / cell.size
    active = coverage > 0.5
    if not active.any():
        active.flat[int(np.argmax(coverage))] = True
    return active.ravel().astype(np.uint8)


@torch.no_grad()
def masked_feature_map(
    encoder: VisionEncoder,
    tokens: torch.Tensor,
    token_mask: np.ndarray,
    out_size: tuple[int, int],
) -> torch.Tensor:
    """Feature map of one pass under the mask's attention bias, (d, H, W)."""
    block = encoder.last_block
    width = tokens.shape[1]
    normed = block.ln_1(tokens)
    q, k, v = block.attn.in_proj(normed).chunk(3, dim=-1)
    x_f = block.attn.out_proj(v)

    m = torch.from_numpy(token_mask.astype(np.float32))
    allowed = torch.outer(m, m)
    allowed.fill_diagonal_(1.0)
    penalty = BIAS_CONSTANT * (1.0 - allowed)
    scale = float(width) ** 0.5
    attention = 0.5 * (
        torch.softmax(q @ q.T / scale - penalty, dim=-1)
        + torch.softmax(k @ k.T / scale - penalty, dim=-1)
    )
    features = encoder.head_apply(tokens + attention @ x_f)  # (l, d)
    grid = encoder.config.grid
    fmap = features.T.reshape(1, -1, grid, grid)
    if (grid, grid) != out_size:
        fmap = F.interpolate(fmap, size=out_size, mode="bilinear", align_corners=False)
    return fmap.squeeze(0)


def normalize_image(image: np.ndarray) -> torch.Tensor:
    """HWC uint8 or float [0, 1] image to a normalized (3, H, W) tensor."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    tensor = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)
    mean = torch.tensor(IMAGE_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGE_STD).view(3, 1, 1)
    return (tensor - mean) / std


def _resize_image(tensor: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(tensor[None], size=size, mode="bilinear", align_corners=False)[0]


def _resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if mask.shape == size:
        return mask
    tensor = torch.from_numpy(mask.astype(np.float32))[None, None]
    out = F.interpolate(tensor, size=size, mode="nearest")[0, 0]
    return (out.numpy() > 0.5).astype(np.uint8)


def window_positions(length: int, window: int, stride: int) -> list[int]:
    """Start offsets covering [0, length) with a clamped final window."""
    if length <= window:
        return [0]
    positions = list(range(0, length - window + 1, stride))
    if positions[-1] != length - window:
        positions.append(length - window)
    return positions


@torch.no_grad()
def extract_image_embeddings(
    encoder: VisionEncoder,
    image: np.ndarray,
    masks: list[np.ndarray],
    gsw: GswSettings,
) -> np.ndarray:
    """Unit-norm embeddings for every mask of one image.

    ``image`` is HWC; each mask is a binary raster of the same height and
    width. Outputs are float32 rows, one per mask, in the given order.
    """
    gsw.validate()
    size = encoder.config.image_size
    if gsw.window != size:
        raise ValueError(f"window {gsw.window} must equal the model input size {size}")
    tensor = normalize_image(image)
    h0, w0 = tensor.shape[1:]
    for mask in masks:
        if mask.shape != (h0, w0):
            raise ValueError("mask size does not match the image")

    global_tokens = encoder.tokens_before_last_block(_resize_image(tensor, (size, size)))

    degenerate = (h0, w0) == (size, size)
    if degenerate:
        canvas_h, canvas_w = h0, w0
        windows: list[tuple[int, int, torch.Tensor]] = []
    else:
        scale = gsw.short_side / min(h0, w0)
        canvas_h = max(int(round(h0 * scale)), gsw.window)
        canvas_w = max(int(round(w0 * scale)), gsw.window)
        canvas = _resize_image(tensor, (canvas_h, canvas_w))
        windows = []
        for y in window_positions(canvas_h, gsw.window, gsw.stride):
            for x in window_positions(canvas_w, gsw.window, gsw.stride):
                patch = canvas[:, y:y + gsw.window, x:x + gsw.window]
                windows.append((y, x, encoder.tokens_before_last_block(patch)))

    counts = torch.ones(canvas_h, canvas_w)
    for y, x, _ in windows:
        counts[y:y + gsw.window, x:x + gsw.window] += 1.0

    grid = encoder.config.grid
    embeddings = np.empty((len(masks), encoder.config.embed_dim), dtype=np.float32)
    for index, mask in enumerate(masks):
        canvas_mask = _resize_mask(mask, (canvas_h, canvas_w))
        if canvas_mask.sum() == 0:
            raise ValueError(f"mask {index} vanished when resized to the canvas")
        token_mask = downsample_mask(canvas_mask, grid, grid)
        accumulated = masked_feature_map(
            encoder, global_tokens, token_mask, (canvas_h, canvas_w)
        )
        for y, x, tokens in windows:
            sub_mask = canvas_mask[y:y + gsw.window, x:x + gsw.window]
            if sub_mask.sum() == 0:
                continue  # contributes only to pixels the pooling never reads
            sub_tokens = downsample_mask(sub_mask, grid, grid)
            fmap = masked_feature_map(
                encoder, tokens, sub_tokens, (gsw.window, gsw.window)
            )
            accumulated[:, y:y + gsw.window, x:x + gsw.window] += fmap
        averaged = accumulated / counts
        inside = torch.from_numpy(canvas_mask.astype(np.float32))
        pooled = (averaged * inside).sum(dim=(1, 2)) / inside.sum()
        embeddings[index] = (pooled / pooled.norm()).numpy()
    return embeddings
