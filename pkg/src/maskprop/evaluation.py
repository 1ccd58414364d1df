"""Pixel-level and mask-level scoring of mask classifications.

Per-mask labels become a pixel map through :func:`rasterize`; overlaps are
resolved by confidence, then smaller area, then lower list index. Pixel maps
are scored with mean intersection-over-union; per-mask labels with macro F1
over the classes present in the ground truth.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bundle import MaskRecord
from .errors import ValidationError

__all__ = [
    "SegmentationMap",
    "ConfusionMatrix",
    "rasterize",
    "confusion",
    "miou",
    "mask_f1",
    "mask_gt_label",
    "save_map",
    "load_map",
]

DEFAULT_IGNORE = 255


@dataclass
class SegmentationMap:
    """Integer class raster; ``ignore_value`` marks unassigned pixels."""

    labels: np.ndarray  # (H, W) int32
    ignore_value: int = DEFAULT_IGNORE

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def validate(self, n_classes: int) -> None:
        values = self.labels
        ok = ((values >= 0) & (values < n_classes)) | (values == self.ignore_value)
        if not np.all(ok):
            raise ValidationError(
                f"segmentation map holds labels outside [0, {n_classes}) + ignore"
            )


@dataclass
class ConfusionMatrix:
    """K x K pixel counts (gt row, pred column) plus per-class missed pixels.

    ``missed[c]`` counts gt pixels of class c where the prediction is the
    ignore value; they enter IoU as false negatives but are not part of the
    K x K table, whose total equals the pixels evaluated on both sides.
    """

    counts: np.ndarray  # (K, K) int64
    missed: np.ndarray  # (K,) int64


def rasterize(
    entries: Sequence[tuple[MaskRecord, int, float]],
    background: int | None = None,
    ignore_value: int = DEFAULT_IGNORE,
) -> SegmentationMap:
    """Paint labeled masks into one map.

    Overlapping pixels go to the higher confidence, then the smaller mask,
    then the lower index in ``entries``. Uncovered pixels get ``background``
    when given, otherwise ``ignore_value``.
    """
    if not entries:
        raise ValidationError("nothing to rasterize")
    shape = (entries[0][0].height, entries[0][0].width)
    for mask, _, _ in entries:
        if (mask.height, mask.width) != shape:
            raise ValidationError("all masks must share the same image size")
    fill = ignore_value if background is None else background
    labels = np.full(shape, fill, dtype=np.int32)
    # Paint in ascending priority so the strongest claim lands last.
    order = sorted(
        range(len(entries)),
        key=lambda i: (entries[i][2], -entries[i][0].area, -i),
    )
    for i in order:
        mask, label, _ = entries[i]
        labels[mask.decode().astype(bool)] = label
    return SegmentationMap(labels=labels, ignore_value=ignore_value)


def _check_same_shape(pred: SegmentationMap, gt: SegmentationMap) -> None:
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")


def confusion(pred: SegmentationMap, gt: SegmentationMap, n_classes: int) -> ConfusionMatrix:
    _check_same_shape(pred, gt)
    gt_flat = gt.labels.ravel()
    pred_flat = pred.labels.ravel()
    evaluated = gt_flat != gt.ignore_value
    missed_mask = evaluated & (pred_flat == pred.ignore_value)
    both = evaluated & ~missed_mask
    counts = np.bincount(
        gt_flat[both] * n_classes + pred_flat[both], minlength=n_classes * n_classes
    ).reshape(n_classes, n_classes)
    missed = np.bincount(gt_flat[missed_mask], minlength=n_classes)
    return ConfusionMatrix(counts=counts.astype(np.int64), missed=missed.astype(np.int64))


def miou(
    pred: SegmentationMap, gt: SegmentationMap, n_classes: int
) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the class occurs on neither side) and its mean."""
    matrix = confusion(pred, gt, n_classes)
    tp = np.diag(matrix.counts).astype(np.float64)
    fp = matrix.counts.sum(axis=0) - tp
    fn = matrix.counts.sum(axis=1) - tp + matrix.missed
    denom = tp + fp + fn
    per_class = np.full(n_classes, np.nan)
    present = denom > 0
    per_class[present] = tp[present] / denom[present]
    if not present.any():
        raise ValidationError("no class present in either map")
    return per_class, float(np.nanmean(per_class))


def mask_f1(
    pred_labels: Sequence[int],
    gt_labels: Sequence[int],
    n_classes: int | None = None,
) -> tuple[np.ndarray, float]:
    """Per-class F1 over mask instances, macro-averaged over gt classes.

    Classes never seen in the ground truth get NaN and are excluded from the
    macro average.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValidationError(f"{pred.shape[0]} predictions for {gt.shape[0]} ground truths")
    if n_classes is None:
        n_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    per_class = np.full(n_classes, np.nan)
    for c in np.unique(gt):
        tp = int(np.count_nonzero((pred == c) & (gt == c)))
        fp = int(np.count_nonzero((pred == c) & (gt != c)))
        fn = int(np.count_nonzero((pred != c) & (gt == c)))
        per_class[c] = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return per_class, float(np.nanmean(per_class))


def mask_gt_label(mask: MaskRecord, gt: SegmentationMap) -> int:
    """Majority ground-truth class under the mask; ties go to the lower index."""
    raster = mask.decode().astype(bool)
    if raster.shape != gt.shape:
        raise ValidationError("mask and ground truth differ in size")
    covered = gt.labels[raster]
    covered = covered[covered != gt.ignore_value]
    if covered.size == 0:
        raise ValidationError(f"mask over image {mask.image_id!r} covers only ignored pixels")
    return int(np.argmax(np.bincount(covered)))


_MAP_MAGIC = b"MSEG"


def save_map(seg: SegmentationMap, path: str | Path) -> None:
    """Raw raster format: magic, version, H, W, ignore value, uint16 labels."""
    labels = np.ascontiguousarray(seg.labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValidationError("labels do not fit the uint16 raster format")
    header = _MAP_MAGIC + struct.pack(
        "<IIII", 1, labels.shape[0], labels.shape[1], seg.ignore_value
    )
    Path(path).write_bytes(header + labels.astype("<u2").tobytes())


def load_map(path: str | Path) -> SegmentationMap:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != _MAP_MAGIC:
        raise ValidationError(f"{path} is not a segmentation raster")
    version, height, width, ignore = struct.unpack_from("<IIII", data, 4)
    if version != 1:
        raise ValidationError(f"unsupported raster version {version}")
    expected = 20 + 2 * height * width
    if len(data) != expected:
        raise ValidationError(f"raster size mismatch in {path}")
    labels = np.frombuffer(data, dtype="<u2", offset=20).reshape(height, width)
    return SegmentationMap(labels=labels.astype(np.int32), ignore_value=int(ignore))
