"""On-disk data model for masks, embeddings, text classifiers, and labels.

A dataset bundle is a directory:

    manifest.json   version, sizes, supervision type, image table, file table
    embeddings.f32  N x d mask embeddings, rows unit-norm
    text.f32        K x d text classifier rows, unit-norm
    areas.f32       N mask areas in pixels
    labels.f32      N x K supervision matrix (absent for open-vocabulary)
    labeled.u8      N flags, semi-supervision only
    masks.rle       length-prefixed run-length records, one per mask
    classes.txt     one class name per line

Tensor files are raw little-endian float32/uint8, row-major, checksummed in
the manifest (see :mod:`maskprop.tensorio`). Masks are run-length encoded
over row-major pixel order, zero-run first.

Supervision semantics of ``labels.f32``:

* ``full``: each row is the per-class pixel proportion inside the mask
  (sums to 1).
* ``semi``: labeled rows as in ``full``; unlabeled rows are all zero and the
  ``labeled.u8`` flags disambiguate them from genuine uniform labels.
* ``weak``: each row is the multi-hot label set of the image containing the
  mask.
* ``open-vocabulary``: no labels file.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .numerics import check_finite, check_unit_rows, normalize_rows
from . import tensorio

__all__ = [
    "SupervisionType",
    "LabelKind",
    "MaskRecord",
    "EmbeddingMatrix",
    "TextClassifier",
    "SoftLabelMatrix",
    "Supervision",
    "DatasetBundle",
    "rle_encode",
    "rle_decode",
    "normalize_rows",
    "load_bundle",
    "save_bundle",
]

UNIT_ROW_TOL = 1e-5
SIMPLEX_TOL = 1e-6


class SupervisionType(str, Enum):
    FULL = "full"
    SEMI = "semi"
    WEAK = "weak"
    OPEN_VOCABULARY = "open-vocabulary"


class LabelKind(str, Enum):
    """What a soft-label matrix holds at each stage of the pipeline."""

    SUPERVISION = "supervision"  # ground-truth rows, may be all-zero when unlabeled
    PSEUDO = "pseudo"            # supervision supplemented with classifier scores
    REFINED = "refined"          # supervision supplemented with probe scores
    PROPAGATED = "propagated"    # graph-smoothed labels, rows need not sum to 1
    PRIOR = "prior"              # per-sample prior classification score


def rle_encode(raster: np.ndarray) -> np.ndarray:
    """Run-length encode a binary raster in row-major order, zero-run first."""
    flat = np.asarray(raster).ravel(order="C").astype(bool)
    if flat.size == 0:
        raise ValidationError("cannot encode an empty raster")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def rle_decode(runs: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`rle_encode`; result is a uint8 raster of 0s and 1s."""
    runs = np.asarray(runs, dtype=np.int64)
    if runs.sum() != height * width:
        raise ValidationError(
            f"run lengths sum to {int(runs.sum())}, raster needs {height * width}"
        )
    values = (np.arange(runs.size) % 2).astype(np.uint8)
    return np.repeat(values, runs).reshape(height, width)


@dataclass
class MaskRecord:
    """One binary mask, run-length encoded over the pixels of its image."""

    image_id: str
    height: int
    width: int
    runs: np.ndarray
    area: int

    @classmethod
    def from_raster(cls, image_id: str, raster: np.ndarray) -> "MaskRecord":
        raster = np.asarray(raster)
        h, w = raster.shape
        return cls(
            image_id=image_id,
            height=int(h),
            width=int(w),
            runs=rle_encode(raster),
            area=int(np.count_nonzero(raster)),
        )

    def decode(self) -> np.ndarray:
        return rle_decode(self.runs, self.height, self.width)

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ValidationError(f"mask for {self.image_id!r} has non-positive size")
        runs = np.asarray(self.runs, dtype=np.int64)
        if runs.size == 0 or np.any(runs < 0) or np.any(runs[1:] <= 0):
            raise ValidationError(f"mask for {self.image_id!r} has non-canonical runs")
        if runs.sum() != self.height * self.width:
            raise ValidationError(
                f"mask for {self.image_id!r}: runs cover {int(runs.sum())} pixels, "
                f"image has {self.height * self.width}"
            )
        set_pixels = int(runs[1::2].sum())
        if set_pixels != self.area:
            raise ValidationError(
                f"mask for {self.image_id!r}: area {self.area} but {set_pixels} set pixels"
            )
        if self.area <= 0:
            raise ValidationError(f"mask for {self.image_id!r} is empty")


@dataclass
class EmbeddingMatrix:
    """N x d matrix of unit-norm mask embeddings."""

    data: np.ndarray

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def d(self) -> int:
        return int(self.data.shape[1])

    def validate(self) -> None:
        if self.data.ndim != 2:
            raise ValidationError("embeddings must be 2-D")
        check_finite(self.data, "embeddings")
        check_unit_rows(self.data, UNIT_ROW_TOL, "embeddings")


@dataclass
class TextClassifier:
    """Unit-norm class text embeddings plus the logit temperature."""

    weights: np.ndarray
    class_names: list[str]
    has_background: bool = False
    temperature: float = 100.0

    @property
    def k(self) -> int:
        return int(self.weights.shape[0])

    @property
    def d(self) -> int:
        return int(self.weights.shape[1])

    def validate(self) -> None:
        if self.weights.ndim != 2:
            raise ValidationError("text weights must be 2-D")
        if self.k < 2:
            raise ValidationError(f"need at least 2 classes, got {self.k}")
        if len(self.class_names) != self.k:
            raise ValidationError(
                f"{len(self.class_names)} class names for {self.k} classifier rows"
            )
        if len(set(self.class_names)) != self.k:
            raise ValidationError("class names must be unique")
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")
        check_finite(self.weights, "text weights")
        check_unit_rows(self.weights, UNIT_ROW_TOL, "text weights")


@dataclass
class SoftLabelMatrix:
    """N x K nonnegative label matrix tagged with its pipeline stage."""

    data: np.ndarray
    kind: LabelKind

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def k(self) -> int:
        return int(self.data.shape[1])

    def validate(self) -> None:
        if self.data.ndim != 2:
            raise ValidationError("soft labels must be 2-D")
        check_finite(self.data, "soft labels")
        if np.any(self.data < 0):
            raise ValidationError("soft labels must be nonnegative")
        if self.kind in (LabelKind.SUPERVISION, LabelKind.PSEUDO, LabelKind.REFINED):
            sums = self.data.sum(axis=1)
            bad = np.flatnonzero((np.abs(sums - 1.0) > SIMPLEX_TOL) & (sums != 0.0))
            if bad.size:
                raise ValidationError(
                    f"{self.kind.value} labels: row {int(bad[0])} sums to {sums[bad[0]]:.8f}"
                )


@dataclass
class Supervision:
    """Supervision tag plus whichever label arrays the tag requires.

    ``labels`` rows are soft labels (full/semi) or image-level multi-hot sets
    (weak); ``labeled`` flags exist only for semi supervision.
    """

    kind: SupervisionType
    labels: np.ndarray | None = None
    labeled: np.ndarray | None = None

    def validate(self, n: int, k: int) -> None:
        if self.kind == SupervisionType.OPEN_VOCABULARY:
            if self.labels is not None or self.labeled is not None:
                raise ValidationError("open-vocabulary bundles carry no labels")
            return
        if self.labels is None:
            raise ValidationError(f"{self.kind.value} supervision requires labels")
        if self.labels.shape != (n, k):
            raise ValidationError(
                f"labels shape {self.labels.shape} does not match (N={n}, K={k})"
            )
        check_finite(self.labels, "labels")
        if np.any(self.labels < 0):
            raise ValidationError("labels must be nonnegative")
        sums = self.labels.sum(axis=1)
        if self.kind == SupervisionType.FULL:
            if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
                raise ValidationError("full-supervision label rows must sum to 1")
            if self.labeled is not None:
                raise ValidationError("labeled flags only apply to semi supervision")
        elif self.kind == SupervisionType.SEMI:
            if self.labeled is None:
                raise ValidationError("semi supervision requires labeled flags")
            if self.labeled.shape != (n,):
                raise ValidationError("labeled flags must have one entry per mask")
            flagged = self.labeled.astype(bool)
            if np.any(np.abs(sums[flagged] - 1.0) > SIMPLEX_TOL):
                raise ValidationError("labeled rows must sum to 1")
            if np.any(sums[~flagged] != 0.0):
                raise ValidationError("unlabeled rows must be all-zero")
        elif self.kind == SupervisionType.WEAK:
            if self.labeled is not None:
                raise ValidationError("labeled flags only apply to semi supervision")
            if not np.all(np.isin(self.labels, (0.0, 1.0))):
                raise ValidationError("weak labels must be multi-hot 0/1")
            if np.any(sums == 0):
                raise ValidationError("weak label rows must allow at least one class")


@dataclass
class DatasetBundle:
    """Everything needed to classify one dataset split's masks."""

    masks: list[MaskRecord]
    embeddings: EmbeddingMatrix
    text: TextClassifier
    supervision: Supervision
    areas: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.areas is None:
            self.areas = np.array([m.area for m in self.masks], dtype=np.float32)

    @property
    def n(self) -> int:
        return self.embeddings.n

    def validate(self) -> None:
        self.embeddings.validate()
        self.text.validate()
        if len(self.masks) != self.embeddings.n:
            raise ValidationError(
                f"{len(self.masks)} masks but {self.embeddings.n} embedding rows"
            )
        if self.embeddings.d != self.text.d:
            raise ValidationError(
                f"embedding width {self.embeddings.d} != text width {self.text.d}"
            )
        if self.areas.shape != (len(self.masks),):
            raise ValidationError("areas must have one entry per mask")
        dims: dict[str, tuple[int, int]] = {}
        for i, mask in enumerate(self.masks):
            mask.validate()
            if int(self.areas[i]) != mask.area:
                raise ValidationError(f"areas[{i}] disagrees with mask record")
            seen = dims.setdefault(mask.image_id, (mask.height, mask.width))
            if seen != (mask.height, mask.width):
                raise ValidationError(f"inconsistent size for image {mask.image_id!r}")
        self.supervision.validate(self.n, self.text.k)


def _image_table(masks: list[MaskRecord]) -> tuple[list[dict], dict[str, int]]:
    table: list[dict] = []
    index: dict[str, int] = {}
    for mask in masks:
        if mask.image_id not in index:
            index[mask.image_id] = len(table)
            table.append({"id": mask.image_id, "height": mask.height, "width": mask.width})
    return table, index


def _pack_masks(masks: list[MaskRecord], image_index: dict[str, int]) -> bytes:
    chunks = []
    for mask in masks:
        runs = np.ascontiguousarray(mask.runs, dtype="<u4")
        chunks.append(struct.pack("<II", image_index[mask.image_id], runs.size))
        chunks.append(runs.tobytes())
    return b"".join(chunks)


def _unpack_masks(data: bytes, images: list[dict]) -> list[MaskRecord]:
    masks: list[MaskRecord] = []
    offset = 0
    while offset < len(data):
        if offset + 8 > len(data):
            raise ValidationError("truncated mask record header")
        image_idx, n_runs = struct.unpack_from("<II", data, offset)
        offset += 8
        end = offset + 4 * n_runs
        if image_idx >= len(images) or end > len(data):
            raise ValidationError("corrupt mask record")
        runs = np.frombuffer(data, dtype="<u4", count=n_runs, offset=offset).copy()
        offset = end
        image = images[image_idx]
        masks.append(
            MaskRecord(
                image_id=image["id"],
                height=int(image["height"]),
                width=int(image["width"]),
                runs=runs,
                area=int(runs[1::2].sum()),
            )
        )
    return masks


def save_bundle(bundle: DatasetBundle, path: str | Path) -> None:
    """Write a validated bundle; absent optional tensors are omitted."""
    bundle.validate()
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)

    images, image_index = _image_table(bundle.masks)
    files = {
        "embeddings.f32": tensorio.write_tensor(
            directory, "embeddings.f32", bundle.embeddings.data, "f32"
        ),
        "text.f32": tensorio.write_tensor(directory, "text.f32", bundle.text.weights, "f32"),
        "areas.f32": tensorio.write_tensor(directory, "areas.f32", bundle.areas, "f32"),
        "masks.rle": tensorio.write_blob(
            directory, "masks.rle", _pack_masks(bundle.masks, image_index)
        ),
        "classes.txt": tensorio.write_blob(
            directory,
            "classes.txt",
            ("\n".join(bundle.text.class_names) + "\n").encode("utf-8"),
        ),
    }
    if bundle.supervision.labels is not None:
        files["labels.f32"] = tensorio.write_tensor(
            directory, "labels.f32", bundle.supervision.labels, "f32"
        )
    if bundle.supervision.labeled is not None:
        files["labeled.u8"] = tensorio.write_tensor(
            directory, "labeled.u8", bundle.supervision.labeled.astype(np.uint8), "u8"
        )

    tensorio.write_manifest(
        directory,
        {
            "kind": "dataset_bundle",
            "version": 1,
            "n": bundle.n,
            "d": bundle.embeddings.d,
            "k": bundle.text.k,
            "supervision": bundle.supervision.kind.value,
            "has_background": bundle.text.has_background,
            "temperature": bundle.text.temperature,
            "images": images,
            "files": files,
        },
    )


def load_bundle(path: str | Path) -> DatasetBundle:
    """Load and fully validate a bundle directory."""
    directory = Path(path)
    manifest = tensorio.read_manifest(directory, expected_kind="dataset_bundle")
    n, d, k = (int(manifest[key]) for key in ("n", "d", "k"))
    try:
        supervision_kind = SupervisionType(manifest["supervision"])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"bad supervision tag in manifest: {exc}") from exc

    def tensor(name: str, shape: tuple[int, ...]) -> np.ndarray:
        arr = tensorio.read_tensor(directory, name, tensorio.file_entry(manifest, name))
        if arr.shape != shape:
            raise ValidationError(f"{name}: shape {arr.shape}, manifest implies {shape}")
        return arr

    embeddings = EmbeddingMatrix(tensor("embeddings.f32", (n, d)))
    text_weights = tensor("text.f32", (k, d))
    areas = tensor("areas.f32", (n,))
    class_text = tensorio.read_blob(
        directory, "classes.txt", tensorio.file_entry(manifest, "classes.txt")
    ).decode("utf-8")
    class_names = [line for line in class_text.splitlines() if line]

    mask_bytes = tensorio.read_blob(
        directory, "masks.rle", tensorio.file_entry(manifest, "masks.rle")
    )
    masks = _unpack_masks(mask_bytes, manifest.get("images", []))
    if len(masks) != n:
        raise ValidationError(f"manifest declares {n} masks, file holds {len(masks)}")

    labels = None
    labeled = None
    if supervision_kind != SupervisionType.OPEN_VOCABULARY:
        labels = tensor("labels.f32", (n, k))
    if supervision_kind == SupervisionType.SEMI:
        labeled = tensor("labeled.u8", (n,))
        if not np.all(np.isin(labeled, (0, 1))):
            raise ValidationError("labeled flags must be 0 or 1")

    bundle = DatasetBundle(
        masks=masks,
        embeddings=embeddings,
        text=TextClassifier(
            weights=text_weights,
            class_names=class_names,
            has_background=bool(manifest.get("has_background", False)),
            temperature=float(manifest.get("temperature", 100.0)),
        ),
        supervision=Supervision(kind=supervision_kind, labels=labels, labeled=labeled),
        areas=areas,
    )
    bundle.validate()
    return bundle
