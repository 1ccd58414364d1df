"""Mask-aware attention pooling over the last layer of a CLIP-style encoder.

Works on raw tensors (token grids, projection weights, output-head weights)
so the math can be exercised without a model runtime. The central object is
an attention bias built from a mask: token pairs outside the mask are pushed
to -inf before the softmax, which confines affinity computation to the mask
while leaving the rest of the encoder untouched.

Pooling variants (see :class:`PoolingVariant`):

* ``naive``: pool the ordinary attention output over the mask.
* ``maskclip``: drop the token-mixing attention, pool token-wise output.
* ``dba-original``: weight the token-wise output by the mask's average
  intra-mask affinity map, upsampled to pixels.
* ``dba-approx``: apply the mask bias inside the attention and mask-pool the
  result; never materializes the affinity map.
* ``dba-approx-no-residual``: same without the token residual.
* ``dba-multi-head``: the bias applied per attention head.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .numerics import layer_norm, normalize_rows, quick_gelu, softmax, unit_vector
from . import tensorio

__all__ = [
    "TokenGrid",
    "HeadWeights",
    "OutputHead",
    "MaskPlan",
    "PoolingVariant",
    "make_mask_plan",
    "project_tokens",
    "downsample_mask",
    "biased_attention",
    "average_affinity",
    "similarity_map",
    "pool_mask_embedding",
    "bilinear_weights",
    "upsample_grid",
    "save_kernel_fixture",
    "load_kernel_fixture",
    "random_kernel_inputs",
    "selftest",
]

DEFAULT_BIAS_CONSTANT = 1e4


@dataclass
class TokenGrid:
    """Image tokens entering the last encoder layer, in row-major grid order."""

    tokens: np.ndarray  # (l, d_in)
    grid_h: int
    grid_w: int

    @property
    def l(self) -> int:  # noqa: E743 (matches the token-count name used throughout)
        return int(self.tokens.shape[0])

    @property
    def d_in(self) -> int:
        return int(self.tokens.shape[1])

    def validate(self) -> None:
        if self.tokens.ndim != 2:
            raise ValidationError("tokens must be 2-D")
        if self.grid_h * self.grid_w != self.l:
            raise ValidationError(
                f"grid {self.grid_h}x{self.grid_w} does not hold {self.l} tokens"
            )
        if not np.all(np.isfinite(self.tokens)):
            raise ValidationError("tokens contain non-finite values")


@dataclass
class HeadWeights:
    """Last-layer attention projections with their pre-attention layer norm."""

    ln_gain: np.ndarray
    ln_bias: np.ndarray
    w_q: np.ndarray  # (d_in, width_qk)
    b_q: np.ndarray
    w_k: np.ndarray  # (d_in, width_qk)
    b_k: np.ndarray
    w_v: np.ndarray  # (d_in, width_v)
    b_v: np.ndarray
    w_p: np.ndarray  # (width_v, d_in)
    b_p: np.ndarray
    head_count: int = 1

    @property
    def width_qk(self) -> int:
        return int(self.w_q.shape[1])

    @property
    def width_v(self) -> int:
        return int(self.w_v.shape[1])

    def validate(self) -> None:
        d_in = self.w_q.shape[0]
        if self.w_k.shape != self.w_q.shape:
            raise ValidationError("query/key projections must share a shape")
        if self.w_v.shape[0] != d_in or self.w_p.shape != (self.width_v, d_in):
            raise ValidationError("value/output projection shapes are inconsistent")
        for name, vec, width in (
            ("ln_gain", self.ln_gain, d_in),
            ("ln_bias", self.ln_bias, d_in),
            ("b_q", self.b_q, self.width_qk),
            ("b_k", self.b_k, self.width_qk),
            ("b_v", self.b_v, self.width_v),
            ("b_p", self.b_p, d_in),
        ):
            if vec.shape != (width,):
                raise ValidationError(f"{name} must have shape ({width},)")
        if self.head_count < 1:
            raise ValidationError("head_count must be positive")
        if self.width_qk % self.head_count or self.width_v % self.head_count:
            raise ValidationError(
                f"head_count {self.head_count} must divide widths "
                f"{self.width_qk} and {self.width_v}"
            )


@dataclass
class OutputHead:
    """Final token-wise operations mapping encoder width to embedding width.

    ``kind="full"`` is the production head: residual MLP, final layer norm,
    linear projection. ``kind="linear"`` is a single matrix, used where the
    pooling equivalences require the head to be linear. ``upsample`` controls
    how token features become pixel features: ``bilinear`` interpolation or
    ``identity`` when the pixel grid equals the token grid.
    """

    kind: str  # "linear" | "full"
    upsample: str = "bilinear"  # "bilinear" | "identity"
    g: np.ndarray | None = None  # linear head: (d_in, d_out)
    ln2_gain: np.ndarray | None = None
    ln2_bias: np.ndarray | None = None
    fc1: np.ndarray | None = None  # (d_in, hidden)
    fb1: np.ndarray | None = None
    fc2: np.ndarray | None = None  # (hidden, d_in)
    fb2: np.ndarray | None = None
    ln_post_gain: np.ndarray | None = None
    ln_post_bias: np.ndarray | None = None
    proj: np.ndarray | None = None  # (d_in, d_out)

    @property
    def d_out(self) -> int:
        matrix = self.g if self.kind == "linear" else self.proj
        return int(matrix.shape[1])

    def validate(self) -> None:
        if self.upsample not in ("bilinear", "identity"):
            raise ValidationError(f"unknown upsample mode {self.upsample!r}")
        if self.kind == "linear":
            if self.g is None or self.g.ndim != 2:
                raise ValidationError("linear head requires matrix g")
        elif self.kind == "full":
            needed = (
                self.ln2_gain, self.ln2_bias, self.fc1, self.fb1, self.fc2,
                self.fb2, self.ln_post_gain, self.ln_post_bias, self.proj,
            )
            if any(t is None for t in needed):
                raise ValidationError("full head is missing tensors")
            if self.fc1.shape[0] != self.proj.shape[0] or self.fc2.shape[1] != self.proj.shape[0]:
                raise ValidationError("full head shapes are inconsistent")
        else:
            raise ValidationError(f"unknown head kind {self.kind!r}")

    def apply(self, tokens: np.ndarray) -> np.ndarray:
        """Token-wise head output, (l, d_out); upsampling happens separately."""
        z = np.asarray(tokens, dtype=np.float64)
        if self.kind == "linear":
            return z @ self.g
        hidden = quick_gelu(layer_norm(z, self.ln2_gain, self.ln2_bias) @ self.fc1 + self.fb1)
        z = z + hidden @ self.fc2 + self.fb2
        return layer_norm(z, self.ln_post_gain, self.ln_post_bias) @ self.proj


@dataclass
class MaskPlan:
    """A pixel mask with its token-level counterpart and attention-bias data."""

    pixel_mask: np.ndarray  # (H, W) uint8
    token_mask: np.ndarray  # (l,) uint8
    grid_h: int
    grid_w: int
    bias_constant: float = DEFAULT_BIAS_CONSTANT

    @property
    def height(self) -> int:
        return int(self.pixel_mask.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixel_mask.shape[1])

    @property
    def bias_matrix(self) -> np.ndarray:
        """Allowed token pairs: both inside the mask, or the diagonal."""
        m = self.token_mask.astype(np.float64)
        b = np.outer(m, m)
        np.fill_diagonal(b, 1.0)
        return b

    def validate(self) -> None:
        if self.token_mask.shape != (self.grid_h * self.grid_w,):
            raise ValidationError("token mask does not match the grid")
        if self.token_mask.sum() == 0:
            raise ValidationError("token mask is empty")
        if self.bias_constant <= 0:
            raise ValidationError("bias constant must be positive")


def downsample_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Reduce a pixel mask to the token grid.

    A token is active when more than half of its patch is covered; if no
    token passes, the single best-covered token is used so the result is
    never empty.
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    if h < grid_h or w < grid_w:
        raise ValidationError(f"mask {h}x{w} smaller than grid {grid_h}x{grid_w}")
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


def make_mask_plan(
    mask: np.ndarray,
    grid_h: int,
    grid_w: int,
    bias_constant: float = DEFAULT_BIAS_CONSTANT,
) -> MaskPlan:
    mask = np.asarray(mask).astype(np.uint8)
    plan = MaskPlan(
        pixel_mask=mask,
        token_mask=downsample_mask(mask, grid_h, grid_w),
        grid_h=grid_h,
        grid_w=grid_w,
        bias_constant=bias_constant,
    )
    plan.validate()
    return plan


def project_tokens(
    grid: TokenGrid, weights: HeadWeights
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Query/key projections and the value-output composition of the tokens."""
    grid.validate()
    weights.validate()
    if weights.w_q.shape[0] != grid.d_in:
        raise ValidationError(
            f"projection input width {weights.w_q.shape[0]} != token width {grid.d_in}"
        )
    normed = layer_norm(grid.tokens, weights.ln_gain, weights.ln_bias)
    x_q = normed @ weights.w_q + weights.b_q
    x_k = normed @ weights.w_k + weights.b_k
    x_f = (normed @ weights.w_v + weights.b_v) @ weights.w_p + weights.b_p
    return x_q, x_k, x_f


def _masked_softmax(logits: np.ndarray, penalty: np.ndarray) -> np.ndarray:
    return softmax(logits - penalty, axis=1)


def biased_attention(
    x_q: np.ndarray, x_k: np.ndarray, plan: MaskPlan, scale: float
) -> np.ndarray:
    """Symmetric query/query and key/key attention confined to the mask.

    Rows are stochastic; entries on forbidden pairs are suppressed below
    machine precision by the additive bias.
    """
    plan.validate()
    penalty = plan.bias_constant * (1.0 - plan.bias_matrix)
    a_q = _masked_softmax((x_q @ x_q.T) / scale, penalty)
    a_k = _masked_softmax((x_k @ x_k.T) / scale, penalty)
    return 0.5 * (a_q + a_k)


def bilinear_weights(n_out: int, n_in: int) -> np.ndarray:
    """1-D interpolation matrix (half-pixel centers, edges clamped)."""
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        weights[:, 0] = 1.0
        return weights
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src)
    frac = src - base
    lo = np.clip(base, 0, n_in - 1).astype(int)
    hi = np.clip(base + 1, 0, n_in - 1).astype(int)
    rows = np.arange(n_out)
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def upsample_grid(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly upsample (gh, gw) or (gh, gw, c) values to (height, width)."""
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 2
    if squeeze:
        values = values[..., None]
    w_rows = bilinear_weights(height, values.shape[0])
    w_cols = bilinear_weights(width, values.shape[1])
    out = np.einsum("hg,gvc,wv->hwc", w_rows, values, w_cols, optimize=True)
    return out[..., 0] if squeeze else out


def _pixel_features(
    token_features: np.ndarray, plan: MaskPlan, head: OutputHead
) -> np.ndarray:
    """Token features as an (H*W, d) pixel matrix per the head's upsample mode."""
    h, w = plan.height, plan.width
    if head.upsample == "identity":
        if (plan.grid_h, plan.grid_w) != (h, w):
            raise ValidationError(
                "identity upsampling requires the pixel grid to equal the token grid"
            )
        return np.asarray(token_features, dtype=np.float64)
    grid_features = token_features.reshape(plan.grid_h, plan.grid_w, -1)
    return upsample_grid(grid_features, h, w).reshape(h * w, -1)


def average_affinity(attention: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Mean intra-mask affinity per token, upsampled to pixels and masked.

    Returns a length-H*W nonnegative vector that is zero outside the mask.
    """
    plan.validate()
    token_mask = plan.token_mask.astype(np.float64)
    count = token_mask.sum()
    mean_affinity = token_mask @ attention / count
    grid = mean_affinity.reshape(plan.grid_h, plan.grid_w)
    if (plan.grid_h, plan.grid_w) == (plan.height, plan.width):
        pixels = grid
    else:
        pixels = upsample_grid(grid, plan.height, plan.width)
    return (pixels * plan.pixel_mask).ravel()


def similarity_map(
    grid: TokenGrid,
    weights: HeadWeights,
    head: OutputHead,
    text_row: np.ndarray,
    plan: MaskPlan,
) -> np.ndarray:
    """Cosine similarity between each in-mask pixel's output and a text row."""
    text_row = np.asarray(text_row, dtype=np.float64)
    if abs(float(np.linalg.norm(text_row)) - 1.0) > 1e-4:
        raise ValidationError("text row must be unit-norm")
    _, _, x_f = project_tokens(grid, weights)
    pixels = _pixel_features(head.apply(grid.tokens + x_f), plan, head)
    cosines = normalize_rows(pixels) @ np.asarray(text_row, dtype=np.float64)
    return (cosines.reshape(plan.height, plan.width)) * plan.pixel_mask


class PoolingVariant(str, Enum):
    NAIVE = "naive"
    MASK_CLIP = "maskclip"
    DBA_ORIGINAL = "dba-original"
    DBA_APPROX = "dba-approx"
    DBA_APPROX_NO_RESIDUAL = "dba-approx-no-residual"
    DBA_MULTI_HEAD = "dba-multi-head"


def _multi_head_attention_output(
    x_q: np.ndarray,
    x_k: np.ndarray,
    x_v: np.ndarray,
    weights: HeadWeights,
    plan: MaskPlan,
) -> np.ndarray:
    heads = weights.head_count
    dim_qk = weights.width_qk // heads
    dim_v = weights.width_v // heads
    scale = np.sqrt(dim_qk)
    parts = []
    for h in range(heads):
        q = x_q[:, h * dim_qk:(h + 1) * dim_qk]
        k = x_k[:, h * dim_qk:(h + 1) * dim_qk]
        v = x_v[:, h * dim_v:(h + 1) * dim_v]
        parts.append(biased_attention(q, k, plan, scale) @ v)
    return np.concatenate(parts, axis=1) @ weights.w_p + weights.b_p


def pool_mask_embedding(
    grid: TokenGrid,
    weights: HeadWeights,
    head: OutputHead,
    plan: MaskPlan,
    variant: PoolingVariant | str = PoolingVariant.DBA_APPROX,
    include_residual: bool = True,
) -> np.ndarray:
    """Pool one mask into a unit-norm embedding using the chosen variant.

    ``include_residual`` drops the token residual from the head input; the
    no-residual variant ignores the flag (it never adds the residual).
    """
    variant = PoolingVariant(variant)
    plan.validate()
    head.validate()
    mask_flat = plan.pixel_mask.astype(np.float64).ravel()
    area = mask_flat.sum()
    if area == 0:
        raise ValidationError("cannot pool an empty mask")
    x_q, x_k, x_f = project_tokens(grid, weights)
    tokens = np.asarray(grid.tokens, dtype=np.float64)
    residual = tokens if include_residual else 0.0
    scale = np.sqrt(weights.width_qk)

    if variant == PoolingVariant.NAIVE:
        attention = softmax((x_q @ x_k.T) / scale, axis=1)
        token_features = head.apply(residual + attention @ x_f)
    elif variant == PoolingVariant.MASK_CLIP:
        token_features = head.apply(residual + x_f)
    elif variant == PoolingVariant.DBA_ORIGINAL:
        attention = biased_attention(x_q, x_k, plan, scale)
        affinity = average_affinity(attention, plan)
        pixels = _pixel_features(head.apply(residual + x_f), plan, head)
        return unit_vector(affinity @ pixels, "pooled embedding")
    elif variant == PoolingVariant.DBA_APPROX:
        attention = biased_attention(x_q, x_k, plan, scale)
        token_features = head.apply(residual + attention @ x_f)
    elif variant == PoolingVariant.DBA_APPROX_NO_RESIDUAL:
        attention = biased_attention(x_q, x_k, plan, scale)
        token_features = head.apply(attention @ x_f)
    elif variant == PoolingVariant.DBA_MULTI_HEAD:
        normed = layer_norm(tokens, weights.ln_gain, weights.ln_bias)
        x_v = normed @ weights.w_v + weights.b_v
        mixed = _multi_head_attention_output(x_q, x_k, x_v, weights, plan)
        token_features = head.apply(residual + mixed)
    else:  # pragma: no cover
        raise ValidationError(f"unhandled variant {variant}")

    pixels = _pixel_features(token_features, plan, head)
    return unit_vector(mask_flat @ pixels / area, "pooled embedding")


# ---------------------------------------------------------------------------
# Fixture serialization (token grid + weights + head in the manifest format)
# ---------------------------------------------------------------------------

_WEIGHT_FIELDS = (
    ("ln_gain", "ln_gain.f32"),
    ("ln_bias", "ln_bias.f32"),
    ("w_q", "wq.f32"),
    ("b_q", "bq.f32"),
    ("w_k", "wk.f32"),
    ("b_k", "bk.f32"),
    ("w_v", "wv.f32"),
    ("b_v", "bv.f32"),
    ("w_p", "wp.f32"),
    ("b_p", "bp.f32"),
)

_FULL_HEAD_FIELDS = (
    ("ln2_gain", "ln2_gain.f32"),
    ("ln2_bias", "ln2_bias.f32"),
    ("fc1", "fc1.f32"),
    ("fb1", "fb1.f32"),
    ("fc2", "fc2.f32"),
    ("fb2", "fb2.f32"),
    ("ln_post_gain", "lnp_gain.f32"),
    ("ln_post_bias", "lnp_bias.f32"),
    ("proj", "proj.f32"),
)


def save_kernel_fixture(
    path: str | Path, grid: TokenGrid, weights: HeadWeights, head: OutputHead
) -> None:
    grid.validate()
    weights.validate()
    head.validate()
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    files = {"tokens.f32": tensorio.write_tensor(directory, "tokens.f32", grid.tokens, "f32")}
    for attr, name in _WEIGHT_FIELDS:
        files[name] = tensorio.write_tensor(directory, name, getattr(weights, attr), "f32")
    if head.kind == "linear":
        files["g.f32"] = tensorio.write_tensor(directory, "g.f32", head.g, "f32")
    else:
        for attr, name in _FULL_HEAD_FIELDS:
            files[name] = tensorio.write_tensor(directory, name, getattr(head, attr), "f32")
    tensorio.write_manifest(
        directory,
        {
            "kind": "kernel_fixture",
            "version": 1,
            "grid_h": grid.grid_h,
            "grid_w": grid.grid_w,
            "head_count": weights.head_count,
            "head_kind": head.kind,
            "upsample": head.upsample,
            "files": files,
        },
    )


def load_kernel_fixture(path: str | Path) -> tuple[TokenGrid, HeadWeights, OutputHead]:
    directory = Path(path)
    manifest = tensorio.read_manifest(directory, expected_kind="kernel_fixture")

    def tensor(name: str) -> np.ndarray:
        return tensorio.read_tensor(directory, name, tensorio.file_entry(manifest, name))

    grid = TokenGrid(
        tokens=tensor("tokens.f32"),
        grid_h=int(manifest["grid_h"]),
        grid_w=int(manifest["grid_w"]),
    )
    weights = HeadWeights(
        **{attr: tensor(name) for attr, name in _WEIGHT_FIELDS},
        head_count=int(manifest.get("head_count", 1)),
    )
    kind = manifest.get("head_kind", "full")
    if kind == "linear":
        head = OutputHead(kind="linear", upsample=manifest.get("upsample", "bilinear"),
                          g=tensor("g.f32"))
    else:
        head = OutputHead(
            kind="full",
            upsample=manifest.get("upsample", "bilinear"),
            **{attr: tensor(name) for attr, name in _FULL_HEAD_FIELDS},
        )
    grid.validate()
    weights.validate()
    head.validate()
    return grid, weights, head


# ---------------------------------------------------------------------------
# Synthetic inputs and the equivalence selftest used by the CLI
# ---------------------------------------------------------------------------

def random_kernel_inputs(
    rng: np.random.Generator,
    grid_h: int = 4,
    grid_w: int = 4,
    d_in: int = 12,
    d_out: int = 8,
    head_count: int = 1,
    head_kind: str = "linear",
    upsample: str = "identity",
    shared_qk: bool = False,
    hidden: int | None = None,
) -> tuple[TokenGrid, HeadWeights, OutputHead]:
    """Random but well-conditioned tensors for tests and the selftest CLI."""
    l = grid_h * grid_w
    grid = TokenGrid(tokens=rng.standard_normal((l, d_in)), grid_h=grid_h, grid_w=grid_w)
    scale = 1.0 / np.sqrt(d_in)
    w_q = rng.standard_normal((d_in, d_in)) * scale
    weights = HeadWeights(
        ln_gain=1.0 + 0.1 * rng.standard_normal(d_in),
        ln_bias=0.1 * rng.standard_normal(d_in),
        w_q=w_q,
        b_q=0.1 * rng.standard_normal(d_in),
        w_k=w_q.copy() if shared_qk else rng.standard_normal((d_in, d_in)) * scale,
        b_k=0.1 * rng.standard_normal(d_in),
        w_v=rng.standard_normal((d_in, d_in)) * scale,
        b_v=0.1 * rng.standard_normal(d_in),
        w_p=rng.standard_normal((d_in, d_in)) * scale,
        b_p=0.1 * rng.standard_normal(d_in),
        head_count=head_count,
    )
    if shared_qk:
        weights.b_k = weights.b_q.copy()
    if head_kind == "linear":
        head = OutputHead(kind="linear", upsample=upsample,
                          g=rng.standard_normal((d_in, d_out)) * scale)
    else:
        hidden = hidden or 2 * d_in
        head = OutputHead(
            kind="full",
            upsample=upsample,
            ln2_gain=1.0 + 0.1 * rng.standard_normal(d_in),
            ln2_bias=0.1 * rng.standard_normal(d_in),
            fc1=rng.standard_normal((d_in, hidden)) * scale,
            fb1=0.1 * rng.standard_normal(hidden),
            fc2=rng.standard_normal((hidden, d_in)) / np.sqrt(hidden),
            fb2=0.1 * rng.standard_normal(d_in),
            ln_post_gain=1.0 + 0.1 * rng.standard_normal(d_in),
            ln_post_bias=0.1 * rng.standard_normal(d_in),
            proj=rng.standard_normal((d_in, d_out)) * scale,
        )
    return grid, weights, head


def _random_token_mask(rng: np.random.Generator, grid_h: int, grid_w: int) -> np.ndarray:
    mask = (rng.random((grid_h, grid_w)) < 0.5).astype(np.uint8)
    if mask.sum() == 0:
        mask.flat[int(rng.integers(mask.size))] = 1
    return mask


def selftest(n_grids: int = 100, seed: int = 0) -> list[dict]:
    """Run the pooling equivalence and bias-suppression checks.

    Returns one record per check with ``name``, ``passed``, and ``detail``.
    """
    rng = np.random.default_rng(seed)
    results: list[dict] = []

    # Equivalence of explicit affinity pooling and biased-attention pooling
    # under a linear head, no residual, single head, identity upsampling.
    worst_cos = 1.0
    for _ in range(n_grids):
        gh, gw = int(rng.integers(3, 6)), int(rng.integers(3, 6))
        grid, weights, head = random_kernel_inputs(rng, gh, gw, d_in=10, d_out=6)
        plan = make_mask_plan(_random_token_mask(rng, gh, gw), gh, gw)
        e_orig = pool_mask_embedding(
            grid, weights, head, plan, PoolingVariant.DBA_ORIGINAL, include_residual=False
        )
        e_approx = pool_mask_embedding(
            grid, weights, head, plan, PoolingVariant.DBA_APPROX_NO_RESIDUAL
        )
        worst_cos = min(worst_cos, float(e_orig @ e_approx))
    results.append(
        {
            "name": "affinity-pooling-equivalence",
            "passed": worst_cos > 1.0 - 1e-10,
            "detail": f"min cosine {worst_cos:.3e} over {n_grids} grids",
        }
    )

    # Full-image mask with shared query/key projections: bias inactive, so
    # biased-attention pooling must reduce to plain attention pooling.
    worst_diff = 0.0
    for _ in range(20):
        gh = gw = 4
        grid, weights, head = random_kernel_inputs(
            rng, gh, gw, head_kind="full", upsample="bilinear", shared_qk=True
        )
        plan = make_mask_plan(np.ones((gh * 4, gw * 4), dtype=np.uint8), gh, gw)
        e_naive = pool_mask_embedding(grid, weights, head, plan, PoolingVariant.NAIVE)
        e_dba = pool_mask_embedding(grid, weights, head, plan, PoolingVariant.DBA_APPROX)
        worst_diff = max(worst_diff, float(np.abs(e_naive - e_dba).max()))
    results.append(
        {
            "name": "full-mask-reduces-to-naive",
            "passed": worst_diff < 1e-6,
            "detail": f"max abs diff {worst_diff:.3e}",
        }
    )

    # Softmax mass on forbidden pairs.
    rows_checked = 0
    worst_mass = 0.0
    while rows_checked < 1000:
        gh, gw = 5, 5
        grid, weights, _ = random_kernel_inputs(rng, gh, gw)
        plan = make_mask_plan(_random_token_mask(rng, gh, gw), gh, gw)
        x_q, x_k, _ = project_tokens(grid, weights)
        attention = biased_attention(x_q, x_k, plan, np.sqrt(weights.width_qk))
        forbidden = attention * (1.0 - plan.bias_matrix)
        worst_mass = max(worst_mass, float(forbidden.sum(axis=1).max()))
        row_sums = attention.sum(axis=1)
        if np.abs(row_sums - 1.0).max() > 1e-6:
            worst_mass = 1.0
        rows_checked += attention.shape[0]
    results.append(
        {
            "name": "bias-suppression",
            "passed": worst_mass < 1e-20,
            "detail": f"max forbidden row mass {worst_mass:.3e} over {rows_checked} rows",
        }
    )
    return results
