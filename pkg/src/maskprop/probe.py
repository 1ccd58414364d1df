"""Area-weighted linear probe over frozen mask embeddings.

Soft cross-entropy against pseudo-labels, each sample weighted by its mask
area so large masks dominate exactly as much as duplicating them would.
Optimization is SGD with momentum, linear warmup, and cosine decay; the
concrete recipe follows the standard linear-probe protocol for frozen
features (90 epochs, base LR 0.1 scaled by batch size / 256, momentum 0.9,
no weight decay).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import SoftLabelMatrix
from .errors import NumericalError, ValidationError
from .numerics import check_finite, log_softmax, softmax
from . import tensorio

__all__ = [
    "ProbeHyper",
    "ProbeModel",
    "train_probe",
    "probe_scores",
    "probe_loss_and_grad",
    "save_probe",
    "load_probe",
]


@dataclass
class ProbeHyper:
    epochs: int = 90
    batch_size: int = 4096
    base_learning_rate: float = 0.1
    lr_reference_batch: int = 256
    warmup_epochs: int = 10
    weight_decay: float = 0.0
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True
    use_bias: bool = False

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr_reference_batch < 1:
            raise ValidationError("epochs, batch size, and reference batch must be positive")
        if self.base_learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ValidationError("warmup must lie within the epoch budget")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight decay must be nonnegative")


@dataclass
class ProbeModel:
    weights: np.ndarray  # (K, d)
    bias: np.ndarray | None = None
    training_log: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.weights.shape[0])

    @property
    def d(self) -> int:
        return int(self.weights.shape[1])


def probe_loss_and_grad(
    weights: np.ndarray,
    bias: np.ndarray | None,
    x: np.ndarray,
    targets: np.ndarray,
    sample_weights: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Weighted soft cross-entropy and its analytic gradient.

    The loss is ``sum_i w_i * CE(softmax(U x_i), t_i) / sum_i w_i``.
    """
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    sample_weights = np.asarray(sample_weights, dtype=np.float64)
    logits = x @ weights.T
    if bias is not None:
        logits = logits + bias
    log_probs = log_softmax(logits, axis=1)
    weight_total = sample_weights.sum()
    per_sample = -(targets * log_probs).sum(axis=1)
    loss = float((sample_weights * per_sample).sum() / weight_total)
    scaled = (softmax(logits, axis=1) - targets) * (sample_weights / weight_total)[:, None]
    grad_w = scaled.T @ x
    grad_b = scaled.sum(axis=0) if bias is not None else None
    return loss, grad_w, grad_b


def _learning_rate(hyper: ProbeHyper, epoch: int, peak: float) -> float:
    if hyper.warmup_epochs > 0 and epoch < hyper.warmup_epochs:
        return peak * (epoch + 1) / hyper.warmup_epochs
    span = max(hyper.epochs - hyper.warmup_epochs, 1)
    progress = (epoch - hyper.warmup_epochs) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def train_probe(
    x: np.ndarray,
    p_c: SoftLabelMatrix | np.ndarray,
    areas: np.ndarray,
    hyper: ProbeHyper | None = None,
) -> ProbeModel:
    """Fit the probe with mini-batch SGD; deterministic for a fixed seed."""
    hyper = hyper or ProbeHyper()
    hyper.validate()
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(
        p_c.data if isinstance(p_c, SoftLabelMatrix) else p_c, dtype=np.float64
    )
    areas = np.asarray(areas, dtype=np.float64)
    if x.ndim != 2 or targets.shape[0] != x.shape[0] or areas.shape != (x.shape[0],):
        raise ValidationError("embeddings, targets, and areas disagree in shape")
    check_finite(x, "embeddings")
    check_finite(targets, "targets")
    row_sums = targets.sum(axis=1)
    if np.any(targets < 0) or np.abs(row_sums - 1.0).max() > 1e-6:
        raise ValidationError("targets must be rows of the probability simplex")
    if np.any(areas <= 0):
        raise ValidationError("areas must be positive")

    n, d = x.shape
    k = targets.shape[1]
    batch = min(hyper.batch_size, n)
    peak_lr = hyper.base_learning_rate * batch / hyper.lr_reference_batch

    rng = np.random.default_rng(hyper.seed)
    weights = np.zeros((k, d), dtype=np.float64)
    bias = np.zeros(k, dtype=np.float64) if hyper.use_bias else None
    velocity_w = np.zeros_like(weights)
    velocity_b = np.zeros(k, dtype=np.float64) if hyper.use_bias else None
    log: list[float] = []

    for epoch in range(hyper.epochs):
        order = rng.permutation(n) if hyper.shuffle else np.arange(n)
        lr = _learning_rate(hyper, epoch, peak_lr)
        epoch_loss = 0.0
        epoch_weight = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, grad_w, grad_b = probe_loss_and_grad(
                weights, bias, x[idx], targets[idx], areas[idx]
            )
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite probe loss at epoch {epoch}")
            batch_weight = float(areas[idx].sum())
            epoch_loss += loss * batch_weight
            epoch_weight += batch_weight
            if hyper.weight_decay:
                grad_w = grad_w + hyper.weight_decay * weights
            velocity_w = hyper.momentum * velocity_w - lr * grad_w
            weights = weights + velocity_w
            if bias is not None:
                velocity_b = hyper.momentum * velocity_b - lr * grad_b
                bias = bias + velocity_b
        log.append(epoch_loss / epoch_weight)

    return ProbeModel(weights=weights, bias=bias, training_log=log)


def probe_scores(model: ProbeModel, embeddings: np.ndarray) -> np.ndarray:
    """Raw logits for one embedding row or a matrix of rows."""
    e = np.asarray(embeddings, dtype=np.float64)
    single = e.ndim == 1
    if single:
        e = e[None, :]
    if e.shape[1] != model.d:
        raise ValidationError(f"embedding width {e.shape[1]} != probe width {model.d}")
    logits = e @ model.weights.T
    if model.bias is not None:
        logits = logits + model.bias
    return logits[0] if single else logits


def save_probe(model: ProbeModel, path: str | Path) -> None:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    files = {"u.f32": tensorio.write_tensor(directory, "u.f32", model.weights, "f32")}
    if model.bias is not None:
        files["bias.f32"] = tensorio.write_tensor(directory, "bias.f32", model.bias, "f32")
    tensorio.write_manifest(
        directory,
        {
            "kind": "probe_model",
            "version": 1,
            "training_log": [float(v) for v in model.training_log],
            "files": files,
        },
    )


def load_probe(path: str | Path) -> ProbeModel:
    directory = Path(path)
    manifest = tensorio.read_manifest(directory, expected_kind="probe_model")
    weights = tensorio.read_tensor(directory, "u.f32", tensorio.file_entry(manifest, "u.f32"))
    bias = None
    if "bias.f32" in manifest.get("files", {}):
        bias = tensorio.read_tensor(
            directory, "bias.f32", tensorio.file_entry(manifest, "bias.f32")
        )
    return ProbeModel(
        weights=weights.astype(np.float64),
        bias=None if bias is None else bias.astype(np.float64),
        training_log=[float(v) for v in manifest.get("training_log", [])],
    )
