"""Synthetic bundle builders shared by the test modules."""
from __future__ import annotations

import numpy as np

from maskprop.bundle import (
    DatasetBundle,
    EmbeddingMatrix,
    MaskRecord,
    Supervision,
    SupervisionType,
    TextClassifier,
)
from maskprop.numerics import normalize_rows
from maskprop.synthetic import cluster_embeddings, one_hot


def strip_masks(image_id: str, size: int, count: int) -> list[MaskRecord]:
    """Disjoint vertical strips covering one synthetic image."""
    edges = np.linspace(0, size, count + 1).astype(int)
    masks = []
    for j in range(count):
        raster = np.zeros((size, size), dtype=np.uint8)
        raster[:, edges[j]:edges[j + 1]] = 1
        masks.append(MaskRecord.from_raster(image_id, raster))
    return masks


def make_bundle(
    seed: int = 0,
    n_images: int = 10,
    masks_per_image: int = 4,
    d: int = 8,
    n_classes: int = 3,
    supervision: str = "full",
    labeled_fraction: float = 0.3,
    spread: float = 0.25,
    image_size: int = 16,
    text_noise: float = 0.2,
    flip_fraction: float = 0.0,
    temperature: float = 100.0,
    has_background: bool = False,
    data: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Clustered embeddings dressed up as a dataset bundle.

    Returns ``(bundle, true_labels)``; ``flip_fraction`` corrupts that many
    supervision rows (never the truth used for scoring). ``data`` supplies
    pre-built ``(embeddings, labels)`` instead of sampling fresh clusters.
    """
    rng = np.random.default_rng(seed)
    n = n_images * masks_per_image
    if data is None:
        x, labels = cluster_embeddings(rng, n, d, n_classes, spread)
    else:
        x, labels = data
        assert x.shape[0] == n, "data size must equal n_images * masks_per_image"
        d = x.shape[1]

    masks: list[MaskRecord] = []
    for i in range(n_images):
        masks.extend(strip_masks(f"img{i:03d}", image_size, masks_per_image))

    centers = np.zeros((n_classes, d))
    for c in range(n_classes):
        members = x[labels == c]
        centers[c] = members.mean(axis=0) if members.size else rng.standard_normal(d)
    text = normalize_rows(centers + text_noise * rng.standard_normal(centers.shape))

    y = one_hot(labels, n_classes)
    if flip_fraction > 0:
        flips = rng.random(n) < flip_fraction
        shifts = rng.integers(1, n_classes, size=n)
        flipped = (labels + shifts) % n_classes
        y[flips] = one_hot(flipped, n_classes)[flips]

    kind = SupervisionType(supervision)
    if kind == SupervisionType.FULL:
        sup = Supervision(kind=kind, labels=y.astype(np.float32))
    elif kind == SupervisionType.SEMI:
        labeled = rng.random(n) < labeled_fraction
        if not labeled.any():
            labeled[0] = True
        y_semi = y.copy()
        y_semi[~labeled] = 0.0
        sup = Supervision(
            kind=kind, labels=y_semi.astype(np.float32), labeled=labeled.astype(np.uint8)
        )
    elif kind == SupervisionType.WEAK:
        multi = np.zeros((n, n_classes), dtype=np.float32)
        for i in range(n_images):
            rows = slice(i * masks_per_image, (i + 1) * masks_per_image)
            for c in np.unique(labels[rows]):
                multi[rows, c] = 1.0
        sup = Supervision(kind=kind, labels=multi)
    else:
        sup = Supervision(kind=kind)

    bundle = DatasetBundle(
        masks=masks,
        embeddings=EmbeddingMatrix(x.astype(np.float32)),
        text=TextClassifier(
            weights=text.astype(np.float32),
            class_names=[f"class{c}" for c in range(n_classes)],
            has_background=has_background,
            temperature=temperature,
        ),
        supervision=sup,
    )
    bundle.validate()
    return bundle, labels


def noise_fixture_f1(seed: int = 0):
    """Macro F1 of GLCC vs probe-only on 3 clusters with 30% flipped labels.

    Train and test points come from the same cluster draw; the probe sees the
    flipped labels, scoring uses the truth. Returns ``(glcc_f1, probe_f1)``.
    """
    from maskprop.evaluation import mask_f1
    from maskprop.glcc import bootstrap, classify_batch
    from maskprop.probe import ProbeHyper, probe_scores
    from maskprop.propagation import PropagationConfig

    rng = np.random.default_rng(seed)
    n_train, n_test, d, n_classes = 120, 120, 8, 3
    x_all, labels_all = cluster_embeddings(rng, n_train + n_test, d, n_classes, spread=0.35)
    x_train, labels_train = x_all[:n_train], labels_all[:n_train]
    x_test, labels_test = x_all[n_train:], labels_all[n_train:]

    bundle, _ = make_bundle(
        seed=seed,
        n_images=30,
        masks_per_image=4,
        n_classes=n_classes,
        supervision="semi",
        labeled_fraction=1.0,
        flip_fraction=0.3,
        data=(x_train, labels_train),
    )
    model = bootstrap(
        bundle,
        config=PropagationConfig(alpha=0.9, k=10),
        probe_hyper=ProbeHyper(
            epochs=60, base_learning_rate=1.0, warmup_epochs=6, seed=seed
        ),
        rounds=1,
    )
    _, glcc_labels = classify_batch(model, x_test)
    probe_labels = probe_scores(model.probe, x_test).argmax(axis=1)
    _, glcc_f1 = mask_f1(glcc_labels, labels_test, n_classes)
    _, probe_f1 = mask_f1(probe_labels, labels_test, n_classes)
    return glcc_f1, probe_f1
