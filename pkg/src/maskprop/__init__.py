"""Classify segmentation masks from frozen vision-language embeddings.

The package splits into:

* :mod:`maskprop.bundle` - the on-disk data model for masks, embeddings,
  text classifiers, and supervision labels.
* :mod:`maskprop.kernel` - mask-aware attention pooling over encoder
  tensors, producing mask embeddings.
* :mod:`maskprop.propagation` - kNN affinity graphs, transductive and
  inductive label propagation, pseudo-label construction.
* :mod:`maskprop.probe` - the area-weighted linear probe.
* :mod:`maskprop.glcc` - the bootstrapped global-local consistent
  classifier built from probe and propagation.
* :mod:`maskprop.evaluation` - rasterization, mIoU, and mask-level F1.
* :mod:`maskprop.cli` - the ``maskprop`` command.

Submodules are imported lazily so the command line can configure the
numerical backends' environment before they load.
"""
from __future__ import annotations

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "bundle",
    "kernel",
    "propagation",
    "probe",
    "glcc",
    "evaluation",
    "synthetic",
    "cli",
    "errors",
    "numerics",
    "tensorio",
)

_EXPORTS = {
    # bundle
    "DatasetBundle": "bundle",
    "EmbeddingMatrix": "bundle",
    "MaskRecord": "bundle",
    "SoftLabelMatrix": "bundle",
    "Supervision": "bundle",
    "SupervisionType": "bundle",
    "LabelKind": "bundle",
    "TextClassifier": "bundle",
    "load_bundle": "bundle",
    "save_bundle": "bundle",
    "normalize_rows": "bundle",
    "rle_encode": "bundle",
    "rle_decode": "bundle",
    # kernel
    "TokenGrid": "kernel",
    "HeadWeights": "kernel",
    "OutputHead": "kernel",
    "MaskPlan": "kernel",
    "PoolingVariant": "kernel",
    "make_mask_plan": "kernel",
    "project_tokens": "kernel",
    "downsample_mask": "kernel",
    "biased_attention": "kernel",
    "average_affinity": "kernel",
    "similarity_map": "kernel",
    "pool_mask_embedding": "kernel",
    "save_kernel_fixture": "kernel",
    "load_kernel_fixture": "kernel",
    # propagation
    "PropagationConfig": "propagation",
    "AffinityGraph": "propagation",
    "InductiveWeights": "propagation",
    "build_knn_graph": "propagation",
    "propagate_transductive": "propagation",
    "inductive_weights": "propagation",
    "propagate_inductive": "propagation",
    "propagate_inductive_exact": "propagation",
    "supplement": "propagation",
    "save_graph": "propagation",
    "load_graph": "propagation",
    # probe
    "ProbeHyper": "probe",
    "ProbeModel": "probe",
    "train_probe": "probe",
    "probe_scores": "probe",
    # glcc
    "GLCCModel": "glcc",
    "bootstrap": "glcc",
    "classify": "glcc",
    "classify_batch": "glcc",
    "classify_zero_shot": "glcc",
    "save_glcc_model": "glcc",
    "load_glcc_model": "glcc",
    # evaluation
    "SegmentationMap": "evaluation",
    "ConfusionMatrix": "evaluation",
    "rasterize": "evaluation",
    "miou": "evaluation",
    "mask_f1": "evaluation",
    "mask_gt_label": "evaluation",
    # errors
    "ValidationError": "errors",
    "NumericalError": "errors",
}

__all__ = ["__version__", *sorted(_EXPORTS), *(_SUBMODULES)]


def __getattr__(name: str):
    if name in _EXPORTS:
        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__() -> list[str]:
    return sorted(__all__)
