"""Global-local consistent classification of mask embeddings.

Construction alternates a linear probe with transductive label propagation:
each round trains the probe on the current pseudo-labels, refines the
pseudo-labels with the probe's scores, propagates them over the affinity
graph, and feeds the propagated labels into the next round. Inference adds
degree-normalized neighbor label mass to the probe's softmax prior.

Open-vocabulary bundles carry no supervision to bootstrap from; they are
served by :func:`classify_zero_shot` alone.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bundle import (
    DatasetBundle,
    LabelKind,
    SoftLabelMatrix,
    SupervisionType,
    load_bundle,
)
from .errors import ValidationError
from .numerics import softmax
from .probe import ProbeHyper, ProbeModel, probe_scores, train_probe
from .propagation import (
    AffinityGraph,
    PropagationConfig,
    build_knn_graph,
    inductive_weights,
    propagate_inductive,
    propagate_transductive,
    supplement,
)
from . import tensorio

__all__ = [
    "GLCCModel",
    "bootstrap",
    "classify",
    "classify_batch",
    "classify_zero_shot",
    "save_glcc_model",
    "load_glcc_model",
]


@dataclass
class GLCCModel:
    """Frozen classifier state produced by :func:`bootstrap`."""

    probe: ProbeModel
    p_star: SoftLabelMatrix
    degrees: np.ndarray
    x_train: np.ndarray
    config: PropagationConfig
    supervision: SupervisionType
    rounds: int

    def validate(self) -> None:
        n = self.x_train.shape[0]
        if self.p_star.n != n or self.degrees.shape != (n,):
            raise ValidationError("model tensors disagree on the number of masks")
        self.config.validate()


def bootstrap(
    bundle: DatasetBundle,
    config: PropagationConfig | None = None,
    probe_hyper: ProbeHyper | None = None,
    rounds: int = 2,
    temperature: float | None = None,
    graph: AffinityGraph | None = None,
    collect_stats: bool = False,
):
    """Build a GLCC from a supervised bundle.

    Full supervision needs no pseudo-label refinement: the probe is trained
    once on the ground-truth soft labels and the stored propagation target is
    reset to them (a single round, whatever ``rounds`` says).

    With ``collect_stats`` the return value is ``(model, round_records)``
    where each record holds the round's pseudo-labels and solver diagnostics.
    """
    config = config or PropagationConfig()
    config.validate()
    probe_hyper = probe_hyper or ProbeHyper()
    bundle.validate()
    supervision = bundle.supervision.kind
    if supervision == SupervisionType.OPEN_VOCABULARY:
        raise ValidationError(
            "GLCC not applicable to open-vocabulary bundles; use classify_zero_shot"
        )
    if rounds < 1:
        raise ValidationError("at least one bootstrap round is required")
    if supervision == SupervisionType.SEMI and not bundle.supervision.labeled.any():
        raise ValidationError("semi-supervised bundle has no labeled masks")

    x = bundle.embeddings.data.astype(np.float64)
    y = bundle.supervision.labels.astype(np.float64)
    labeled = bundle.supervision.labeled
    areas = bundle.areas.astype(np.float64)
    tau = bundle.text.temperature if temperature is None else float(temperature)
    if graph is None:
        graph = build_knn_graph(x, config.k)

    records: list[dict] = []

    if supervision == SupervisionType.FULL:
        p_c = supplement(y, None, None, supervision)
        probe = train_probe(x, p_c, areas, probe_hyper)
        p_star = SoftLabelMatrix(data=y.copy(), kind=LabelKind.PROPAGATED)
        records.append(
            {
                "round": 1,
                "probe_loss": probe.training_log[-1],
                "cg_iterations": 0,
                "cg_residual": 0.0,
                "p_c": p_c.data,
            }
        )
        model = GLCCModel(
            probe=probe,
            p_star=p_star,
            degrees=graph.degrees,
            x_train=x,
            config=config,
            supervision=supervision,
            rounds=1,
        )
        return (model, records) if collect_stats else model

    zero_shot = tau * (x @ bundle.text.weights.astype(np.float64).T)
    p_c = supplement(y, labeled, zero_shot, supervision)
    probe = None
    p_star = None
    for round_index in range(1, rounds + 1):
        if round_index > 1:
            p_c = supplement(y, labeled, p_star.data, supervision)
        probe = train_probe(x, p_c, areas, probe_hyper)
        p_r = supplement(y, labeled, probe_scores(probe, x), supervision)
        p_r = SoftLabelMatrix(data=p_r.data, kind=LabelKind.REFINED)
        p_star, stats = propagate_transductive(graph, p_r, config, return_stats=True)
        records.append(
            {
                "round": round_index,
                "probe_loss": probe.training_log[-1],
                "cg_iterations": stats["iterations"],
                "cg_residual": stats["residual"],
                "p_c": p_c.data,
                "p_r": p_r.data,
            }
        )

    model = GLCCModel(
        probe=probe,
        p_star=p_star,
        degrees=graph.degrees,
        x_train=x,
        config=config,
        supervision=supervision,
        rounds=rounds,
    )
    model.validate()
    return (model, records) if collect_stats else model


def classify(model: GLCCModel, e_v: np.ndarray) -> tuple[np.ndarray, int]:
    """Classify one unit-norm embedding; returns the revised score and label."""
    prior = softmax(probe_scores(model.probe, e_v))
    weights = inductive_weights(model.x_train, model.degrees, e_v, model.config.k)
    revised = propagate_inductive(prior, weights, model.p_star, model.config.alpha)
    return revised, int(np.argmax(revised))


def classify_batch(model: GLCCModel, embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = np.asarray(embeddings, dtype=np.float64)
    scores = np.empty((rows.shape[0], model.p_star.k), dtype=np.float64)
    labels = np.empty(rows.shape[0], dtype=np.int64)
    for i, row in enumerate(rows):
        scores[i], labels[i] = classify(model, row)
    return scores, labels


def classify_zero_shot(bundle: DatasetBundle, e_v: np.ndarray) -> tuple[np.ndarray, int]:
    """Temperature-scaled cosine scores against the text classifier."""
    if bundle.text is None:
        raise ValidationError("bundle has no text classifier")
    e = np.asarray(e_v, dtype=np.float64)
    scores = bundle.text.temperature * (bundle.text.weights.astype(np.float64) @ e)
    return scores, int(np.argmax(scores))


def save_glcc_model(
    model: GLCCModel,
    path: str | Path,
    bundle_ref: str | None = None,
    embeddings_sha256: str | None = None,
) -> None:
    """Persist the model; training embeddings stay in the referenced bundle."""
    model.validate()
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "u.f32": tensorio.write_tensor(directory, "u.f32", model.probe.weights, "f32"),
        "p_star.f32": tensorio.write_tensor(directory, "p_star.f32", model.p_star.data, "f32"),
        "degrees.f32": tensorio.write_tensor(directory, "degrees.f32", model.degrees, "f32"),
    }
    if model.probe.bias is not None:
        files["bias.f32"] = tensorio.write_tensor(directory, "bias.f32", model.probe.bias, "f32")
    tensorio.write_manifest(
        directory,
        {
            "kind": "glcc_model",
            "version": 1,
            "supervision": model.supervision.value,
            "rounds": model.rounds,
            "alpha": model.config.alpha,
            "k": model.config.k,
            "cg_tolerance": model.config.cg_tolerance,
            "cg_max_iterations": model.config.cg_max_iterations,
            "bundle_ref": bundle_ref,
            "embeddings_sha256": embeddings_sha256,
            "training_log": [float(v) for v in model.probe.training_log],
            "files": files,
        },
    )


def bundle_embeddings_sha256(bundle_path: str | Path) -> str:
    manifest = tensorio.read_manifest(Path(bundle_path), expected_kind="dataset_bundle")
    return tensorio.file_entry(manifest, "embeddings.f32")["sha256"]


def load_glcc_model(
    path: str | Path,
    bundle: DatasetBundle | None = None,
    bundle_dir: str | Path | None = None,
    base_dir: str | Path | None = None,
) -> GLCCModel:
    """Load a persisted model, resolving its training embeddings.

    Pass either the loaded training ``bundle``, an explicit ``bundle_dir``,
    or rely on the ``bundle_ref`` recorded in the model manifest (resolved
    against ``base_dir``).
    """
    directory = Path(path)
    manifest = tensorio.read_manifest(directory, expected_kind="glcc_model")

    def tensor(name: str) -> np.ndarray:
        return tensorio.read_tensor(directory, name, tensorio.file_entry(manifest, name))

    if bundle is None:
        if bundle_dir is None:
            ref = manifest.get("bundle_ref")
            if not ref:
                raise ValidationError("model records no bundle reference; pass one explicitly")
            bundle_dir = Path(base_dir or ".") / ref
        expected_sha = manifest.get("embeddings_sha256")
        if expected_sha and bundle_embeddings_sha256(bundle_dir) != expected_sha:
            raise ValidationError("training bundle embeddings changed since the model was built")
        bundle = load_bundle(bundle_dir)

    probe = ProbeModel(
        weights=tensor("u.f32").astype(np.float64),
        bias=(
            tensor("bias.f32").astype(np.float64)
            if "bias.f32" in manifest.get("files", {})
            else None
        ),
        training_log=[float(v) for v in manifest.get("training_log", [])],
    )
    model = GLCCModel(
        probe=probe,
        p_star=SoftLabelMatrix(
            data=tensor("p_star.f32").astype(np.float64), kind=LabelKind.PROPAGATED
        ),
        degrees=tensor("degrees.f32").astype(np.float64),
        x_train=bundle.embeddings.data.astype(np.float64),
        config=PropagationConfig(
            alpha=float(manifest["alpha"]),
            k=int(manifest["k"]),
            cg_tolerance=float(manifest["cg_tolerance"]),
            cg_max_iterations=int(manifest["cg_max_iterations"]),
        ),
        supervision=SupervisionType(manifest["supervision"]),
        rounds=int(manifest["rounds"]),
    )
    model.validate()
    return model
