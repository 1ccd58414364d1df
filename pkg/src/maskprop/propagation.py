"""Sparse affinity graphs and label propagation over them.

Transductive smoothing solves ``(I - alpha * S_norm) P = P_c`` with conjugate
gradients, where ``S_norm`` is the symmetrized, degree-normalized k-nearest
neighbor cosine graph. Inductive classification of a new embedding avoids
re-solving the system: it aggregates pre-smoothed labels of the embedding's
neighbors with degree-normalized weights and adds them to a prior score. The
exact (and expensive) alternative that appends the query to the graph and
re-solves is kept as an oracle for small problems.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .bundle import EmbeddingMatrix, LabelKind, SoftLabelMatrix, SupervisionType
from .errors import NumericalError, ValidationError
from .numerics import check_finite, check_unit_rows, softmax
from . import tensorio

__all__ = [
    "PropagationConfig",
    "AffinityGraph",
    "InductiveWeights",
    "build_knn_graph",
    "propagate_transductive",
    "inductive_weights",
    "propagate_inductive",
    "propagate_inductive_exact",
    "supplement",
    "save_graph",
    "load_graph",
]

DEGREE_FLOOR = 1e-12


@dataclass
class PropagationConfig:
    """Hyper-parameters shared by the transductive and inductive rules."""

    alpha: float = 0.9
    k: int = 50
    cg_tolerance: float = 1e-6
    cg_max_iterations: int = 1000

    def validate(self) -> None:
        if not 0.0 <= self.alpha < 1.0:
            raise ValidationError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.k < 1:
            raise ValidationError("k must be positive")
        if self.cg_tolerance <= 0 or self.cg_max_iterations < 1:
            raise ValidationError("bad conjugate-gradient settings")


@dataclass
class AffinityGraph:
    """kNN affinity matrix with degrees and its normalized form."""

    s: sp.csr_matrix          # raw clamped similarities, zero diagonal
    degrees: np.ndarray       # row sums of (S + S^T), floored
    s_norm: sp.csr_matrix     # D^{-1/2} (S + S^T) D^{-1/2}
    k: int

    @property
    def n(self) -> int:
        return int(self.s.shape[0])


@dataclass
class InductiveWeights:
    """Neighbor indices with raw and degree-normalized similarities."""

    indices: np.ndarray
    raw: np.ndarray
    normalized: np.ndarray


def _as_unit_rows(x, what: str) -> np.ndarray:
    data = x.data if isinstance(x, EmbeddingMatrix) else x
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValidationError(f"{what} must be 2-D")
    check_finite(data, what)
    check_unit_rows(data, 1e-4, what)
    return data


def _top_k(sims: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest entries per row, ties to lower index."""
    order = np.argsort(-sims, axis=-1, kind="stable")
    return order[..., :k]


def build_knn_graph(x, k: int, degree_floor: float = DEGREE_FLOOR) -> AffinityGraph:
    """Exhaustive k-nearest-neighbor cosine graph over unit-norm rows.

    Similarities are clamped at zero so degrees stay nonnegative; isolated
    rows get a floored degree and an all-zero normalized row.
    """
    data = _as_unit_rows(x, "embeddings")
    n = data.shape[0]
    if n <= k:
        raise ValidationError(f"need more than k={k} rows, got {n}")
    sims = data @ data.T
    np.fill_diagonal(sims, -np.inf)
    neighbors = _top_k(sims, k)
    values = np.take_along_axis(sims, neighbors, axis=1)
    values = np.maximum(values, 0.0)
    rows = np.repeat(np.arange(n), k)
    s = sp.csr_matrix((values.ravel(), (rows, neighbors.ravel())), shape=(n, n))
    symmetric = (s + s.T).tocsr()
    degrees = np.maximum(np.asarray(symmetric.sum(axis=1)).ravel(), degree_floor)
    inv_sqrt = 1.0 / np.sqrt(degrees)
    s_norm = symmetric.multiply(inv_sqrt[:, None]).multiply(inv_sqrt[None, :]).tocsr()
    return AffinityGraph(s=s, degrees=degrees, s_norm=s_norm, k=k)


def _cg_solve(
    s_norm: sp.csr_matrix,
    alpha: float,
    rhs: np.ndarray,
    tolerance: float,
    max_iterations: int,
) -> tuple[np.ndarray, int, float]:
    """Conjugate gradients on (I - alpha * S_norm) X = B, all columns jointly.

    The operator is the same SPD matrix for every column, so a single CG
    recursion over the stacked unknowns (Frobenius inner products) converges
    exactly like the one-column case and the stopping rule is the relative
    Frobenius residual.
    """
    b_norm = float(np.linalg.norm(rhs))
    if b_norm == 0.0:
        return np.zeros_like(rhs), 0, 0.0

    def apply(m: np.ndarray) -> np.ndarray:
        return m - alpha * (s_norm @ m)

    x = rhs.copy()
    residual = rhs - apply(x)
    direction = residual.copy()
    rs_old = float(np.vdot(residual, residual))
    iterations = 0
    while np.sqrt(rs_old) / b_norm >= tolerance:
        if iterations >= max_iterations:
            raise NumericalError(
                f"conjugate gradient did not converge in {max_iterations} iterations "
                f"(relative residual {np.sqrt(rs_old) / b_norm:.3e})"
            )
        a_dir = apply(direction)
        step = rs_old / float(np.vdot(direction, a_dir))
        x += step * direction
        residual -= step * a_dir
        rs_new = float(np.vdot(residual, residual))
        direction = residual + (rs_new / rs_old) * direction
        rs_old = rs_new
        iterations += 1
    return x, iterations, np.sqrt(rs_old) / b_norm


def propagate_transductive(
    graph: AffinityGraph,
    p_c: SoftLabelMatrix | np.ndarray,
    config: PropagationConfig,
    return_stats: bool = False,
):
    """Smooth soft labels over the graph; rows of the result may not sum to 1."""
    config.validate()
    rhs = np.asarray(p_c.data if isinstance(p_c, SoftLabelMatrix) else p_c, dtype=np.float64)
    if rhs.ndim != 2 or rhs.shape[0] != graph.n:
        raise ValidationError(f"labels shape {rhs.shape} does not match graph size {graph.n}")
    check_finite(rhs, "labels")
    solution, iterations, residual = _cg_solve(
        graph.s_norm, config.alpha, rhs, config.cg_tolerance, config.cg_max_iterations
    )
    result = SoftLabelMatrix(data=solution, kind=LabelKind.PROPAGATED)
    if return_stats:
        return result, {"iterations": iterations, "residual": residual}
    return result


def inductive_weights(x, degrees: np.ndarray, e_v: np.ndarray, k: int) -> InductiveWeights:
    """Degree-normalized neighbor weights of a query embedding.

    The normalization divides each clamped similarity by
    ``sqrt(0.5 * degree_i * sum(similarities))``, damping neighbors that sit
    in dense subclusters; an all-nonpositive similarity profile yields zero
    weights.
    """
    data = _as_unit_rows(x, "embeddings")
    query = np.asarray(e_v, dtype=np.float64)
    check_unit_rows(query[None, :], 1e-4, "query embedding")
    sims = data @ query
    k_eff = min(k, data.shape[0])
    indices = _top_k(sims, k_eff)
    raw = np.maximum(sims[indices], 0.0)
    total = raw.sum()
    if total == 0.0:
        normalized = np.zeros_like(raw)
    else:
        normalized = raw / np.sqrt(0.5 * degrees[indices] * total)
    return InductiveWeights(indices=indices, raw=raw, normalized=normalized)


def propagate_inductive(
    prior: np.ndarray,
    weights: InductiveWeights,
    p_star: SoftLabelMatrix | np.ndarray,
    alpha: float,
) -> np.ndarray:
    """Revise a prior score with the weighted smoothed labels of neighbors."""
    labels = np.asarray(
        p_star.data if isinstance(p_star, SoftLabelMatrix) else p_star, dtype=np.float64
    )
    prior = np.asarray(prior, dtype=np.float64)
    if prior.shape != (labels.shape[1],):
        raise ValidationError(
            f"prior shape {prior.shape} does not match {labels.shape[1]} classes"
        )
    return prior + alpha * (weights.normalized @ labels[weights.indices])


def propagate_inductive_exact(
    x,
    p_c: SoftLabelMatrix | np.ndarray,
    prior: np.ndarray,
    e_v: np.ndarray,
    config: PropagationConfig,
    max_n: int = 1000,
) -> np.ndarray:
    """Oracle: append the query to the graph and dense-solve the full system.

    Builds the (N+1)-row graph by exhaustive search, normalizes it the same
    way as the transductive path, solves with a dense direct solver, and
    returns the query's row. Only for small N.
    """
    config.validate()
    data = _as_unit_rows(x, "embeddings")
    n = data.shape[0]
    if n > max_n:
        raise ValidationError(f"exact solve capped at N={max_n}, got {n}")
    labels = np.asarray(p_c.data if isinstance(p_c, SoftLabelMatrix) else p_c, dtype=np.float64)
    query = np.asarray(e_v, dtype=np.float64)
    stacked = np.vstack([data, query[None, :]])
    graph = build_knn_graph(stacked, config.k)
    system = np.eye(n + 1) - config.alpha * graph.s_norm.toarray()
    rhs = np.vstack([labels, np.asarray(prior, dtype=np.float64)[None, :]])
    solution = np.linalg.solve(system, rhs)
    return solution[-1]


def supplement(
    y: np.ndarray,
    labeled: np.ndarray | None,
    scores: np.ndarray,
    supervision: SupervisionType,
    bias_constant: float = 1e4,
) -> SoftLabelMatrix:
    """Merge supervision with classification scores into pseudo-labels.

    * full: the supervision is already complete and is returned as-is.
    * semi: labeled rows keep their supervision; unlabeled rows get the
      softmax of their scores.
    * weak: scores are filtered through the image-level multi-hot set with a
      large negative bias on disallowed classes, then softmaxed.
    """
    supervision = SupervisionType(supervision)
    y = np.asarray(y, dtype=np.float64)
    if supervision == SupervisionType.FULL:
        return SoftLabelMatrix(data=y.copy(), kind=LabelKind.PSEUDO)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != y.shape:
        raise ValidationError(f"scores shape {scores.shape} != labels shape {y.shape}")
    check_finite(scores, "scores")
    if supervision == SupervisionType.SEMI:
        if labeled is None:
            raise ValidationError("semi supervision requires labeled flags")
        flags = np.asarray(labeled, dtype=bool)
        out = softmax(scores, axis=1)
        out[flags] = y[flags]
        return SoftLabelMatrix(data=out, kind=LabelKind.PSEUDO)
    if supervision == SupervisionType.WEAK:
        empty = np.flatnonzero(y.sum(axis=1) == 0)
        if empty.size:
            raise ValidationError(f"weak label row {int(empty[0])} allows no class")
        logits = scores * y - bias_constant * (1.0 - y)
        return SoftLabelMatrix(data=softmax(logits, axis=1), kind=LabelKind.PSEUDO)
    raise ValidationError("pseudo-labels are undefined for open-vocabulary data")


def save_graph(graph: AffinityGraph, path: str | Path) -> None:
    """Persist the raw affinity matrix (CSR triplet) and degrees."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    s = graph.s.tocsr()
    files = {
        "s_indptr.i64": tensorio.write_tensor(directory, "s_indptr.i64", s.indptr, "i64"),
        "s_indices.i64": tensorio.write_tensor(directory, "s_indices.i64", s.indices, "i64"),
        "s_data.f32": tensorio.write_tensor(directory, "s_data.f32", s.data, "f32"),
        "degrees.f32": tensorio.write_tensor(directory, "degrees.f32", graph.degrees, "f32"),
    }
    tensorio.write_manifest(
        directory,
        {"kind": "affinity_graph", "version": 1, "n": graph.n, "k": graph.k, "files": files},
    )


def load_graph(path: str | Path) -> AffinityGraph:
    directory = Path(path)
    manifest = tensorio.read_manifest(directory, expected_kind="affinity_graph")
    n = int(manifest["n"])

    def tensor(name: str) -> np.ndarray:
        return tensorio.read_tensor(directory, name, tensorio.file_entry(manifest, name))

    s = sp.csr_matrix(
        (
            tensor("s_data.f32").astype(np.float64),
            tensor("s_indices.i64"),
            tensor("s_indptr.i64"),
        ),
        shape=(n, n),
    )
    degrees = tensor("degrees.f32").astype(np.float64)
    symmetric = (s + s.T).tocsr()
    recomputed = np.maximum(np.asarray(symmetric.sum(axis=1)).ravel(), DEGREE_FLOOR)
    if np.abs(recomputed - degrees).max() > 1e-3:
        raise ValidationError("stored degrees disagree with the affinity matrix")
    inv_sqrt = 1.0 / np.sqrt(recomputed)
    s_norm = symmetric.multiply(inv_sqrt[:, None]).multiply(inv_sqrt[None, :]).tocsr()
    return AffinityGraph(s=s, degrees=recomputed, s_norm=s_norm, k=int(manifest["k"]))
