"""Synthetic embedding fixtures for regression checks.

Gaussian clusters on the unit sphere stand in for mask embeddings wherever a
check needs data with known structure: the exact-vs-approximate inductive
comparison, noise-robustness fixtures, and the CLI's oracle command.
"""
from __future__ import annotations

import numpy as np

from .numerics import normalize_rows
from .propagation import (
    PropagationConfig,
    build_knn_graph,
    inductive_weights,
    propagate_inductive,
    propagate_inductive_exact,
    propagate_transductive,
)

__all__ = ["cluster_embeddings", "one_hot", "inductive_agreement"]


def cluster_embeddings(
    rng: np.random.Generator,
    n: int,
    d: int,
    n_clusters: int,
    spread: float = 0.25,
) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm embeddings around random orthonormal cluster centers."""
    basis = np.linalg.qr(rng.standard_normal((d, d)))[0]
    centers = basis[:n_clusters]
    labels = np.arange(n) % n_clusters
    points = centers[labels] + spread * rng.standard_normal((n, d))
    return normalize_rows(points), labels


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def inductive_agreement(
    n: int = 200,
    d: int = 8,
    n_clusters: int = 3,
    k: int = 10,
    alpha: float = 0.9,
    n_queries: int = 100,
    seed: int = 7,
    spread: float = 0.25,
) -> float:
    """Top-1 agreement between approximate and exact inductive propagation.

    Training points carry one-hot labels of their cluster; queries come from
    the same clusters and use an all-zero prior on both paths.
    """
    rng = np.random.default_rng(seed)
    x, labels = cluster_embeddings(rng, n, d, n_clusters, spread)
    p_c = one_hot(labels, n_clusters)
    config = PropagationConfig(alpha=alpha, k=k)
    graph = build_knn_graph(x, k)
    p_star = propagate_transductive(graph, p_c, config)
    queries, _ = cluster_embeddings(rng, n_queries, d, n_clusters, spread)
    zero_prior = np.zeros(n_clusters)
    agree = 0
    for q in queries:
        w = inductive_weights(x, graph.degrees, q, k)
        approx = propagate_inductive(zero_prior, w, p_star, alpha)
        exact = propagate_inductive_exact(x, p_c, zero_prior, q, config)
        agree += int(np.argmax(approx) == np.argmax(exact))
    return agree / n_queries
