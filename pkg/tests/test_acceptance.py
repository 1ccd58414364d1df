"""Acceptance suite: one test per release criterion, one printed line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the PASS/FAIL line
and the measured value for every criterion.
"""
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from maskprop.bundle import SupervisionType, save_bundle
from maskprop.cli import main as cli_main
from maskprop.evaluation import mask_f1, miou, rasterize
from maskprop.kernel import (
    PoolingVariant,
    biased_attention,
    make_mask_plan,
    pool_mask_embedding,
    project_tokens,
    random_kernel_inputs,
)
from maskprop.numerics import normalize_rows, softmax
from maskprop.probe import probe_loss_and_grad
from maskprop.propagation import (
    PropagationConfig,
    build_knn_graph,
    inductive_weights,
    propagate_transductive,
    supplement,
)
from maskprop.synthetic import inductive_agreement, one_hot

from helpers import make_bundle, noise_fixture_f1


def report(name: str, passed: bool, detail: str) -> None:
    print(f"[ACCEPT] {name}: {'PASS' if passed else 'FAIL'} ({detail})")
    assert passed, f"{name}: {detail}"


class TestAcceptance:
    def test_transductive_solver_vs_dense(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        start = time.perf_counter()
        for _ in range(50):
            n = int(rng.integers(20, 201))
            k = int(rng.integers(3, min(12, n - 1)))
            n_classes = int(rng.integers(2, 6))
            x = normalize_rows(rng.standard_normal((n, 6)))
            graph = build_knn_graph(x, k)
            p_c = softmax(rng.standard_normal((n, n_classes)) * 2, axis=1)
            config = PropagationConfig(alpha=0.9, k=k, cg_tolerance=1e-9)
            solution = propagate_transductive(graph, p_c, config)
            dense = np.linalg.solve(np.eye(n) - 0.9 * graph.s_norm.toarray(), p_c)
            rel = np.linalg.norm(solution.data - dense) / np.linalg.norm(dense)
            worst = max(worst, rel)
        elapsed = time.perf_counter() - start
        report(
            "transductive-solver-vs-dense",
            worst < 1e-6 and elapsed < 5.0,
            f"worst relative error {worst:.3e} over 50 graphs in {elapsed:.2f}s",
        )

    def test_hand_solved_two_node_case(self):
        x = np.array([[1.0, 0.0], [1.0, 0.0]])
        graph = build_knn_graph(x, 1)
        p_c = np.array([[1.0, 0.0], [0.0, 0.0]])
        solution = propagate_transductive(graph, p_c, PropagationConfig(alpha=0.5, k=1))
        expected = np.array([[4.0 / 3.0, 0.0], [2.0 / 3.0, 0.0]])
        err = np.abs(solution.data - expected).max()
        report("hand-solved-two-node-case", err < 1e-9, f"max abs error {err:.2e}")

    def test_inductive_approximation_vs_exact(self):
        agreement = inductive_agreement(
            n=200, d=8, n_clusters=3, k=10, alpha=0.9, n_queries=100, seed=11, spread=0.5
        )
        # 0.93 measured by the oracle run and frozen; the tolerance allows
        # one boundary query to flip across BLAS builds
        frozen = 0.93
        report(
            "inductive-approximation-vs-exact",
            agreement >= 0.90 and abs(agreement - frozen) <= 0.011,
            f"top-1 agreement {agreement:.2f} (frozen {frozen:.2f})",
        )

    def test_pooling_equivalences(self):
        rng = np.random.default_rng(43)
        worst_cos = 1.0
        for _ in range(100):
            gh, gw = int(rng.integers(3, 6)), int(rng.integers(3, 6))
            grid, weights, head = random_kernel_inputs(rng, gh, gw, d_in=10, d_out=6)
            mask = (rng.random((gh, gw)) < 0.5).astype(np.uint8)
            mask.flat[int(rng.integers(gh * gw))] = 1
            plan = make_mask_plan(mask, gh, gw)
            e_orig = pool_mask_embedding(
                grid, weights, head, plan, PoolingVariant.DBA_ORIGINAL, include_residual=False
            )
            e_approx = pool_mask_embedding(
                grid, weights, head, plan, PoolingVariant.DBA_APPROX_NO_RESIDUAL
            )
            worst_cos = min(worst_cos, float(e_orig @ e_approx))

        worst_diff = 0.0
        for _ in range(20):
            grid, weights, head = random_kernel_inputs(
                rng, 4, 4, d_in=10, d_out=6, head_kind="full",
                upsample="bilinear", shared_qk=True,
            )
            plan = make_mask_plan(np.ones((16, 16), dtype=np.uint8), 4, 4)
            e_naive = pool_mask_embedding(grid, weights, head, plan, PoolingVariant.NAIVE)
            e_biased = pool_mask_embedding(grid, weights, head, plan, PoolingVariant.DBA_APPROX)
            worst_diff = max(worst_diff, float(np.abs(e_naive - e_biased).max()))

        report(
            "pooling-equivalences",
            worst_cos > 1.0 - 1e-10 and worst_diff < 1e-6,
            f"min cosine {worst_cos:.12f}, full-mask max diff {worst_diff:.2e}",
        )

    def test_attention_bias_suppression(self):
        rng = np.random.default_rng(44)
        rows = 0
        worst_mass = 0.0
        worst_row_sum = 0.0
        while rows < 1000:
            gh = gw = 5
            grid, weights, _ = random_kernel_inputs(rng, gh, gw, d_in=9)
            mask = (rng.random((gh, gw)) < 0.5).astype(np.uint8)
            mask.flat[int(rng.integers(gh * gw))] = 1
            plan = make_mask_plan(mask, gh, gw, bias_constant=1e4)
            x_q, x_k, _ = project_tokens(grid, weights)
            attention = biased_attention(x_q, x_k, plan, np.sqrt(weights.width_qk))
            forbidden = attention * (1.0 - plan.bias_matrix)
            worst_mass = max(worst_mass, float(forbidden.sum(axis=1).max()))
            worst_row_sum = max(worst_row_sum, float(np.abs(attention.sum(axis=1) - 1).max()))
            rows += attention.shape[0]
        report(
            "attention-bias-suppression",
            worst_mass < 1e-20 and worst_row_sum < 1e-6,
            f"max forbidden mass {worst_mass:.2e}, row-sum error {worst_row_sum:.2e} "
            f"over {rows} rows",
        )

    def test_probe_gradient_checks(self):
        rng = np.random.default_rng(45)
        worst_rel = 0.0
        for _ in range(5):
            n, d, k = 8, 4, 3
            x = normalize_rows(rng.standard_normal((n, d)))
            targets = softmax(rng.standard_normal((n, k)), axis=1)
            areas = np.abs(rng.standard_normal(n)) + 0.5
            u = rng.standard_normal((k, d))
            _, grad, _ = probe_loss_and_grad(u, None, x, targets, areas)
            fd = np.zeros_like(u)
            h = 1e-6
            for i in range(k):
                for j in range(d):
                    up, down = u.copy(), u.copy()
                    up[i, j] += h
                    down[i, j] -= h
                    fd[i, j] = (
                        probe_loss_and_grad(up, None, x, targets, areas)[0]
                        - probe_loss_and_grad(down, None, x, targets, areas)[0]
                    ) / (2 * h)
            worst_rel = max(worst_rel, np.linalg.norm(grad - fd) / np.linalg.norm(fd))

        x = normalize_rows(rng.standard_normal((10, 5)))
        targets = softmax(rng.standard_normal((10, 3)), axis=1)
        areas = np.abs(rng.standard_normal(10)) + 1.0
        u = rng.standard_normal((3, 5))
        doubled = areas.copy()
        doubled[4] *= 2.0
        _, grad_doubled, _ = probe_loss_and_grad(u, None, x, targets, doubled)
        _, grad_dup, _ = probe_loss_and_grad(
            u, None,
            np.vstack([x, x[4:5]]),
            np.vstack([targets, targets[4:5]]),
            np.concatenate([areas, areas[4:5]]),
        )
        dup_diff = float(np.abs(grad_doubled - grad_dup).max())
        report(
            "probe-gradient-checks",
            worst_rel < 1e-4 and dup_diff < 1e-6,
            f"max FD relative error {worst_rel:.2e}, duplication diff {dup_diff:.2e}",
        )

    def test_glcc_beats_probe_under_noise(self):
        glcc_f1, probe_f1 = noise_fixture_f1(seed=2)
        report(
            "glcc-beats-probe-under-noise",
            glcc_f1 > probe_f1,
            f"GLCC macro-F1 {glcc_f1:.4f} vs probe-only {probe_f1:.4f}",
        )

    def test_degree_normalization_sublinear(self):
        from test_propagation import TestDegreeNormalizationSublinearity as Fixture

        k_sel = 10
        masses = {}
        l1_masses = {}
        for m in (1, 2, 4, 8):
            x, e_v = Fixture.build_case(m, k_sel)
            graph = build_knn_graph(x, 8)
            weights = inductive_weights(x, graph.degrees, e_v, k_sel)
            group = np.flatnonzero(weights.indices < m)
            masses[m] = weights.normalized[group].sum()
            l1 = weights.raw / weights.raw.sum()
            l1_masses[m] = l1[group].sum()
        sublinear = all(masses[m] < m * masses[1] for m in (2, 4, 8))
        linear = all(
            abs(l1_masses[m] - m * l1_masses[1]) < 1e-12 * m for m in (2, 4, 8)
        )
        growth = ", ".join(
            f"m={m}: {masses[m] / (m * masses[1]):.3f}" for m in (2, 4, 8)
        )
        report(
            "degree-normalization-sublinear",
            sublinear and linear,
            f"normalized growth ratios {growth}; L1 exactly proportional",
        )

    def test_pseudo_label_simplex(self):
        rng = np.random.default_rng(46)
        worst = 0.0
        for _ in range(30):
            n, k = int(rng.integers(2, 20)), int(rng.integers(2, 7))
            scores = rng.standard_normal((n, k)) * 20
            for kind in (SupervisionType.FULL, SupervisionType.SEMI, SupervisionType.WEAK):
                if kind == SupervisionType.FULL:
                    y = softmax(rng.standard_normal((n, k)), axis=1)
                    labeled = None
                elif kind == SupervisionType.SEMI:
                    labeled = (rng.random(n) < 0.5).astype(np.uint8)
                    y = softmax(rng.standard_normal((n, k)), axis=1)
                    y[labeled == 0] = 0.0
                else:
                    y = (rng.random((n, k)) < 0.4).astype(float)
                    y[y.sum(axis=1) == 0, 0] = 1.0
                    labeled = None
                out = supplement(y, labeled, scores, kind)
                sums = out.data.sum(axis=1)
                if kind == SupervisionType.SEMI:
                    sums = sums[labeled == 0]
                if sums.size:
                    worst = max(worst, float(np.abs(sums - 1.0).max()))
                if out.data.min() < 0:
                    worst = 1.0
        report(
            "pseudo-label-simplex",
            worst < 1e-6,
            f"worst row-sum deviation {worst:.2e} across supervision modes",
        )

    def test_evaluation_exactness(self):
        from maskprop.bundle import MaskRecord
        from maskprop.evaluation import SegmentationMap

        gt = SegmentationMap(labels=np.repeat([[0, 0, 1, 1]], 4, axis=0).astype(np.int32))
        pred_labels = gt.labels.copy()
        pred_labels[0, 2] = 0
        per_class, value = miou(SegmentationMap(labels=pred_labels), gt, 2)
        miou_ok = (
            per_class[0] == 8 / 9 and per_class[1] == 7 / 8 and value == (8 / 9 + 7 / 8) / 2
        )

        per_class_f1, macro = mask_f1([0, 0, 1, 1, 1, 0], [0, 0, 0, 1, 1, 1], 2)
        f1_ok = per_class_f1[0] == 2 / 3 and per_class_f1[1] == 2 / 3 and macro == 2 / 3

        raster = np.zeros((4, 4), dtype=np.uint8)
        raster[0:2, 0:2] = 1
        record = MaskRecord.from_raster("img", raster)
        painted = rasterize([(record, 1, 0.9)], background=0)
        raster_ok = painted.labels[0, 0] == 1 and painted.labels[3, 3] == 0

        report(
            "evaluation-exactness",
            miou_ok and f1_ok and raster_ok,
            f"mIoU {value:.6f} == {(8 / 9 + 7 / 8) / 2:.6f}, macro F1 {macro:.6f} == {2 / 3:.6f}",
        )

    def test_end_to_end_determinism(self, tmp_path):
        bundle, _ = make_bundle(seed=33, n_images=20, supervision="weak")
        save_bundle(bundle, tmp_path / "bundle")

        def run(tag: str) -> dict[str, str]:
            args = ["--workdir", str(tmp_path), "--threads", "1"]
            assert cli_main([*args, "bootstrap", "--bundle", "bundle",
                             "--out", f"model_{tag}", "--k", "8", "--rounds", "2",
                             "--epochs", "30", "--base-lr", "1.0",
                             "--warmup-epochs", "3", "--seed", "5"]) == 0
            assert cli_main([*args, "infer", "--bundle", "bundle",
                             "--model", f"model_{tag}", "--out", f"pred_{tag}"]) == 0
            assert cli_main([*args, "eval", "--pred", f"pred_{tag}",
                             "--gt-bundle", "gt", "--out", f"metrics_{tag}.json"]) == 0
            digests = {}
            for directory in (f"model_{tag}", f"pred_{tag}"):
                for path in sorted((tmp_path / directory).rglob("*")):
                    if path.is_file() and path.name != "run_config.json":
                        rel = str(path.relative_to(tmp_path / directory))
                        digests[f"{directory.rsplit('_', 1)[0]}/{rel}"] = hashlib.sha256(
                            path.read_bytes()
                        ).hexdigest()
            digests["metrics"] = hashlib.sha256(
                (tmp_path / f"metrics_{tag}.json").read_bytes()
            ).hexdigest()
            return digests

        gt_bundle, _ = make_bundle(seed=33, n_images=20, supervision="full")
        save_bundle(gt_bundle, tmp_path / "gt")
        first = run("a")
        second = run("b")
        identical = first == second
        report(
            "end-to-end-determinism",
            identical,
            f"{len(first)} artifacts byte-identical across reruns",
        )
