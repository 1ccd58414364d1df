import numpy as np
import pytest

from maskprop.bundle import SupervisionType
from maskprop.errors import ValidationError
from maskprop.glcc import (
    bootstrap,
    classify,
    classify_batch,
    classify_zero_shot,
    load_glcc_model,
    save_glcc_model,
)
from maskprop.numerics import normalize_rows, softmax
from maskprop.probe import ProbeHyper, probe_scores
from maskprop.propagation import PropagationConfig, propagate_inductive_exact
from maskprop.synthetic import cluster_embeddings

from helpers import make_bundle, noise_fixture_f1

FAST_PROBE = ProbeHyper(epochs=20, base_learning_rate=1.0, warmup_epochs=2, seed=0)
SMALL_CONFIG = PropagationConfig(alpha=0.9, k=8)


class TestBootstrap:
    def test_full_supervision_forces_single_round(self):
        bundle, _ = make_bundle(seed=0, n_images=15, supervision="full")
        model, records = bootstrap(
            bundle, SMALL_CONFIG, FAST_PROBE, rounds=3, collect_stats=True
        )
        assert model.rounds == 1
        assert len(records) == 1
        assert np.array_equal(model.p_star.data, bundle.supervision.labels.astype(np.float64))

    def test_zero_rounds_rejected(self):
        bundle, _ = make_bundle(seed=1, n_images=15)
        with pytest.raises(ValidationError, match="round"):
            bootstrap(bundle, SMALL_CONFIG, FAST_PROBE, rounds=0)

    def test_open_vocabulary_rejected(self):
        bundle, _ = make_bundle(seed=2, n_images=15, supervision="open-vocabulary")
        with pytest.raises(ValidationError, match="open-vocabulary"):
            bootstrap(bundle, SMALL_CONFIG, FAST_PROBE)

    def test_semi_without_labeled_rows_rejected(self):
        bundle, _ = make_bundle(seed=3, n_images=15, supervision="semi")
        bundle.supervision.labeled[:] = 0
        bundle.supervision.labels[:] = 0.0
        with pytest.raises(ValidationError, match="no labeled"):
            bootstrap(bundle, SMALL_CONFIG, FAST_PROBE)

    def test_deterministic_model_tensors(self):
        bundle, _ = make_bundle(seed=4, n_images=15, supervision="weak")
        a = bootstrap(bundle, SMALL_CONFIG, FAST_PROBE, rounds=2)
        b = bootstrap(bundle, SMALL_CONFIG, FAST_PROBE, rounds=2)
        assert np.array_equal(a.probe.weights, b.probe.weights)
        assert np.array_equal(a.p_star.data, b.p_star.data)
        assert np.array_equal(a.degrees, b.degrees)

    def test_semi_labeled_rows_survive_every_round(self):
        bundle, _ = make_bundle(seed=5, n_images=15, supervision="semi", labeled_fraction=0.4)
        flags = bundle.supervision.labeled.astype(bool)
        y = bundle.supervision.labels.astype(np.float64)
        _, records = bootstrap(
            bundle, SMALL_CONFIG, FAST_PROBE, rounds=2, collect_stats=True
        )
        for record in records:
            assert np.allclose(record["p_c"][flags], y[flags], atol=1e-12)
            assert np.allclose(record["p_r"][flags], y[flags], atol=1e-12)

    def test_weak_rounds_respect_image_label_filter(self):
        bundle, _ = make_bundle(seed=6, n_images=15, supervision="weak")
        allowed = bundle.supervision.labels.astype(bool)
        _, records = bootstrap(
            bundle, SMALL_CONFIG, FAST_PROBE, rounds=2, collect_stats=True
        )
        for record in records:
            assert np.all(record["p_c"][~allowed] < 1e-12)
            assert np.all(record["p_r"][~allowed] < 1e-12)

    def test_weak_pseudo_labels_improve_over_rounds(self):
        bundle, truth = make_bundle(
            seed=5, n_images=25, supervision="weak", spread=0.35, text_noise=0.6
        )
        _, records = bootstrap(
            bundle, SMALL_CONFIG, FAST_PROBE, rounds=2, collect_stats=True
        )
        agreements = [
            (record["p_c"].argmax(axis=1) == truth).mean() for record in records
        ]
        assert agreements[1] >= agreements[0]


@pytest.fixture(scope="module")
def model_and_data():
    bundle, truth = make_bundle(seed=8, n_images=20, supervision="semi")
    model = bootstrap(bundle, SMALL_CONFIG, FAST_PROBE, rounds=1)
    return model, bundle, truth


class TestClassify:

    def test_alpha_zero_equals_probe(self):
        bundle, _ = make_bundle(seed=9, n_images=15)
        model = bootstrap(
            bundle, PropagationConfig(alpha=0.0, k=8), FAST_PROBE, rounds=1
        )
        rng = np.random.default_rng(10)
        for _ in range(10):
            e_v = normalize_rows(rng.standard_normal((1, bundle.embeddings.d)))[0]
            _, label = classify(model, e_v)
            assert label == int(np.argmax(probe_scores(model.probe, e_v)))

    def test_isolated_query_equals_probe(self):
        bundle, _ = make_bundle(seed=10, n_images=20, supervision="semi")
        model = bootstrap(bundle, SMALL_CONFIG, FAST_PROBE, rounds=1)
        # a query in the opposite cone: every similarity is negative, so the
        # clamped neighbor weights vanish and only the probe prior remains
        mean = model.x_train.mean(axis=0)
        e_v = -mean / np.linalg.norm(mean)
        assert (model.x_train @ e_v).max() < 0
        scores, label = classify(model, e_v)
        prior = softmax(probe_scores(model.probe, e_v))
        assert np.allclose(scores, prior, atol=1e-12)
        assert label == int(np.argmax(prior))

    def test_matches_exact_oracle_near_boundary(self):
        bundle, truth = make_bundle(seed=11, n_images=20, supervision="semi", spread=0.3)
        config = PropagationConfig(alpha=0.9, k=8)
        model, records = bootstrap(bundle, config, FAST_PROBE, rounds=1, collect_stats=True)
        p_r = records[-1]["p_r"]
        rng = np.random.default_rng(12)
        x = model.x_train
        agree = 0
        for _ in range(10):
            i, j = rng.integers(x.shape[0]), rng.integers(x.shape[0])
            e_v = normalize_rows((0.55 * x[i] + 0.45 * x[j])[None, :])[0]
            prior = softmax(probe_scores(model.probe, e_v))
            _, label = classify(model, e_v)
            exact = propagate_inductive_exact(x, p_r, prior, e_v, config)
            agree += int(label == int(np.argmax(exact)))
        assert agree >= 9

    def test_argmax_invariant_under_softmax_scaling(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            z = rng.standard_normal(6)
            for t in (1e-3, 0.5, 1.0, 7.0, 300.0):
                assert int(np.argmax(softmax(t * z))) == int(np.argmax(z))

    def test_batch_matches_single(self, model_and_data):
        model, bundle, _ = model_and_data
        rows = bundle.embeddings.data[:5].astype(np.float64)
        scores, labels = classify_batch(model, rows)
        for i, row in enumerate(rows):
            s, l = classify(model, row)
            assert np.array_equal(scores[i], s)
            assert labels[i] == l


class TestNoiseFixture:
    def test_glcc_beats_probe_under_label_noise(self):
        glcc_f1, probe_f1 = noise_fixture_f1(seed=2)
        assert glcc_f1 > probe_f1


class TestZeroShot:
    def test_text_row_recovers_its_class(self):
        bundle, _ = make_bundle(seed=14, n_images=5)
        for y in range(bundle.text.k):
            e_v = bundle.text.weights[y].astype(np.float64)
            e_v /= np.linalg.norm(e_v)
            _, label = classify_zero_shot(bundle, e_v)
            assert label == y

    def test_orthogonal_query_uniform_and_lowest_index(self):
        # one-hot text rows and a query on an unused coordinate: the scores
        # are exactly zero, the softmax exactly uniform, and the argmax tie
        # resolves to the lowest class index
        bundle, _ = make_bundle(seed=15, n_images=5, d=8, n_classes=3)
        bundle.text.weights = np.eye(8, dtype=np.float32)[:3]
        e_v = np.zeros(8)
        e_v[7] = 1.0
        scores, label = classify_zero_shot(bundle, e_v)
        assert np.all(scores == 0.0)
        assert np.allclose(softmax(scores), 1.0 / 3.0, atol=1e-15)
        assert label == 0

    def test_matches_matmul_oracle(self):
        bundle, _ = make_bundle(seed=16, n_images=5)
        rng = np.random.default_rng(17)
        e_v = normalize_rows(rng.standard_normal((1, bundle.embeddings.d)))[0]
        scores, label = classify_zero_shot(bundle, e_v)
        expected = bundle.text.temperature * (bundle.text.weights.astype(np.float64) @ e_v)
        assert np.allclose(scores, expected, atol=1e-10)
        assert label == int(np.argmax(expected))


class TestModelIO:
    def test_round_trip_classification(self, tmp_path):
        from maskprop.bundle import save_bundle

        bundle, _ = make_bundle(seed=18, n_images=15, supervision="weak")
        save_bundle(bundle, tmp_path / "bundle")
        model = bootstrap(bundle, SMALL_CONFIG, FAST_PROBE, rounds=1)
        from maskprop.glcc import bundle_embeddings_sha256

        save_glcc_model(
            model,
            tmp_path / "model",
            bundle_ref="bundle",
            embeddings_sha256=bundle_embeddings_sha256(tmp_path / "bundle"),
        )
        loaded = load_glcc_model(tmp_path / "model", base_dir=tmp_path)
        rng = np.random.default_rng(19)
        for _ in range(5):
            e_v = normalize_rows(rng.standard_normal((1, bundle.embeddings.d)))[0]
            s1, l1 = classify(model, e_v)
            s2, l2 = classify(loaded, e_v)
            assert l1 == l2
            assert np.allclose(s1, s2, atol=1e-5)

    def test_changed_embeddings_rejected(self, tmp_path):
        from maskprop.bundle import save_bundle

        bundle, _ = make_bundle(seed=20, n_images=15)
        save_bundle(bundle, tmp_path / "bundle")
        model = bootstrap(bundle, SMALL_CONFIG, FAST_PROBE, rounds=1)
        save_glcc_model(
            model, tmp_path / "model", bundle_ref="bundle", embeddings_sha256="0" * 64
        )
        with pytest.raises(ValidationError, match="changed"):
            load_glcc_model(tmp_path / "model", base_dir=tmp_path)
