import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from maskprop.bundle import load_bundle, save_bundle
from maskprop.cli import main
from maskprop.evaluation import load_map
from maskprop.probe import probe_scores
from maskprop.propagation import build_knn_graph, load_graph, save_graph

from helpers import make_bundle

BOOT_FLAGS = [
    "--k", "8", "--rounds", "1", "--epochs", "20", "--base-lr", "1.0",
    "--warmup-epochs", "2", "--seed", "3",
]


def tree_digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture()
def workdir(tmp_path):
    bundle, _ = make_bundle(seed=21, n_images=20, supervision="full")
    save_bundle(bundle, tmp_path / "bundle")
    return tmp_path


class TestBuildGraph:
    def test_files_exist_and_reload(self, workdir):
        assert main(["--workdir", str(workdir), "build-graph", "--bundle", "bundle",
                     "--out", "graph", "--k", "8"]) == 0
        graph = load_graph(workdir / "graph")
        assert graph.n == 80 and graph.k == 8
        assert (workdir / "graph" / "run_config.json").is_file()

    def test_byte_equal_to_library_call(self, workdir):
        main(["--workdir", str(workdir), "build-graph", "--bundle", "bundle",
              "--out", "cli_graph", "--k", "8"])
        bundle = load_bundle(workdir / "bundle")
        graph = build_knn_graph(bundle.embeddings.data, 8)
        save_graph(graph, workdir / "lib_graph")
        for name in ("manifest.json", "s_indptr.i64", "s_indices.i64", "s_data.f32",
                     "degrees.f32"):
            assert (workdir / "cli_graph" / name).read_bytes() == (
                workdir / "lib_graph" / name
            ).read_bytes()

    def test_corrupt_manifest_exits_2(self, workdir, capsys):
        (workdir / "bundle" / "manifest.json").write_text("{not json")
        code = main(["--workdir", str(workdir), "build-graph", "--bundle", "bundle",
                     "--out", "graph", "--k", "8"])
        assert code == 2
        assert "data error" in capsys.readouterr().err


class TestBootstrap:
    def test_full_supervision_single_round(self, workdir):
        code = main(["--workdir", str(workdir), "bootstrap", "--bundle", "bundle",
                     "--out", "model", "--rounds", "3", *BOOT_FLAGS[:2],
                     "--epochs", "15", "--warmup-epochs", "2", "--seed", "3"])
        assert code == 0
        rounds = json.loads((workdir / "model" / "rounds.json").read_text())
        assert len(rounds) == 1
        manifest = json.loads((workdir / "model" / "manifest.json").read_text())
        assert manifest["rounds"] == 1

    def test_open_vocabulary_refused(self, tmp_path, capsys):
        bundle, _ = make_bundle(seed=22, supervision="open-vocabulary")
        save_bundle(bundle, tmp_path / "ov")
        code = main(["--workdir", str(tmp_path), "bootstrap", "--bundle", "ov",
                     "--out", "model", *BOOT_FLAGS])
        assert code == 2
        assert "not applicable" in capsys.readouterr().err

    def test_weak_bundle_writes_round_metrics(self, tmp_path):
        bundle, _ = make_bundle(seed=23, n_images=20, supervision="weak")
        save_bundle(bundle, tmp_path / "weak")
        code = main(["--workdir", str(tmp_path), "bootstrap", "--bundle", "weak",
                     "--out", "model", "--k", "8", "--rounds", "2", "--epochs", "15",
                     "--warmup-epochs", "2", "--seed", "3"])
        assert code == 0
        rounds = json.loads((tmp_path / "model" / "rounds.json").read_text())
        assert [r["round"] for r in rounds] == [1, 2]
        assert all("probe_loss" in r and "cg_iterations" in r for r in rounds)

    def test_rerun_with_written_config_reproduces_bytes(self, workdir, tmp_path):
        main(["--workdir", str(workdir), "bootstrap", "--bundle", "bundle",
              "--out", "m1", *BOOT_FLAGS])
        before = tree_digest(workdir / "m1")
        config = tmp_path / "saved_config.json"
        config.write_bytes((workdir / "m1" / "run_config.json").read_bytes())
        main(["--workdir", str(workdir), "bootstrap", "--config", str(config),
              "--bundle", "bundle", "--out", "m1"])
        assert tree_digest(workdir / "m1") == before


class TestInfer:
    def test_alpha_zero_equals_probe_only(self, workdir):
        main(["--workdir", str(workdir), "bootstrap", "--bundle", "bundle",
              "--out", "model", "--alpha", "0.0", *BOOT_FLAGS])
        main(["--workdir", str(workdir), "infer", "--bundle", "bundle",
              "--model", "model", "--out", "pred"])
        payload = json.loads((workdir / "pred" / "labels.json").read_text())
        from maskprop.glcc import load_glcc_model

        model = load_glcc_model(workdir / "model", base_dir=workdir)
        bundle = load_bundle(workdir / "bundle")
        expected = probe_scores(model.probe, bundle.embeddings.data).argmax(axis=1)
        assert [m["label"] for m in payload["masks"]] == expected.tolist()

    def test_zero_shot_path_used_for_ovss(self, tmp_path):
        bundle, _ = make_bundle(seed=24, supervision="open-vocabulary")
        save_bundle(bundle, tmp_path / "ov")
        code = main(["--workdir", str(tmp_path), "infer", "--bundle", "ov",
                     "--out", "pred", "--zero-shot"])
        assert code == 0
        payload = json.loads((tmp_path / "pred" / "labels.json").read_text())
        assert payload["mode"] == "zero-shot"
        weights = bundle.text.weights.astype(np.float64)
        scores = bundle.embeddings.data.astype(np.float64) @ weights.T
        assert [m["label"] for m in payload["masks"]] == scores.argmax(axis=1).tolist()

    def test_matches_library_classify(self, workdir):
        main(["--workdir", str(workdir), "bootstrap", "--bundle", "bundle",
              "--out", "model", *BOOT_FLAGS])
        main(["--workdir", str(workdir), "infer", "--bundle", "bundle",
              "--model", "model", "--out", "pred"])
        from maskprop.glcc import classify_batch, load_glcc_model

        model = load_glcc_model(workdir / "model", base_dir=workdir)
        bundle = load_bundle(workdir / "bundle")
        _, labels = classify_batch(model, bundle.embeddings.data)
        payload = json.loads((workdir / "pred" / "labels.json").read_text())
        assert [m["label"] for m in payload["masks"]] == labels.tolist()
        assert (workdir / "pred" / "maps").is_dir()

    def test_maps_loadable(self, workdir):
        main(["--workdir", str(workdir), "infer", "--bundle", "bundle",
              "--out", "pred", "--zero-shot"])
        maps = sorted((workdir / "pred" / "maps").glob("*.seg"))
        assert len(maps) == 20
        seg = load_map(maps[0])
        assert seg.labels.shape == (16, 16)


class TestEval:
    def make_perfect_pred(self, workdir):
        # predictions copied from the ground truth itself
        bundle = load_bundle(workdir / "bundle")
        labels = bundle.supervision.labels.argmax(axis=1)
        from maskprop.cli import _rasterize_predictions
        from maskprop.evaluation import save_map

        pred = workdir / "perfect"
        (pred / "maps").mkdir(parents=True)
        payload = {
            "version": 1,
            "mode": "oracle",
            "masks": [
                {"index": i, "image_id": m.image_id, "label": int(labels[i]),
                 "class_name": bundle.text.class_names[int(labels[i])],
                 "confidence": 1.0}
                for i, m in enumerate(bundle.masks)
            ],
        }
        (pred / "labels.json").write_text(json.dumps(payload))
        for image_id, seg in _rasterize_predictions(
            bundle, labels, np.ones(len(bundle.masks))
        ).items():
            save_map(seg, pred / "maps" / f"{image_id}.seg")
        return pred

    def test_identical_pred_gt_gives_miou_one(self, workdir):
        self.make_perfect_pred(workdir)
        code = main(["--workdir", str(workdir), "eval", "--pred", "perfect",
                     "--gt-bundle", "bundle", "--out", "metrics.json"])
        assert code == 0
        metrics = json.loads((workdir / "metrics.json").read_text())
        assert metrics["miou"] == pytest.approx(1.0)
        assert metrics["macro_f1"] == pytest.approx(1.0)

    def test_empty_prediction_dir_errors(self, workdir, capsys):
        (workdir / "empty").mkdir()
        code = main(["--workdir", str(workdir), "eval", "--pred", "empty",
                     "--gt-bundle", "bundle", "--out", "metrics.json"])
        assert code == 2
        assert "labels.json" in capsys.readouterr().err

    def test_csv_table_written(self, workdir):
        self.make_perfect_pred(workdir)
        code = main(["--workdir", str(workdir), "eval", "--pred", "perfect",
                     "--gt-bundle", "bundle", "--out", "metrics.json",
                     "--csv", "metrics.csv"])
        assert code == 0
        lines = (workdir / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "class,iou,f1"
        assert len(lines) == 4  # header + 3 classes

    def test_matches_library_metrics(self, workdir):
        main(["--workdir", str(workdir), "infer", "--bundle", "bundle",
              "--out", "pred", "--zero-shot"])
        main(["--workdir", str(workdir), "eval", "--pred", "pred",
              "--gt-bundle", "bundle", "--out", "metrics.json"])
        metrics = json.loads((workdir / "metrics.json").read_text())

        from maskprop.evaluation import mask_f1

        bundle = load_bundle(workdir / "bundle")
        payload = json.loads((workdir / "pred" / "labels.json").read_text())
        pred_labels = [m["label"] for m in payload["masks"]]
        gt_labels = bundle.supervision.labels.argmax(axis=1)
        _, macro = mask_f1(pred_labels, gt_labels, bundle.text.k)
        assert metrics["macro_f1"] == pytest.approx(macro)
        assert 0.0 <= metrics["miou"] <= 1.0


class TestMisc:
    def test_kernel_selftest_passes(self, capsys):
        assert main(["kernel-selftest", "--grids", "10", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 3

    def test_oracle_regression_flags(self, capsys):
        code = main(["oracle", "--n", "60", "--d", "6", "--queries", "10",
                     "--k", "5", "--seed", "4", "--expect", "0.0",
                     "--expect-tolerance", "0.01"])
        assert code == 3
        code = main(["oracle", "--n", "60", "--d", "6", "--queries", "10",
                     "--k", "5", "--seed", "4"])
        assert code == 0

    def test_unknown_flag_exits_1(self, capsys):
        assert main(["build-graph", "--nonsense"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_missing_subcommand_exits_1(self):
        assert main([]) == 1

    def test_threads_flag_accepted(self, workdir):
        code = main(["--workdir", str(workdir), "--threads", "1", "build-graph",
                     "--bundle", "bundle", "--out", "graph_t", "--k", "8"])
        assert code == 0
        config = json.loads((workdir / "graph_t" / "run_config.json").read_text())
        assert config["threads"] == 1
