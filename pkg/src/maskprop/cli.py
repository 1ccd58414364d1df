"""Command-line pipeline: graph building, bootstrap, inference, evaluation.

Every command resolves its configuration from an optional JSON config file
plus flag overrides, then writes the resolved configuration next to its
outputs so a run can be reproduced exactly. Exit codes: 0 success, 1 usage
error, 2 data/validation error, 3 numerical failure.

``--threads`` (or the ``MASKPROP_THREADS`` environment variable) caps worker
threads; it is applied to the numerical backends' environment knobs before
they are loaded, so set the environment variable when launching from scripts
that import the library first.
"""
from __future__ import annotations

import argparse
import json
import os
import re
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

THREADS_ENV = "MASKPROP_THREADS"
_THREAD_KNOBS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


def _apply_thread_cap(argv: list[str]) -> int | None:
    """Resolve the thread cap from argv/env before numerical imports."""
    threads: int | None = None
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            threads = int(env)
        except ValueError as exc:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    for i, arg in enumerate(argv):
        try:
            if arg == "--threads" and i + 1 < len(argv):
                threads = int(argv[i + 1])
            elif arg.startswith("--threads="):
                threads = int(arg.split("=", 1)[1])
        except ValueError as exc:
            raise UsageError(f"--threads expects an integer: {exc}") from exc
    if threads is not None:
        if threads < 1:
            raise UsageError("--threads must be positive")
        for knob in _THREAD_KNOBS:
            os.environ.setdefault(knob, str(threads))
    return threads


@dataclass
class RunConfig:
    """Resolved settings serialized next to every command's outputs."""

    version: int = 1
    command: str = ""
    seed: int = 0
    rounds: int = 2
    temperature: float | None = None
    threads: int | None = None
    alpha: float = 0.9
    k: int = 50
    cg_tolerance: float = 1e-6
    cg_max_iterations: int = 1000
    epochs: int = 90
    batch_size: int = 4096
    base_learning_rate: float = 0.1
    warmup_epochs: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0
    paths: dict = field(default_factory=dict)

    def propagation(self):
        from .propagation import PropagationConfig

        return PropagationConfig(
            alpha=self.alpha,
            k=self.k,
            cg_tolerance=self.cg_tolerance,
            cg_max_iterations=self.cg_max_iterations,
        )

    def probe(self):
        from .probe import ProbeHyper

        return ProbeHyper(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_learning_rate=self.base_learning_rate,
            warmup_epochs=self.warmup_epochs,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )


_OVERRIDABLE = (
    "seed", "rounds", "temperature", "alpha", "k", "cg_tolerance",
    "cg_max_iterations", "epochs", "batch_size", "base_learning_rate",
    "warmup_epochs", "momentum", "weight_decay",
)


def _resolve_config(args: argparse.Namespace, command: str, threads: int | None) -> RunConfig:
    config = RunConfig(command=command, threads=threads)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        loaded = json.loads(path.read_text(encoding="utf-8"))
        if int(loaded.get("version", 1)) != 1:
            raise UsageError(f"unsupported config version {loaded.get('version')}")
        for key in _OVERRIDABLE:
            if key in loaded and loaded[key] is not None:
                setattr(config, key, loaded[key])
    for key in _OVERRIDABLE:
        value = getattr(args, key, None)
        if value is not None:
            setattr(config, key, value)
    return config


def _write_run_config(config: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    text = json.dumps(asdict(config), indent=2, sort_keys=True) + "\n"
    (directory / "run_config.json").write_text(text, encoding="utf-8")


def _resolve(workdir: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else workdir / path


def _safe_name(image_id: str) -> str:
    return re.sub(r"[^-._a-zA-Z0-9]", "_", image_id)


def _json_float(value: float) -> float | None:
    import math

    return None if math.isnan(value) else float(value)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_build_graph(args: argparse.Namespace, workdir: Path, threads: int | None) -> int:
    from .bundle import load_bundle
    from .propagation import build_knn_graph, save_graph

    config = _resolve_config(args, "build-graph", threads)
    bundle_path = _resolve(workdir, args.bundle)
    out = _resolve(workdir, args.out)
    config.paths = {"bundle": args.bundle, "out": args.out}
    bundle = load_bundle(bundle_path)
    graph = build_knn_graph(bundle.embeddings.data, config.k)
    save_graph(graph, out)
    _write_run_config(config, out)
    print(f"graph over {graph.n} masks (k={graph.k}) written to {out}")
    return EXIT_OK


def cmd_bootstrap(args: argparse.Namespace, workdir: Path, threads: int | None) -> int:
    from .bundle import load_bundle
    from .glcc import bootstrap, bundle_embeddings_sha256, save_glcc_model
    from .propagation import load_graph

    config = _resolve_config(args, "bootstrap", threads)
    bundle_path = _resolve(workdir, args.bundle)
    out = _resolve(workdir, args.out)
    config.paths = {"bundle": args.bundle, "out": args.out}
    if args.graph:
        config.paths["graph"] = args.graph
    bundle = load_bundle(bundle_path)
    graph = load_graph(_resolve(workdir, args.graph)) if args.graph else None
    model, records = bootstrap(
        bundle,
        config=config.propagation(),
        probe_hyper=config.probe(),
        rounds=config.rounds,
        temperature=config.temperature,
        graph=graph,
        collect_stats=True,
    )
    save_glcc_model(
        model,
        out,
        bundle_ref=args.bundle,
        embeddings_sha256=bundle_embeddings_sha256(bundle_path),
    )
    rounds_payload = [
        {k: v for k, v in record.items() if k not in ("p_c", "p_r")} for record in records
    ]
    (out / "rounds.json").write_text(
        json.dumps(rounds_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_run_config(config, out)
    for record in rounds_payload:
        print(
            f"round {record['round']}: probe loss {record['probe_loss']:.6f}, "
            f"cg iterations {record['cg_iterations']}"
        )
    print(f"model written to {out}")
    return EXIT_OK


def _rasterize_predictions(bundle, labels, confidences):
    from .evaluation import rasterize

    by_image: dict[str, list] = {}
    for mask, label, confidence in zip(bundle.masks, labels, confidences):
        by_image.setdefault(mask.image_id, []).append((mask, int(label), float(confidence)))
    background = 0 if bundle.text.has_background else None
    return {
        image_id: rasterize(entries, background=background)
        for image_id, entries in by_image.items()
    }


def cmd_infer(args: argparse.Namespace, workdir: Path, threads: int | None) -> int:
    import numpy as np

    from .bundle import load_bundle
    from .evaluation import save_map
    from .glcc import classify_batch, load_glcc_model
    from .numerics import softmax

    config = _resolve_config(args, "infer", threads)
    bundle_path = _resolve(workdir, args.bundle)
    out = _resolve(workdir, args.out)
    config.paths = {"bundle": args.bundle, "out": args.out}
    bundle = load_bundle(bundle_path)

    zero_shot = args.zero_shot or args.model is None
    if zero_shot:
        mode = "zero-shot"
        weights = bundle.text.weights.astype(np.float64)
        scores = bundle.text.temperature * (bundle.embeddings.data.astype(np.float64) @ weights.T)
        labels = scores.argmax(axis=1)
        confidences = softmax(scores, axis=1).max(axis=1)
    else:
        mode = "glcc"
        config.paths["model"] = args.model
        model_path = _resolve(workdir, args.model)
        train_bundle_dir = _resolve(workdir, args.train_bundle) if args.train_bundle else None
        model = load_glcc_model(model_path, bundle_dir=train_bundle_dir, base_dir=workdir)
        scores, labels = classify_batch(model, bundle.embeddings.data)
        confidences = scores.max(axis=1)

    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": 1,
        "mode": mode,
        "masks": [
            {
                "index": i,
                "image_id": mask.image_id,
                "label": int(labels[i]),
                "class_name": bundle.text.class_names[int(labels[i])],
                "confidence": float(confidences[i]),
            }
            for i, mask in enumerate(bundle.masks)
        ],
    }
    (out / "labels.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    for image_id, seg in _rasterize_predictions(bundle, labels, confidences).items():
        save_map(seg, maps_dir / f"{_safe_name(image_id)}.seg")
    _write_run_config(config, out)
    print(f"classified {len(bundle.masks)} masks ({mode}) into {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, workdir: Path, threads: int | None) -> int:
    import numpy as np

    from .bundle import SupervisionType, load_bundle
    from .errors import ValidationError
    from .evaluation import confusion, load_map, mask_f1, rasterize
    from .evaluation import ConfusionMatrix

    config = _resolve_config(args, "eval", threads)
    pred_dir = _resolve(workdir, args.pred)
    gt_path = _resolve(workdir, args.gt_bundle)
    out_file = _resolve(workdir, args.out)
    config.paths = {"pred": args.pred, "gt_bundle": args.gt_bundle, "out": args.out}

    labels_file = pred_dir / "labels.json"
    if not labels_file.is_file():
        raise ValidationError(f"no labels.json under {pred_dir}")
    payload = json.loads(labels_file.read_text(encoding="utf-8"))
    pred_labels = [entry["label"] for entry in payload["masks"]]

    gt_bundle = load_bundle(gt_path)
    if gt_bundle.supervision.kind != SupervisionType.FULL:
        raise ValidationError("evaluation needs a fully supervised ground-truth bundle")
    n_classes = gt_bundle.text.k
    gt_soft = gt_bundle.supervision.labels
    gt_labels = gt_soft.argmax(axis=1)
    if len(pred_labels) != len(gt_bundle.masks):
        raise ValidationError(
            f"{len(pred_labels)} predictions for {len(gt_bundle.masks)} ground-truth masks"
        )

    per_class_f1, macro_f1 = mask_f1(pred_labels, gt_labels, n_classes)

    background = 0 if gt_bundle.text.has_background else None
    by_image: dict[str, list] = {}
    for i, mask in enumerate(gt_bundle.masks):
        label = int(gt_labels[i])
        by_image.setdefault(mask.image_id, []).append(
            (mask, label, float(gt_soft[i, label]))
        )
    total = ConfusionMatrix(
        counts=np.zeros((n_classes, n_classes), dtype=np.int64),
        missed=np.zeros(n_classes, dtype=np.int64),
    )
    for image_id, entries in by_image.items():
        gt_map = rasterize(entries, background=background)
        map_path = pred_dir / "maps" / f"{_safe_name(image_id)}.seg"
        if not map_path.is_file():
            raise ValidationError(f"missing prediction map {map_path}")
        pred_map = load_map(map_path)
        part = confusion(pred_map, gt_map, n_classes)
        total.counts += part.counts
        total.missed += part.missed

    tp = np.diag(total.counts).astype(np.float64)
    fp = total.counts.sum(axis=0) - tp
    fn = total.counts.sum(axis=1) - tp + total.missed
    denom = tp + fp + fn
    per_class_iou = np.full(n_classes, np.nan)
    per_class_iou[denom > 0] = tp[denom > 0] / denom[denom > 0]

    metrics = {
        "miou": _json_float(float(np.nanmean(per_class_iou))),
        "per_class_iou": [_json_float(v) for v in per_class_iou],
        "macro_f1": _json_float(macro_f1),
        "per_class_f1": [_json_float(v) for v in per_class_f1],
        "n_images": len(by_image),
        "n_masks": len(gt_bundle.masks),
        "pixels_evaluated": int(total.counts.sum() + total.missed.sum()),
    }
    out_file.parent.mkdir(parents=True, exist_ok=True)
    out_file.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.csv:
        import csv as csv_module

        csv_path = _resolve(workdir, args.csv)
        with open(csv_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv_module.writer(handle)
            writer.writerow(["class", "iou", "f1"])
            for name, iou, f1 in zip(
                gt_bundle.text.class_names, per_class_iou, per_class_f1
            ):
                writer.writerow([name, _json_float(iou), _json_float(f1)])
    _write_run_config(config, out_file.parent)
    print(f"mIoU {metrics['miou']:.4f}, macro F1 {metrics['macro_f1']:.4f} -> {out_file}")
    return EXIT_OK


def cmd_kernel_selftest(args: argparse.Namespace, workdir: Path, threads: int | None) -> int:
    from .kernel import selftest

    results = selftest(n_grids=args.grids, seed=args.seed)
    failed = False
    for result in results:
        status = "PASS" if result["passed"] else "FAIL"
        print(f"{result['name']}: {status} ({result['detail']})")
        failed = failed or not result["passed"]
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_oracle(args: argparse.Namespace, workdir: Path, threads: int | None) -> int:
    from .synthetic import inductive_agreement

    agreement = inductive_agreement(
        n=args.n,
        d=args.d,
        n_clusters=args.clusters,
        k=args.k if args.k is not None else 10,
        alpha=args.alpha if args.alpha is not None else 0.9,
        n_queries=args.queries,
        seed=args.seed,
        spread=args.spread,
    )
    print(f"exact-vs-approximate top-1 agreement: {agreement:.4f}")
    if args.expect is not None and abs(agreement - args.expect) > args.expect_tolerance:
        print(f"regression: expected {args.expect:.4f} +/- {args.expect_tolerance}")
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="maskprop", description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default=".", help="base directory for relative paths")
    parser.add_argument("--threads", type=int, default=None, help="cap worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("build-graph", help="build and persist the affinity graph")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("bootstrap", help="construct the classifier from a bundle")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--graph", default=None, help="reuse a persisted graph")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--cg-tolerance", dest="cg_tolerance", type=float, default=None)
    p.add_argument("--cg-max-iterations", dest="cg_max_iterations", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--base-lr", dest="base_learning_rate", type=float, default=None)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("infer", help="classify a bundle's masks")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None, help="GLCC model directory")
    p.add_argument("--train-bundle", dest="train_bundle", default=None,
                   help="override the model's recorded training bundle")
    p.add_argument("--zero-shot", dest="zero_shot", action="store_true",
                   help="use the text classifier directly")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a ground-truth bundle")
    common(p)
    p.add_argument("--pred", required=True, help="directory written by infer")
    p.add_argument("--gt-bundle", dest="gt_bundle", required=True)
    p.add_argument("--out", required=True, help="metrics JSON file")
    p.add_argument("--csv", default=None, help="also write a per-class CSV table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kernel-selftest", help="run the pooling equivalence checks")
    p.add_argument("--grids", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_kernel_selftest)

    p = sub.add_parser("oracle", help="exact-vs-approximate inductive regression")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--spread", type=float, default=0.25)
    p.add_argument("--expect", type=float, default=None)
    p.add_argument("--expect-tolerance", dest="expect_tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_oracle)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        threads = _apply_thread_cap(argv)
        parser = _build_parser()
        args = parser.parse_args(argv)
        workdir = Path(args.workdir)
        return args.func(args, workdir, threads)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # mapped to documented exit codes below
        from .errors import NumericalError, ValidationError

        if isinstance(exc, NumericalError):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, (ValidationError, FileNotFoundError, json.JSONDecodeError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
