"""Command-line entry point: synth, import-bcss, train, eval, infer, visualize, bench."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .data import import_bcss_directory, image_to_tensor, load_image, load_manifest, save_mask, write_manifest
from .encoders import available_backends
from .metrics import format_table, reports_to_json

logger = logging.getLogger("tissueproto")


def _settings(args, model):
    from .pipeline import EvalSettings
    cfg = model.cfg
    post = cfg.post_config()
    post.crf_enabled = post.crf_enabled and not args.no_crf
    tta = cfg.tta_config()
    if args.no_tta:
        from .postprocess import IDENTITY
        tta = IDENTITY
    return EvalSettings(tta=tta, post=post, crf=cfg.crf_params(), image_size=cfg.train.image_size)


def write_report(rows, report: Path) -> list[Path]:
    """JSON at ``report``, aligned table beside it (.txt), bar figure (.png)."""
    from .plotting import report_figure
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(reports_to_json(rows))
    table = report.with_suffix(".txt")
    table.write_text(format_table(rows))
    figure = report_figure(rows, report.with_suffix(".png"))
    return [report, table, figure]


def cmd_synth(args):
    from .synthetic import generate_dataset
    path = generate_dataset(args.out, args.n, seed=args.seed, max_classes=args.max_classes)
    print(path)


def cmd_import_bcss(args):
    manifest = import_bcss_directory(args.images, args.masks, root=args.root or Path(args.out).resolve().parent)
    write_manifest(manifest, args.out)
    print(f"{len(manifest)} records -> {args.out}")


def cmd_train(args):
    from .pipeline import TrainingAborted, build_model, load_config, train
    from .plotting import loss_figure
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["train__seed"] = args.seed
    if args.backend is not None:
        overrides["train__backend"] = args.backend
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    torch.manual_seed(cfg.train.seed)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    model = build_model(cfg, strict=args.strict_backend)
    try:
        result = train(cfg, manifest, out, model=model)
    except TrainingAborted as e:
        print(f"training aborted: {e}; last good checkpoint: {e.checkpoint}", file=sys.stderr)
        return 2
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "step", "total", "cls", "struct", "sim", "regions"])
        writer.writeheader()
        writer.writerows(result.history)
    loss_figure(result.history, out / "losses.png")
    print(result.checkpoint)
    return 0


def cmd_eval(args):
    from .pipeline import evaluate_models, load_checkpoint
    if args.names and len(args.names) != len(args.ckpt):
        raise SystemExit("--names needs one label per --ckpt")
    names = args.names or ([Path(c).stem for c in args.ckpt] if len(args.ckpt) > 1 else ["model"])
    models = {name: load_checkpoint(c)[0] for name, c in zip(names, args.ckpt)}
    settings = _settings(args, next(iter(models.values())))
    settings.use_manifest_labels = not args.predict_labels
    reports = evaluate_models(models, load_manifest(args.manifest), settings)
    rows = list(reports.items())
    for path in write_report(rows, Path(args.report)):
        logger.info("wrote %s", path)
    print(format_table(rows), end="")
    return 0


def cmd_infer(args):
    from .pipeline import load_checkpoint
    from .pipeline.visualize import overlay
    from .postprocess import predict_mask
    from PIL import Image
    model, _ = load_checkpoint(args.ckpt)
    settings = _settings(args, model)
    arr = load_image(args.image, model.cfg.train.image_size)
    image = image_to_tensor(arr)
    labels = model.predict_labels(image)
    mask = predict_mask(model.cam_fn, image, labels, settings.tta, settings.post, settings.crf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    save_mask(mask, out / f"{stem}_mask.png")
    rgb = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    Image.fromarray(overlay(rgb, mask)).save(out / f"{stem}_overlay.png")
    (out / f"{stem}_labels.json").write_text(json.dumps({"labels": labels.int().tolist()}))
    print(out / f"{stem}_mask.png")
    return 0


def cmd_visualize(args):
    from .pipeline import load_checkpoint
    from .pipeline.visualize import visualize
    model, _ = load_checkpoint(args.ckpt)
    labels = None
    if args.manifest:
        manifest = load_manifest(args.manifest, check_paths=False)
        labels = {str(manifest.image_path(r).resolve()): r.labels for r in manifest}
    for path in visualize(model, args.images, args.out, labels=labels):
        print(path)
    return 0


def cmd_bench(args):
    from .metrics import format_table
    from .pipeline.benchmark import DISTILL_ROW, run_toy_benchmark
    from .plotting import loss_figure
    result = run_toy_benchmark(args.out, n_images=args.n, seed=args.seed, log=logger.info)
    rows = list(result.reports.items())
    write_report(rows, Path(args.out) / "report.json")
    for name, hist in result.histories.items():
        loss_figure(hist, Path(args.out) / f"losses_{'distill' if name == DISTILL_ROW else 'no_distill'}.png")
    print(format_table(rows), end="")
    print(f"distillation gap (mIoU): {100 * result.distill_gap:+.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tissueproto", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic textured-blob dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-classes", type=int, default=2)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("import-bcss", help="build a manifest from label-in-filename patches")
    s.add_argument("--images", required=True)
    s.add_argument("--masks")
    s.add_argument("--root", help="directory the manifest paths are relative to (default: the manifest's)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import_bcss)

    s = sub.add_parser("train", help="train adapters and prototypes")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--backend", choices=sorted(available_backends()))
    s.add_argument("--strict-backend", action="store_true", help="fail instead of falling back to toy")
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "score checkpoints against dense masks"),
                              ("infer", cmd_infer, "predict a mask for one image")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--no-crf", action="store_true")
        s.add_argument("--no-tta", action="store_true")
        s.set_defaults(func=func)
        if name == "eval":
            s.add_argument("--ckpt", required=True, nargs="+", help="one checkpoint, or two for an ablation table")
            s.add_argument("--names", nargs="+")
            s.add_argument("--manifest", required=True)
            s.add_argument("--report", required=True)
            s.add_argument("--predict-labels", action="store_true",
                           help="use predicted instead of manifest image-level labels")
        else:
            s.add_argument("--ckpt", required=True)
            s.add_argument("--image", required=True)
            s.add_argument("--out", required=True)

    s = sub.add_parser("visualize", help="write CAM heatmaps, overlays and stage maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--images", required=True, nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--manifest", help="take image-level labels from this manifest instead of predicting them")
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("bench", help="toy end-to-end benchmark (with vs without distillation)")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import CheckpointError, ConfigError
    from .data import ManifestError
    try:
        return args.func(args) or 0
    except (ConfigError, ManifestError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
