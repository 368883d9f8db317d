"""Toy end-to-end benchmark: synthetic blobs, two training runs (with / without distillation)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from ..data import load_manifest
from ..metrics import MetricReport
from ..synthetic import generate_dataset, majority_class_prediction
from .config import Config
from .evaluate import EvalSettings, evaluate, evaluate_models
from .train import train

DISTILL_ROW = "distilled"
NO_DISTILL_ROW = "no distillation"
BASELINE_ROW = "majority-class oracle"


@dataclass
class BenchmarkResult:
    reports: dict[str, MetricReport]
    histories: dict[str, list]
    seconds: dict[str, float] = field(default_factory=dict)

    @property
    def miou(self) -> float:
        return self.reports[DISTILL_ROW].miou

    @property
    def baseline_miou(self) -> float:
        return self.reports[BASELINE_ROW].miou

    @property
    def distill_gap(self) -> float:
        """mIoU with distillation minus mIoU without it."""
        return self.reports[DISTILL_ROW].miou - self.reports[NO_DISTILL_ROW].miou


def run_toy_benchmark(workdir: Path | str, n_images: int = 64, seed: int = 0,
                      cfg: Optional[Config] = None,
                      log: Optional[Callable[[str], None]] = None) -> BenchmarkResult:
    log = log or (lambda msg: None)
    cfg = cfg or Config()
    workdir = Path(workdir)
    seconds = {}
    t0 = time.perf_counter()
    manifest = load_manifest(generate_dataset(workdir / "data", n_images, seed=seed))
    seconds["data"] = time.perf_counter() - t0

    models, histories = {}, {}
    variants = {DISTILL_ROW: cfg, NO_DISTILL_ROW: cfg.with_overrides(distill__weight=0.0)}
    for name, variant in variants.items():
        t0 = time.perf_counter()
        run = train(variant, manifest, workdir / ("distill" if name == DISTILL_ROW else "no_distill"))
        models[name], histories[name] = run.model, run.history
        seconds[f"train {name}"] = time.perf_counter() - t0
        log(f"trained {name}: {run.step} steps, {seconds[f'train {name}']:.1f}s")

    settings = EvalSettings(tta=cfg.tta_config(), post=cfg.post_config(), crf=cfg.crf_params(),
                            image_size=cfg.train.image_size)
    t0 = time.perf_counter()
    reports = evaluate_models(models, manifest, settings)
    reports.update(evaluate({BASELINE_ROW: lambda rec, image, gt: majority_class_prediction(gt)},
                            manifest, settings))
    seconds["evaluate"] = time.perf_counter() - t0
    log(f"evaluated {len(manifest)} images in {seconds['evaluate']:.1f}s")
    return BenchmarkResult(reports, histories, seconds)
