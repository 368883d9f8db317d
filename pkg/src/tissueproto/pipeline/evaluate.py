"""Dense evaluation of one or more models over a manifest with ground-truth masks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np
import torch

from ..data import Manifest, Record, image_to_tensor, load_image, load_mask
from ..metrics import ConfusionMatrix, MetricReport, compute_report
from ..postprocess import (CrfParams, PostprocessConfig, TtaConfig, appearance_filter, predict_mask,
                           refined_maps)

logger = logging.getLogger(__name__)

# (record, image 3xHxW in [0,1], ground truth HxW) -> predicted HxW mask
Predictor = Callable[[Record, torch.Tensor, np.ndarray], np.ndarray]


@dataclass
class EvalSettings:
    tta: TtaConfig = TtaConfig()
    post: PostprocessConfig = PostprocessConfig()
    crf: CrfParams = CrfParams()
    image_size: int = 224
    use_manifest_labels: bool = True


def model_predictor(model, settings: EvalSettings, shared: Optional[dict] = None) -> Predictor:
    """predict_mask for one model; ``shared`` carries per-image CRF state between models."""

    def predict(rec: Record, image: torch.Tensor, gt: np.ndarray) -> np.ndarray:
        labels = torch.tensor(rec.labels, dtype=torch.float32) if settings.use_manifest_labels \
            else model.predict_labels(image)
        maps = refined_maps(model.cam_fn, image, labels, settings.tta)
        appearance = None
        if shared is not None and settings.post.crf_enabled and settings.crf.w2:
            if shared.get("image") is not image:
                rgb = image.permute(1, 2, 0).double().numpy() * 255.0
                shared.update(image=image, appearance=appearance_filter(rgb, settings.crf))
            appearance = shared["appearance"]
        return predict_mask(model.cam_fn, image, labels, settings.tta, settings.post, settings.crf,
                            maps=maps, appearance=appearance)

    return predict


def evaluate(predictors: Mapping[str, Predictor], manifest: Manifest,
             settings: EvalSettings = EvalSettings(),
             progress: Optional[Callable[[int, int], None]] = None) -> dict[str, MetricReport]:
    """Accumulate one confusion matrix per predictor over every record with a mask.

    Records without a mask are skipped with a warning and counted in each report.
    """
    if len(manifest) == 0:
        raise ValueError("cannot evaluate an empty manifest")
    confs = {name: ConfusionMatrix() for name in predictors}
    skipped = 0
    for i, rec in enumerate(manifest):
        mask_path = manifest.mask_path(rec)
        if mask_path is None or not mask_path.exists():
            logger.warning("record %s has no ground-truth mask; skipped", rec.image)
            skipped += 1
            continue
        image = image_to_tensor(load_image(manifest.image_path(rec), settings.image_size))
        gt = load_mask(mask_path, settings.image_size)
        with torch.no_grad():
            for name, predict in predictors.items():
                confs[name].accumulate(predict(rec, image, gt), gt)
        if progress is not None:
            progress(i + 1, len(manifest))
    if skipped == len(manifest):
        raise ValueError("no record in the manifest has a ground-truth mask")
    return {name: compute_report(conf, skipped=skipped) for name, conf in confs.items()}


def evaluate_models(models: Mapping[str, object], manifest: Manifest,
                    settings: EvalSettings = EvalSettings(), progress=None) -> dict[str, MetricReport]:
    """Evaluate several checkpoints image by image, sharing the CRF appearance kernel."""
    shared: dict = {}
    preds = {name: model_predictor(m, settings, shared) for name, m in models.items()}
    return evaluate(preds, manifest, settings, progress)


def oracle_predictor(rec: Record, image: torch.Tensor, gt: np.ndarray) -> np.ndarray:
    return gt.copy()
