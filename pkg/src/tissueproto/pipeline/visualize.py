"""Per-image figures: class heatmaps, refined-mask overlay, per-stage mean activation maps."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from ..data import BACKGROUND, CLASS_NAMES, image_to_tensor, load_image, resize_bilinear
from ..postprocess import predict_mask, refined_maps

CLASS_COLOURS = np.array([(220, 40, 40), (40, 170, 60), (50, 80, 220), (240, 200, 30)], dtype=np.float64)
OVERLAY_ALPHA = 0.45
_JET = (colormaps["jet"](np.linspace(0.0, 1.0, 256))[:, :3] * 255).round().astype(np.uint8)


def heatmap(values: np.ndarray) -> np.ndarray:
    """H x W values in [0, 1] -> H x W x 3 uint8 through a fixed 256-entry colour table."""
    idx = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.int64)
    return _JET[idx]


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Tint foreground classes over an H x W x 3 uint8 image; background pixels are untouched."""
    out = image.astype(np.float64).copy()
    for c in range(len(CLASS_NAMES)):
        sel = mask == c
        out[sel] = (1 - alpha) * out[sel] + alpha * CLASS_COLOURS[c]
    out[mask == BACKGROUND] = image[mask == BACKGROUND]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def stage_maps(model, image: torch.Tensor) -> list[np.ndarray]:
    """Channel-mean activation of each refined level, min-max scaled and resized to the image."""
    with torch.no_grad():
        refined = model.refine(image.unsqueeze(0))
    out = []
    for level in refined.levels:
        m = level[0].mean(0)
        lo, hi = m.min(), m.max()
        m = (m - lo) / (hi - lo) if hi > lo else torch.zeros_like(m)
        out.append(resize_bilinear(m, tuple(image.shape[-2:])).clamp(0, 1).double().numpy())
    return out


def _save(arr: np.ndarray, path: Path) -> Path:
    Image.fromarray(arr).save(path, format="PNG")
    return path


def visualize(model, image_paths: Iterable[Path | str], out_dir: Path | str,
              labels: Optional[dict] = None, tta=None, post=None, crf=None) -> list[Path]:
    """Write, per image: one heatmap per class, one overlay, four stage maps. Returns the paths.

    ``labels`` maps an image path (as given, or resolved) to its image-level label vector;
    images without an entry use the model's predicted labels.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    tta = tta or cfg.tta_config()
    post = post or cfg.post_config()
    crf = crf or cfg.crf_params()
    written = []
    for path in image_paths:
        path = Path(path)
        arr = load_image(path, cfg.train.image_size)
        image = image_to_tensor(arr)
        y = (labels.get(str(path)) or labels.get(str(path.resolve()))) if labels else None
        y = torch.tensor(y, dtype=torch.float32) if y is not None else model.predict_labels(image)
        all_classes = torch.ones(len(CLASS_NAMES))
        maps = refined_maps(model.cam_fn, image, all_classes, tta)
        for c, name in enumerate(CLASS_NAMES):
            written.append(_save(heatmap(maps[c]), out_dir / f"{path.stem}_cam_{name}.png"))
        mask = predict_mask(model.cam_fn, image, y, tta, post, crf)
        rgb = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
        written.append(_save(overlay(rgb, mask), out_dir / f"{path.stem}_overlay.png"))
        for k, m in enumerate(stage_maps(model, image), start=1):
            written.append(_save(heatmap(m), out_dir / f"{path.stem}_stage{k}.png"))
    return written
