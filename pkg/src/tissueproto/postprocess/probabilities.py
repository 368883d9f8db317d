"""From normalised CAMs to a (C+1)-way label distribution and a final mask."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from ..data import resize_bilinear
from ..protocam import normalize_cams
from .crf import CrfParams, dense_crf
from .tta import TtaConfig, tta_cams


@dataclass
class PostprocessConfig:
    bg_exponent: float = 10.0
    crf_enabled: bool = True

    def __post_init__(self):
        if self.bg_exponent <= 0:
            raise ValueError("background exponent must be > 0")


def background_probability(cams: np.ndarray, exponent: float = 10.0) -> np.ndarray:
    """(1 - max_c M_c) ** exponent for C x H x W maps in [0, 1]."""
    return (1.0 - cams.max(axis=0)) ** exponent


def assemble_probabilities(cams: np.ndarray, cfg: PostprocessConfig = PostprocessConfig()) -> np.ndarray:
    """C x H x W normalised maps -> (C+1) x H x W distribution, background last."""
    cams = np.clip(np.asarray(cams, dtype=np.float64), 0.0, 1.0)
    bg = background_probability(cams, cfg.bg_exponent)
    prob = np.concatenate([cams, bg[None]], axis=0)
    return prob / prob.sum(axis=0, keepdims=True)


def refined_maps(cam_fn: Callable[[torch.Tensor], torch.Tensor], image: torch.Tensor,
                 labels: torch.Tensor, tta: TtaConfig = TtaConfig()) -> np.ndarray:
    """TTA-averaged CAMs, label-masked min-max normalised, then bilinearly upsampled to the image."""
    with torch.no_grad():
        cams = tta_cams(cam_fn, image, tta)
        norm = normalize_cams(cams, labels.to(cams.dtype))
        up = resize_bilinear(norm.unsqueeze(0) if norm.dim() == 3 else norm, tuple(image.shape[-2:]))
    return up.reshape(up.shape[-3:]).double().numpy()


def predict_mask(cam_fn: Callable[[torch.Tensor], torch.Tensor], image: torch.Tensor,
                 labels: torch.Tensor, tta: TtaConfig = TtaConfig(),
                 post: PostprocessConfig = PostprocessConfig(), crf: CrfParams = CrfParams(),
                 maps: Optional[np.ndarray] = None, appearance=None) -> np.ndarray:
    """3 x H x W image in [0, 1] -> H x W mask (class index, background = C).

    ``maps`` skips the CAM stage with precomputed normalised maps; ``appearance`` reuses a
    CRF appearance filter built for this image.
    """
    if maps is None:
        maps = refined_maps(cam_fn, image, labels, tta)
    prob = assemble_probabilities(maps, post)
    if not post.crf_enabled:
        return np.argmax(prob, axis=0)
    rgb = image.detach().permute(1, 2, 0).double().numpy() * 255.0
    return dense_crf(prob, rgb, crf, appearance=appearance)
