"""Test-time augmentation over CAMs: horizontal flip x brightness scaling."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Callable

import torch


@dataclass(frozen=True)
class TtaConfig:
    flips: tuple[bool, ...] = (False, True)
    scales: tuple[float, ...] = (0.9, 1.0, 1.1)
    enabled: bool = True

    def __post_init__(self):
        if not self.flips or not self.scales:
            raise ValueError("TTA needs at least one flip state and one brightness scale")
        if any(s <= 0 for s in self.scales):
            raise ValueError("brightness scales must be > 0")

    def augmentations(self) -> list[tuple[bool, float]]:
        if not self.enabled:
            return [(False, 1.0)]
        return list(product(self.flips, self.scales))


IDENTITY = TtaConfig(flips=(False,), scales=(1.0,))


def augment(image: torch.Tensor, flip: bool, scale: float) -> torch.Tensor:
    out = image if scale == 1.0 else (image * scale).clamp(0.0, 1.0)
    return out.flip(-1) if flip else out


def tta_cams(cam_fn: Callable[[torch.Tensor], torch.Tensor], image: torch.Tensor,
             cfg: TtaConfig = TtaConfig()) -> torch.Tensor:
    """Mean of the raw CAMs over all augmentations, each mapped back to the input frame.

    cam_fn maps a ... x 3 x H x W image to ... x C x h x w maps.
    """
    total = None
    augs = cfg.augmentations()
    for flip, scale in augs:
        cams = cam_fn(augment(image, flip, scale))
        if flip:
            cams = cams.flip(-1)
        total = cams if total is None else total + cams
    return total / len(augs)
