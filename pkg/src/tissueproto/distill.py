"""Relational structural distillation: token affinity matrices and their MSE alignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .data import is_normalized, l2_normalize_rows, reshape_to_tokens, resize_bilinear
from .encoders.base import FeaturePyramid


class ContractError(ValueError):
    pass


@dataclass
class DistillConfig:
    layers: tuple[int, ...] = (2,)
    weight: float = 1.5

    def __post_init__(self):
        self.layers = tuple(int(k) for k in self.layers)
        if any(k not in (1, 2, 3, 4) for k in self.layers):
            raise ValueError(f"guidance layers must be within 1..4, got {self.layers}")
        if len(set(self.layers)) != len(self.layers):
            raise ValueError("guidance layers must be distinct")
        if self.weight < 0:
            raise ValueError("distillation weight must be >= 0")

    @property
    def enabled(self) -> bool:
        return bool(self.layers) and self.weight > 0


def affinity(tokens: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Token-to-token cosine similarity, (..., N, D) -> (..., N, N).

    Rows must already be unit norm.
    """
    if check and not is_normalized(tokens.detach()):
        raise ContractError("affinity expects l2-normalised token rows")
    return tokens @ tokens.transpose(-1, -2)


def level_affinity(feature: torch.Tensor, grid: tuple[int, int] | None = None) -> torch.Tensor:
    if grid is not None:
        feature = resize_bilinear(feature, grid)
    return affinity(l2_normalize_rows(reshape_to_tokens(feature)), check=False)


def struct_loss(refined: FeaturePyramid, teacher: FeaturePyramid, cfg: DistillConfig) -> torch.Tensor:
    """Mean over guidance layers of the MSE between student and teacher affinities."""
    dtype = refined.levels[0].dtype
    if not cfg.layers:
        return refined.levels[0].new_zeros(())
    losses = []
    for k in cfg.layers:
        stu = refined[k]
        tea = teacher[k].detach().to(dtype)
        a_stu = level_affinity(stu)
        a_tea = level_affinity(tea, grid=tuple(stu.shape[-2:]))
        if a_stu.shape != a_tea.shape:
            raise ValueError(f"level {k}: affinity shapes differ {tuple(a_stu.shape)} vs {tuple(a_tea.shape)}")
        losses.append(((a_stu - a_tea) ** 2).mean())
    return torch.stack(losses).mean()
