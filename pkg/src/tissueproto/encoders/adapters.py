from __future__ import annotations

import torch
from torch import nn

from ..data import resize_bilinear
from .base import FeaturePyramid

# hidden width reproducing the ~6.3M trainable adapter parameters at C_s = 768
REAL_ADAPTER_HIDDEN = 1024


class Adapter(nn.Module):
    """1x1 -> 3x3 depthwise -> 1x1 bottleneck with BN + GELU and an identity skip.

    The last 1x1 starts at zero, so a fresh adapter passes features through unchanged.
    """

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.bn1 = nn.BatchNorm2d(hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.bn2 = nn.BatchNorm2d(hidden)
        self.expand = nn.Conv2d(hidden, channels, 1)
        self.act = nn.GELU()
        nn.init.zeros_(self.expand.weight)
        nn.init.zeros_(self.expand.bias)

    def forward(self, x):
        h = self.act(self.bn1(self.reduce(x)))
        h = self.act(self.bn2(self.dw(h)))
        return x + self.expand(h)


class AdapterStack(nn.Module):
    def __init__(self, channels: int, hidden: int | None = None, levels: int = 4):
        super().__init__()
        hidden = hidden or max(channels // 2, 1)
        self.channels = channels
        self.hidden = hidden
        self.blocks = nn.ModuleList(Adapter(channels, hidden) for _ in range(levels))

    def forward(self, pyramid: FeaturePyramid, grids: list[tuple[int, int]]) -> FeaturePyramid:
        """Resize each student level to its guidance grid, then adapt it."""
        if pyramid.role != "student":
            raise ValueError(f"adapters take a student pyramid, got {pyramid.role!r}")
        out = []
        for block, level, grid in zip(self.blocks, pyramid.levels, grids):
            level = level.to(block.reduce.weight.dtype)
            out.append(block(resize_bilinear(level, grid)))
        return FeaturePyramid(out, "refined")

    @staticmethod
    def expected_parameter_count(channels: int, hidden: int, levels: int = 4) -> int:
        per = (channels * hidden + hidden) + 2 * hidden + (9 * hidden + hidden) + 2 * hidden \
            + (hidden * channels + channels)
        return levels * per


def count_parameters(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def adapt(adapters: AdapterStack, pyramid: FeaturePyramid, grids) -> FeaturePyramid:
    return adapters(pyramid, grids)


def trainable_parameter_report(model: nn.Module) -> dict:
    """Per-child trainable / total parameter counts and the trainable fraction."""
    per_module = {}
    for name, child in model.named_children():
        per_module[name] = {"trainable": count_parameters(child, True),
                            "total": count_parameters(child, False)}
    loose = [p for n, p in model.named_parameters(recurse=False)]
    if loose:
        per_module["<root>"] = {"trainable": sum(p.numel() for p in loose if p.requires_grad),
                                "total": sum(p.numel() for p in loose)}
    trainable = sum(v["trainable"] for v in per_module.values())
    total = sum(v["total"] for v in per_module.values())
    return {"modules": per_module, "trainable": trainable, "total": total,
            "fraction": trainable / total if total else 0.0}

