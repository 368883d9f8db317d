"""Training-time mask refinement: adaptive thresholds, region embeddings, contrastive losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import torch

from .data import l2_normalize_rows

DEFAULT_ALPHA = 0.5
DEFAULT_TEMPERATURE = 0.07
DEFAULT_BANK_CAPACITY = 2048


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class ThresholdConfig:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


@dataclass
class LossWeights:
    cls: float = 1.0
    struct: float = 1.5
    sim: float = 0.2

    def __post_init__(self):
        if min(self.cls, self.struct, self.sim) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class MaskPair:
    fg: torch.Tensor
    bg: torch.Tensor
    cls: int


@dataclass
class Region:
    embedding: torch.Tensor
    kind: str          # "fg" or "bg"
    cls: int


def adaptive_threshold(cam: torch.Tensor, cfg: ThresholdConfig = ThresholdConfig(), cls: int = -1) -> MaskPair:
    """fg = cam >= alpha * max(cam); an all-zero map yields an empty foreground."""
    peak = cam.max()
    if peak <= 0:
        fg = torch.zeros_like(cam, dtype=torch.bool)
    else:
        fg = cam >= cfg.alpha * peak
    return MaskPair(fg=fg, bg=~fg, cls=cls)


def region_embed(backend, image: torch.Tensor, mask: torch.Tensor) -> Optional[torch.Tensor]:
    """Encode the image with out-of-mask pixels zeroed; None for an empty mask."""
    if not bool(mask.any()):
        return None
    masked = image * mask.to(image.dtype)
    return backend.embed_images(masked)[0]


def region_embed_batch(backend, images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Batched variant: images B x 3 x H x W, masks B x H x W (all non-empty)."""
    return backend.embed_images(images * masks.unsqueeze(1).to(images.dtype))


def infonce(query: torch.Tensor, positive: torch.Tensor, negatives: Optional[torch.Tensor],
            temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """-log softmax of the positive logit against the negatives; 0 when there are no negatives."""
    if negatives is None or negatives.numel() == 0:
        return query.new_zeros(())
    pos = (query * positive).sum(-1, keepdim=True) / temperature
    neg = negatives @ query / temperature
    logits = torch.cat([pos, neg])
    return torch.logsumexp(logits, 0) - pos[0]


class MemoryBank:
    """Fixed-capacity FIFO ring buffer of unit-norm embeddings."""

    def __init__(self, dim: int, capacity: int = DEFAULT_BANK_CAPACITY, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.cursor = 0
        self.count = 0
        self.pushed = 0

    def __len__(self):
        return self.count

    def push(self, vectors: torch.Tensor) -> None:
        vectors = l2_normalize_rows(vectors.detach().reshape(-1, self.buffer.shape[1]).to(self.buffer.dtype))
        for v in vectors:
            self.buffer[self.cursor] = v
            self.cursor = (self.cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)
            self.pushed += 1

    def contents(self) -> torch.Tensor:
        """Stored vectors, oldest first."""
        if self.count < self.capacity:
            return self.buffer[: self.count]
        return torch.cat([self.buffer[self.cursor:], self.buffer[: self.cursor]])

    def state_dict(self) -> dict:
        return {"buffer": self.buffer.clone(), "cursor": self.cursor, "count": self.count,
                "pushed": self.pushed}

    def load_state_dict(self, state: dict) -> None:
        self.buffer = state["buffer"].clone().to(self.buffer.dtype)
        self.capacity = self.buffer.shape[0]
        self.cursor, self.count, self.pushed = int(state["cursor"]), int(state["count"]), int(state["pushed"])


def sim_loss(regions: Iterable[Region], prototypes: torch.Tensor, background: torch.Tensor,
             bank: Optional[MemoryBank], temperature: float = DEFAULT_TEMPERATURE,
             enqueue: bool = True) -> torch.Tensor:
    """l_fg + l_bg, each averaged over its regions.

    FG regions: positive = own prototype; negatives = other prototypes + memory bank.
    BG regions: positive = background prototype; negatives = all foreground prototypes.
    BG embeddings are pushed to the bank after the loss is formed.
    """
    regions = list(regions)
    zero = prototypes.new_zeros(())
    if not regions:
        return zero
    mem = bank.contents().to(prototypes.dtype) if bank is not None and len(bank) else None
    n_classes = prototypes.shape[0]
    fg_terms, bg_terms = [], []
    for r in regions:
        q = r.embedding.to(prototypes.dtype)
        if r.kind == "fg":
            others = prototypes[[c for c in range(n_classes) if c != r.cls]]
            negs = others if mem is None else torch.cat([others, mem])
            fg_terms.append(infonce(q, prototypes[r.cls], negs, temperature))
        elif r.kind == "bg":
            bg_terms.append(infonce(q, background, prototypes, temperature))
        else:
            raise ValueError(f"unknown region kind {r.kind!r}")
    l_fg = torch.stack(fg_terms).mean() if fg_terms else zero
    l_bg = torch.stack(bg_terms).mean() if bg_terms else zero
    if enqueue and bank is not None:
        bg = [r.embedding for r in regions if r.kind == "bg"]
        if bg:
            bank.push(torch.stack(bg))
    return l_fg + l_bg


def total_loss(l_cls, l_struct, l_sim, w: LossWeights = LossWeights()):
    parts = {"cls": l_cls, "struct": l_struct, "sim": l_sim}
    for name, v in parts.items():
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise NonFiniteLoss(f"non-finite {name} loss: {value}")
    return w.cls * l_cls + w.struct * l_struct + w.sim * l_sim
