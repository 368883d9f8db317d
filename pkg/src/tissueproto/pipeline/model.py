"""The trainable model: frozen backend + adapters + prototype bank + CAM head + memory bank."""

from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import nn

from ..encoders import AdapterStack, EncoderBackend, FeaturePyramid, get_backend
from ..protocam import CamHead, PrototypeBank, class_logits, generate_cams, init_prototypes, load_prompts
from ..refine import MemoryBank
from .config import Config

# the frozen backend is fixed across runs; the run seed only drives trainable init and data order
BACKEND_SEED = 0


class ProtoSegModel(nn.Module):
    def __init__(self, backend: EncoderBackend, cfg: Config, prompts: Optional[Sequence[str]] = None):
        super().__init__()
        self.cfg = cfg
        self.backend = backend
        self.prompts = list(prompts) if prompts is not None else load_prompts(cfg.proto.prompts)
        seed = cfg.train.seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.adapters = AdapterStack(backend.student_dim, backend.adapter_hidden)
        self.bank = init_prototypes(backend, self.prompts, backend.student_dim,
                                    n_ratio=cfg.proto.n_ratio, seed=seed)
        self.head = CamHead(cfg.proto.logit_scale_init)
        self.memory = MemoryBank(backend.text_dim, cfg.refine.bank_capacity)

    def trainable_parameters(self) -> list[nn.Parameter]:
        """Adapters, prototype projection, adaptive layer, logit scale, background prototype."""
        params = [p for m in (self.adapters, self.bank, self.head) for p in m.parameters()]
        return [p for p in params if p.requires_grad]

    def train(self, mode: bool = True):
        super().train(mode)
        self.backend.train(False)
        return self

    def refine(self, images: torch.Tensor) -> FeaturePyramid:
        images = images if images.dim() == 4 else images.unsqueeze(0)
        student = self.backend.student_pyramid(images)
        grids = self.backend.guidance_grids(*images.shape[-2:])
        return self.adapters(student, grids)

    def cams(self, images: torch.Tensor, refined: Optional[FeaturePyramid] = None) -> torch.Tensor:
        """Raw cosine CAMs (scaled by tau) on the level-4 grid, B x C x h x w."""
        refined = refined if refined is not None else self.refine(images)
        return generate_cams(self.bank, refined[4], self.head)

    def cam_fn(self, image: torch.Tensor) -> torch.Tensor:
        """Single 3 x H x W image -> C x h x w raw CAMs (inference helper for TTA)."""
        return self.cams(image.unsqueeze(0))[0]

    @torch.no_grad()
    def predict_labels(self, image: torch.Tensor) -> torch.Tensor:
        """Image-level labels from the pooled logits; at least one class is kept."""
        z = class_logits(self.cam_fn(image))
        y = (z > 0).to(z.dtype)
        if y.sum() == 0:
            y[z.argmax()] = 1
        return y


def build_model(cfg: Config, backend: Optional[EncoderBackend] = None, strict: bool = False) -> ProtoSegModel:
    backend = backend or get_backend(cfg.train.backend, strict=strict, seed=BACKEND_SEED)
    return ProtoSegModel(backend, cfg)
