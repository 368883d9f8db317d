from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import nn

logger = logging.getLogger(__name__)

ROLES = ("teacher", "student", "refined")


class BackendUnavailable(RuntimeError):
    """A named backend cannot be constructed (missing package or weights)."""


@dataclass
class FeaturePyramid:
    """Four B x C_k x H_k x W_k feature maps produced by one encoder role."""

    levels: list[torch.Tensor]
    role: str

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ValueError(f"a pyramid has exactly 4 levels, got {len(self.levels)}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def level_dims(self) -> list[tuple[int, int, int]]:
        return [tuple(f.shape[-3:]) for f in self.levels]

    def __getitem__(self, k: int) -> torch.Tensor:
        """1-based level access, matching the level numbering used in configs."""
        return self.levels[k - 1]


class EncoderBackend(nn.Module):
    """Frozen teacher/student/text encoders behind one interface.

    Subclasses set ``student_dim``, ``teacher_dims`` and ``text_dim`` and implement
    the ``_student``, ``_teacher``, ``_text`` and ``_image_embedding`` hooks.
    """

    name = "abstract"
    student_dim: int
    teacher_dims: tuple[int, int, int, int]
    text_dim: int
    adapter_hidden: int | None = None   # None: half the student width

    def freeze(self) -> "EncoderBackend":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # frozen encoders never switch to training behaviour
        return super().train(False)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    @torch.no_grad()
    def student_pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        return FeaturePyramid(list(self._student(_batched(images))), "student")

    @torch.no_grad()
    def teacher_pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        return FeaturePyramid(list(self._teacher(_batched(images))), "teacher")

    @torch.no_grad()
    def encode_text(self, prompt: str) -> torch.Tensor:
        if not isinstance(prompt, str) or not prompt.strip():
            raise ValueError("prompt must be a non-empty string")
        return self._text(prompt)

    @torch.no_grad()
    def embed_images(self, images: torch.Tensor) -> torch.Tensor:
        """Global l2-normalised embeddings (B x text_dim) from the frozen image tower."""
        emb = self._image_embedding(_batched(images))
        return emb / emb.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def guidance_grids(self, height: int, width: int) -> list[tuple[int, int]]:
        """Teacher level sizes for an input of the given size (the per-level guidance grid)."""
        cache = self.__dict__.setdefault("_grid_cache", {})
        if (height, width) not in cache:
            probe = torch.zeros(1, 3, height, width)
            cache[(height, width)] = [tuple(f.shape[-2:]) for f in self.teacher_pyramid(probe).levels]
        return list(cache[(height, width)])

    def _student(self, images):
        raise NotImplementedError

    def _teacher(self, images):
        raise NotImplementedError

    def _text(self, prompt):
        raise NotImplementedError

    def _image_embedding(self, images):
        raise NotImplementedError


def _batched(images: torch.Tensor) -> torch.Tensor:
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
    return images


_REGISTRY: dict[str, Callable[..., EncoderBackend]] = {}


def register_backend(name: str):
    def deco(factory):
        _REGISTRY[name] = factory
        return factory
    return deco


def available_backends() -> Sequence[str]:
    return tuple(_REGISTRY)


def get_backend(name: str = "toy", *, strict: bool = False, **kwargs) -> EncoderBackend:
    """Build a backend by registry name.

    When a real backend cannot be loaded and ``strict`` is false, a warning is
    logged and the toy backend is returned instead.
    """
    if name not in _REGISTRY:
        raise KeyError(f"unknown backend {name!r}; choose from {sorted(_REGISTRY)}")
    try:
        return _REGISTRY[name](**kwargs).freeze()
    except BackendUnavailable as e:
        if strict or name == "toy":
            raise
        logger.warning("backend %r unavailable (%s); falling back to the toy backend", name, e)
        seed = kwargs.get("seed", 0)
        return _REGISTRY["toy"](seed=seed).freeze()
