"""Desk-scale stand-in for the frozen vision-language student and structural teacher.

Both encoders share a fixed filter-bank stem (centred colour, chroma, darkness,
local contrast, oriented gradient energy) followed by strided average pooling
and seeded random-projection 1x1 convolutions, one per pyramid level. The
text tower renders the texture a prompt describes (see ``textures``) and
embeds it with the student image tower, which makes text and image
embeddings comparable the way a contrastively pretrained model would.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..textures import recipe_from_text, render, text_seed
from .base import EncoderBackend, register_backend

STRIDES = (4, 8, 16, 32)
_COLOR_CENTRE = (0.8, 0.65, 0.8)


def _gauss_taps(sigma: float, dtype) -> torch.Tensor:
    r = int(3 * sigma + 0.5)
    t = torch.arange(-r, r + 1, dtype=dtype)
    k = torch.exp(-t ** 2 / (2 * sigma * sigma))
    return k / k.sum()


def _blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    k = _gauss_taps(sigma, x.dtype)
    r = (k.numel() - 1) // 2
    c = x.shape[1]
    x = F.conv2d(F.pad(x, (r, r, 0, 0), mode="replicate"), k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(F.pad(x, (0, 0, r, r), mode="replicate"), k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def texture_descriptor(x: torch.Tensor) -> torch.Tensor:
    """B x 3 x H x W in [0,1] -> B x 10 x H x W per-pixel descriptor."""
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    lum = 0.299 * r + 0.587 * g + 0.114 * b
    centre = torch.tensor(_COLOR_CENTRE, dtype=x.dtype).view(1, 3, 1, 1)
    colour = (x - centre) * 3
    chroma = torch.cat([r - g - 0.08, b - g - 0.1], 1) * 6
    dark = torch.relu(0.55 - lum) * 4
    fine = _blur(lum, 1.0)
    c1 = (lum - fine).abs() * 8
    c3 = (fine - _blur(lum, 3.0)).abs() * 8
    gx = F.pad(lum[..., :, 2:] - lum[..., :, :-2], (1, 1, 0, 0), mode="replicate")
    gy = F.pad(lum[..., 2:, :] - lum[..., :-2, :], (0, 0, 1, 1), mode="replicate")
    ex = _blur(gx, 1.5).abs() * 6
    ey = _blur(gy, 1.5).abs() * 6
    return torch.cat([colour, chroma, dark, c1, c3, ex, ey], 1)


DESCRIPTOR_DIM = 10


def _projection(gen: torch.Generator, out_dim: int, in_dim: int) -> torch.Tensor:
    q, _ = torch.linalg.qr(torch.randn(max(out_dim, in_dim), max(out_dim, in_dim), generator=gen,
                                       dtype=torch.float64))
    return q[:out_dim, :in_dim].float().contiguous()


class ToyBackend(EncoderBackend):
    name = "toy"

    def __init__(self, seed: int = 0, student_dim: int = 64, teacher_dim: int = 32,
                 text_jitter: float = 0.05):
        super().__init__()
        self.seed = seed
        self.student_dim = student_dim
        self.teacher_dims = (teacher_dim,) * 4
        self.text_dim = student_dim
        self.text_jitter = text_jitter
        gen = torch.Generator().manual_seed(seed)
        self.student_proj = nn.ParameterList(
            nn.Parameter(_projection(gen, student_dim, DESCRIPTOR_DIM), requires_grad=False) for _ in STRIDES)
        self.teacher_proj = nn.ParameterList(
            nn.Parameter(_projection(gen, teacher_dim, DESCRIPTOR_DIM), requires_grad=False) for _ in STRIDES)
        self._text_cache: dict = {}

    def _pyramid(self, images, projections, fine_sigma):
        d = texture_descriptor(images.to(projections[0].dtype))
        if fine_sigma:
            d = _blur(d, fine_sigma)
        out = []
        for stride, w in zip(STRIDES, projections):
            pooled = F.avg_pool2d(d, stride, stride)
            out.append(torch.einsum("od,bdhw->bohw", w, pooled))
        return out

    def _student(self, images):
        return self._pyramid(images, self.student_proj, 0.0)

    def _teacher(self, images):
        # slightly smoothed stem: the structural stream favours region layout over texture detail
        return self._pyramid(images, self.teacher_proj, 1.0)

    def _image_embedding(self, images):
        tokens = self._student(images)[-1].flatten(2).transpose(1, 2)
        tokens = tokens / tokens.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return tokens.mean(1)

    def _text(self, prompt):
        key = (prompt, self.student_proj[0].dtype)
        if key not in self._text_cache:
            seed = text_seed(prompt) ^ self.seed
            rng = np.random.default_rng(seed)
            swatch = render(recipe_from_text(prompt), (224, 224), rng)
            img = torch.from_numpy(swatch).permute(2, 0, 1)[None].to(self.student_proj[0].dtype)
            emb = self._image_embedding(img)[0]
            emb = emb / emb.norm()
            noise = torch.from_numpy(rng.standard_normal(self.text_dim)).to(emb.dtype)
            emb = emb + self.text_jitter * noise / noise.norm()
            self._text_cache[key] = emb / emb.norm()
        return self._text_cache[key].clone()


@register_backend("toy")
def _make_toy(seed: int = 0, **kwargs) -> ToyBackend:
    return ToyBackend(seed=seed, **kwargs)
