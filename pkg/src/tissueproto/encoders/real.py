"""CONCH ViT-B/16 student + SegFormer MiT-B1 teacher.

Optional: needs the ``conch`` package, ``transformers``, and access to the
gated CONCH weights. Nothing here runs in the test suite.
"""

from __future__ import annotations

import os

import torch
import torch.nn.functional as F

from .adapters import REAL_ADAPTER_HIDDEN
from .base import BackendUnavailable, EncoderBackend, register_backend

CONCH_TAPS = (3, 6, 9, 12)          # 1-based ViT block indices
CONCH_MEAN = (0.48145466, 0.4578275, 0.40821073)
CONCH_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _normalise(x, mean, std):
    m = torch.tensor(mean, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    s = torch.tensor(std, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x - m) / s


class ConchSegformerBackend(EncoderBackend):
    name = "conch+segformer"
    student_dim = 768
    teacher_dims = (64, 128, 320, 512)
    text_dim = 512
    adapter_hidden = REAL_ADAPTER_HIDDEN

    def __init__(self, conch_checkpoint: str | None = None, segformer: str = "nvidia/mit-b1",
                 hf_token: str | None = None, **_):
        super().__init__()
        try:
            from conch.open_clip_custom import create_model_from_pretrained, get_tokenizer, tokenize
        except ImportError as e:
            raise BackendUnavailable("python package 'conch' (MahmoodLab/CONCH) is not installed") from e
        try:
            from transformers import SegformerModel
        except ImportError as e:
            raise BackendUnavailable("python package 'transformers' is not installed") from e
        source = conch_checkpoint or "hf_hub:MahmoodLab/conch"
        try:
            self.conch, _ = create_model_from_pretrained(
                "conch_ViT-B-16", source, hf_auth_token=hf_token or os.environ.get("HF_TOKEN"))
        except Exception as e:  # noqa: BLE001 - any loader failure means missing weights
            raise BackendUnavailable(f"CONCH weights '{source}' could not be loaded: {e}") from e
        try:
            self.segformer = SegformerModel.from_pretrained(segformer)
        except Exception as e:  # noqa: BLE001
            raise BackendUnavailable(f"SegFormer weights '{segformer}' could not be loaded: {e}") from e
        self._tokenizer = get_tokenizer()
        self._tokenize = tokenize

    def _student(self, images):
        trunk = self.conch.visual.trunk
        taps = []
        hooks = [trunk.blocks[i - 1].register_forward_hook(lambda m, a, out: taps.append(out))
                 for i in CONCH_TAPS]
        try:
            trunk.forward_features(_normalise(images, CONCH_MEAN, CONCH_STD))
        finally:
            for h in hooks:
                h.remove()
        n_prefix = getattr(trunk, "num_prefix_tokens", 1)
        gh, gw = images.shape[-2] // 16, images.shape[-1] // 16
        teacher_grid = [(images.shape[-2] // s, images.shape[-1] // s) for s in (4, 8, 16, 32)]
        levels = []
        for tokens, grid in zip(taps, teacher_grid):
            fmap = tokens[:, n_prefix:].transpose(1, 2).reshape(tokens.shape[0], -1, gh, gw)
            levels.append(F.interpolate(fmap, size=grid, mode="bilinear", align_corners=False))
        return levels

    def _teacher(self, images):
        out = self.segformer(pixel_values=_normalise(images, IMAGENET_MEAN, IMAGENET_STD),
                             output_hidden_states=True)
        return list(out.hidden_states)

    def _text(self, prompt):
        tokens = self._tokenize(texts=[prompt], tokenizer=self._tokenizer)
        return self.conch.encode_text(tokens)[0]

    def _image_embedding(self, images):
        return self.conch.encode_image(_normalise(images, CONCH_MEAN, CONCH_STD),
                                       proj_contrast=True, normalize=False)


@register_backend("conch+segformer")
def _make_real(**kwargs) -> ConchSegformerBackend:
    kwargs.pop("seed", None)
    return ConchSegformerBackend(**kwargs)
