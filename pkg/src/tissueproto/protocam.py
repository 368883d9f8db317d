"""Text-initialised prototypes and cosine-similarity class activation maps."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .data import CLASS_NAMES, l2_normalize_rows, reshape_to_tokens, tokens_to_feature

DEFAULT_PROMPTS = {
    "TUM": ("Tumor regions consist of malignant epithelial cells characterized by pleomorphic, "
            "hyperchromatic nuclei, loss of glandular structure, and frequent mitotic figures, "
            "representing the core cancerous lesions in breast tissue."),
    "STR": ("Stroma comprises the surrounding connective tissue, including fibroblasts and collagen "
            "fibers, often appearing as pink fibrous structures and sometimes showing desmoplastic "
            "reactions to tumor invasion."),
    "LYM": ("Lymphocyte regions contain dense clusters of small immune cells with dark, round nuclei "
            "and minimal cytoplasm, reflecting the host immune response within the tumor "
            "microenvironment."),
    "NEC": ("Necrosis represents areas of dead or dying tissue with pale, structureless eosinophilic "
            "regions, nuclear debris, and \"ghost\" cell remnants, typically associated with "
            "aggressive tumor growth and poor vascularization."),
}

LOGIT_SCALE_INIT = 1 / 0.07
LOGIT_SCALE_RANGE = (1.0, 100.0)


def load_prompts(path: Path | str | None = None) -> list[str]:
    """Class-ordered prompts; a JSON file may override any subset of the defaults."""
    prompts = dict(DEFAULT_PROMPTS)
    if path is not None:
        override = json.loads(Path(path).read_text())
        unknown = set(override) - set(CLASS_NAMES)
        if unknown:
            raise ValueError(f"prompt file has unknown classes {sorted(unknown)}")
        prompts.update(override)
    return [prompts[c] for c in CLASS_NAMES]


class MLP(nn.Sequential):
    """Linear -> GELU -> Linear.

    ``init="preserve"`` sets the weights so that the map is a fixed linear
    embedding of its input at start (exactly the identity when the widths
    match), using GELU(x) - GELU(-x) = x, plus small seeded noise. Hidden
    width must be an even multiple of the input width for this.
    """

    def __init__(self, d_in: int, d_hidden: int, d_out: int, generator: torch.Generator,
                 init: str = "preserve", noise: float = 1e-2):
        super().__init__(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))
        with torch.no_grad():
            if init == "preserve" and d_hidden % (2 * d_in) == 0:
                reps = d_hidden // (2 * d_in)
                eye = torch.eye(d_in)
                w1 = torch.cat([eye, -eye] * reps, 0)
                if d_out == d_in:
                    q = torch.eye(d_in)
                else:
                    a = torch.randn(max(d_in, d_out), max(d_in, d_out), generator=generator, dtype=torch.float64)
                    q = torch.linalg.qr(a)[0][:d_out, :d_in].float()
                w2 = torch.cat([q, -q] * reps, 1) / reps
                self[0].weight.copy_(w1 + noise * torch.randn(w1.shape, generator=generator) / math.sqrt(d_in))
                self[2].weight.copy_(w2 + noise * torch.randn(w2.shape, generator=generator) / math.sqrt(d_hidden))
                self[0].bias.zero_()
                self[2].bias.zero_()
            else:
                for lin in (self[0], self[2]):
                    bound = 1 / math.sqrt(lin.in_features)
                    lin.weight.copy_((torch.rand(lin.weight.shape, generator=generator) * 2 - 1) * bound)
                    lin.bias.copy_((torch.rand(lin.bias.shape, generator=generator) * 2 - 1) * bound)


class PrototypeBank(nn.Module):
    """Frozen text embeddings -> shared projection -> unit prototypes -> adaptive layer to C_s.

    Also holds the learnable background prototype used by the region contrastive loss.
    """

    def __init__(self, text_embeddings: torch.Tensor, feature_dim: int, n_ratio: int = 4,
                 proto_dim: int | None = None, seed: int = 0, init: str = "preserve"):
        super().__init__()
        n_classes, text_dim = text_embeddings.shape
        proto_dim = proto_dim or text_dim
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("text_embeddings", text_embeddings.detach().clone().float())
        self.n_ratio = n_ratio
        self.proj = MLP(text_dim, n_ratio * proto_dim, proto_dim, gen, init)
        self.adaptive = MLP(proto_dim, n_ratio * proto_dim, feature_dim, gen, init)
        self.background = nn.Parameter(torch.randn(proto_dim, generator=gen))

    @property
    def n_classes(self) -> int:
        return self.text_embeddings.shape[0]

    def prototypes(self) -> torch.Tensor:
        """Unit-norm prototype bank, C x D_proto."""
        return l2_normalize_rows(self.proj(self.text_embeddings.to(self.background.dtype)))

    def feature_prototypes(self, protos: torch.Tensor | None = None) -> torch.Tensor:
        """Prototypes projected to the refined feature space, C x C_s."""
        return self.adaptive(self.prototypes() if protos is None else protos)

    def background_prototype(self) -> torch.Tensor:
        return self.background / self.background.norm().clamp_min(1e-12)


def init_prototypes(backend, prompts: Sequence[str], feature_dim: int | None = None,
                    n_ratio: int = 4, seed: int = 0, n_classes: int = len(CLASS_NAMES),
                    init: str = "preserve") -> PrototypeBank:
    if len(prompts) != n_classes:
        raise ValueError(f"expected {n_classes} prompts, got {len(prompts)}")
    text = torch.stack([backend.encode_text(p).float() for p in prompts])
    return PrototypeBank(text, feature_dim or backend.student_dim, n_ratio=n_ratio, seed=seed, init=init)


class CamHead(nn.Module):
    def __init__(self, init: float = LOGIT_SCALE_INIT, bounds=LOGIT_SCALE_RANGE):
        super().__init__()
        self.bounds = bounds
        self.logit_scale = nn.Parameter(torch.tensor(float(init)))

    def scale(self) -> torch.Tensor:
        return self.logit_scale.clamp(*self.bounds)

    @torch.no_grad()
    def clamp_(self):
        self.logit_scale.clamp_(*self.bounds)


def cosine_cams(features: torch.Tensor, prototypes: torch.Tensor, scale) -> torch.Tensor:
    """scale * cos(token, prototype) for every position: B x C_s x H x W -> B x C x H x W."""
    if features.shape[-3] != prototypes.shape[-1]:
        raise ValueError(f"feature channels {features.shape[-3]} != prototype dim {prototypes.shape[-1]}")
    tokens = l2_normalize_rows(reshape_to_tokens(features))
    protos = l2_normalize_rows(prototypes.to(tokens.dtype))
    scores = scale * (tokens @ protos.transpose(-1, -2))
    return tokens_to_feature(scores, features.shape[-2:])


def generate_cams(bank: PrototypeBank, refined_level4: torch.Tensor, head: CamHead) -> torch.Tensor:
    return cosine_cams(refined_level4, bank.feature_prototypes(), head.scale())


def class_logits(cams: torch.Tensor) -> torch.Tensor:
    return cams.mean(dim=(-2, -1))


def classification_loss(cams: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """BCE-with-logits on globally average-pooled raw CAMs, mean over classes (and batch)."""
    z = class_logits(cams)
    return F.binary_cross_entropy_with_logits(z, y.to(z.dtype))


def normalize_cams(cams: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Zero absent classes, min-max the present ones to [0, 1]; constant maps become zeros."""
    flat = cams.flatten(-2)
    lo = flat.min(-1, keepdim=True).values
    hi = flat.max(-1, keepdim=True).values
    rng = hi - lo
    ok = rng > 0
    norm = torch.where(ok, (flat - lo) / torch.where(ok, rng, torch.ones_like(rng)), torch.zeros_like(flat))
    norm = norm * (y.to(norm.dtype).unsqueeze(-1) > 0)
    return norm.reshape(cams.shape)
