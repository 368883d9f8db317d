"""Training loop: AdamW over the trainable modules, per-step loss logging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from ..data import Manifest, image_to_tensor, load_image, resize_bilinear
from ..distill import struct_loss
from ..protocam import classification_loss, normalize_cams
from ..refine import NonFiniteLoss, Region, ThresholdConfig, adaptive_threshold, region_embed_batch, sim_loss, total_loss
from .checkpoint import save_checkpoint, trainable_state
from .config import Config
from .model import ProtoSegModel, build_model

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[Path]):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class StepLosses:
    total: torch.Tensor
    cls: torch.Tensor
    struct: torch.Tensor
    sim: torch.Tensor
    regions: int = 0

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("total", "cls", "struct", "sim")}


@dataclass
class TrainResult:
    model: ProtoSegModel
    history: list = field(default_factory=list)
    step: int = 0
    checkpoint: Optional[Path] = None


def region_masks(cams: torch.Tensor, labels: torch.Tensor, size, alpha: float):
    """Per present class: hard FG / BG masks at image resolution from the normalised CAMs."""
    threshold = ThresholdConfig(alpha)
    with torch.no_grad():
        maps = resize_bilinear(normalize_cams(cams.detach(), labels), size)
    out = []
    for b in range(maps.shape[0]):
        for c in torch.nonzero(labels[b] > 0).flatten().tolist():
            pair = adaptive_threshold(maps[b, c], threshold, cls=c)
            out.append((b, pair))
    return out


def training_step(model: ProtoSegModel, images: torch.Tensor, labels: torch.Tensor,
                  enqueue: bool = True, fixed_masks=None) -> StepLosses:
    """Forward all losses for one batch. ``fixed_masks`` replaces the CAM-derived region masks."""
    cfg = model.cfg
    backend = model.backend
    dtype = model.head.logit_scale.dtype
    images = images.to(dtype)
    labels = labels.to(dtype)
    student = backend.student_pyramid(images)
    teacher = backend.teacher_pyramid(images)
    grids = [tuple(f.shape[-2:]) for f in teacher.levels]
    refined = model.adapters(student, grids)
    cams = model.cams(images, refined)

    l_cls = classification_loss(cams, labels)
    dcfg = cfg.distill_config()
    l_struct = struct_loss(refined, teacher, dcfg)

    pairs = fixed_masks if fixed_masks is not None else \
        region_masks(cams, labels, tuple(images.shape[-2:]), cfg.refine.alpha)
    kinds, owners, masks, classes = [], [], [], []
    for b, pair in pairs:
        for kind, m in (("fg", pair.fg), ("bg", pair.bg)):
            if bool(m.any()):
                kinds.append(kind)
                owners.append(b)
                masks.append(m)
                classes.append(pair.cls)
    regions = []
    if masks:
        emb = region_embed_batch(backend, images[owners], torch.stack(masks))
        regions = [Region(e, k, c) for e, k, c in zip(emb, kinds, classes)]
    l_sim = sim_loss(regions, model.bank.prototypes(), model.bank.background_prototype(), model.memory,
                     cfg.refine.temperature, enqueue=enqueue)
    total = total_loss(l_cls, l_struct, l_sim, cfg.loss_weights())
    return StepLosses(total, l_cls, l_struct, l_sim, len(regions))


def load_training_set(manifest: Manifest, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.stack([image_to_tensor(load_image(manifest.image_path(r), size)) for r in manifest])
    labels = torch.tensor([r.labels for r in manifest], dtype=torch.float32)
    return images, labels


def make_optimizer(model: ProtoSegModel) -> torch.optim.Optimizer:
    t = model.cfg.train
    return torch.optim.AdamW(model.trainable_parameters(), lr=t.learning_rate, weight_decay=t.weight_decay)


def train(cfg: Config, manifest: Manifest, out_dir: Path | str | None = None,
          model: Optional[ProtoSegModel] = None,
          log: Optional[Callable[[dict], None]] = None) -> TrainResult:
    if len(manifest) == 0:
        raise ValueError("cannot train on an empty manifest")
    model = model or build_model(cfg)
    images, labels = load_training_set(manifest, cfg.train.image_size)
    rng = np.random.default_rng(cfg.train.seed)
    opt = make_optimizer(model)
    params = model.trainable_parameters()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model)
    bs = cfg.train.batch_size
    model.train()
    for epoch in range(cfg.train.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), bs):
            idx = torch.from_numpy(order[start:start + bs])
            good = None
            if out_dir is not None:
                good = {k: v.clone() for k, v in trainable_state(model).items()}
                good_bank = model.memory.state_dict()
            opt.zero_grad(set_to_none=True)
            try:
                losses = training_step(model, images[idx], labels[idx])
            except NonFiniteLoss as e:
                ckpt = None
                if out_dir is not None:
                    model.load_state_dict(good, strict=False)
                    model.memory.load_state_dict(good_bank)
                    ckpt = save_checkpoint(model, out_dir / "last_good.ckpt", step=result.step)
                raise TrainingAborted(f"step {result.step}: {e}", ckpt) from e
            losses.total.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)
            opt.step()
            model.head.clamp_()
            result.step += 1
            entry = {"epoch": epoch, "step": result.step, **losses.as_floats(), "regions": losses.regions}
            result.history.append(entry)
            logger.info("epoch %d step %d total %.5f cls %.5f struct %.5f sim %.5f", epoch, result.step,
                        entry["total"], entry["cls"], entry["struct"], entry["sim"])
            if log is not None:
                log(entry)
    model.eval()
    if out_dir is not None:
        result.checkpoint = save_checkpoint(model, out_dir / "model.ckpt", step=result.step)
    return result
