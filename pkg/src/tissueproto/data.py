"""Dataset ingestion: JSON-lines manifests, image/mask codecs and token reshaping."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

logger = logging.getLogger(__name__)

CLASS_NAMES = ("TUM", "STR", "LYM", "NEC")
NUM_CLASSES = len(CLASS_NAMES)
BACKGROUND = NUM_CLASSES
IMAGE_SIZE = 224
NORM_EPS = 1e-12


class ManifestError(ValueError):
    """Raised for malformed manifest lines or schema violations."""


@dataclass
class Record:
    image: str
    labels: list[int]
    mask: Optional[str] = None
    split: Optional[str] = None

    def to_json(self) -> dict:
        out = {"image": self.image, "labels": list(self.labels)}
        if self.mask is not None:
            out["mask"] = self.mask
        if self.split is not None:
            out["split"] = self.split
        return out


@dataclass
class Manifest:
    root: Path
    records: list[Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def image_path(self, rec: Record) -> Path:
        return self.root / rec.image

    def mask_path(self, rec: Record) -> Optional[Path]:
        return None if rec.mask is None else self.root / rec.mask


def _parse_record(obj, lineno: int) -> Record:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    unknown = set(obj) - {"image", "labels", "mask", "split"}
    if unknown:
        raise ManifestError(f"line {lineno}: unknown keys {sorted(unknown)}")
    if "image" not in obj or "labels" not in obj:
        raise ManifestError(f"line {lineno}: 'image' and 'labels' are required")
    labels = obj["labels"]
    if not isinstance(labels, list) or len(labels) != NUM_CLASSES:
        n = len(labels) if isinstance(labels, list) else "?"
        raise ManifestError(
            f"line {lineno}: labels must have {NUM_CLASSES} entries "
            f"({', '.join(CLASS_NAMES)}), got {n}"
        )
    if any(v not in (0, 1) or isinstance(v, bool) for v in labels):
        raise ManifestError(f"line {lineno}: labels must be 0/1 integers")
    return Record(
        image=str(obj["image"]),
        labels=[int(v) for v in labels],
        mask=obj.get("mask"),
        split=obj.get("split"),
    )


def parse_manifest(text: str, root: Path | str = ".") -> Manifest:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"line {lineno}: {e.msg}") from e
        records.append(_parse_record(obj, lineno))
    return Manifest(root=Path(root), records=records)


def load_manifest(path: Path | str, root: Path | str | None = None,
                  check_paths: bool = True) -> Manifest:
    """Read a JSON-lines manifest; paths resolve against `root` (default: the file's directory)."""
    path = Path(path)
    manifest = parse_manifest(path.read_text(), root=Path(root) if root else path.parent)
    if not manifest.records:
        logger.warning("manifest %s is empty", path)
    if check_paths:
        for rec in manifest.records:
            if not manifest.image_path(rec).exists():
                raise FileNotFoundError(manifest.image_path(rec))
            mp = manifest.mask_path(rec)
            if mp is not None and not mp.exists():
                logger.warning("mask %s listed for %s does not exist", mp, rec.image)
    return manifest


def format_manifest(manifest: Manifest | Iterable[Record]) -> str:
    records = manifest.records if isinstance(manifest, Manifest) else manifest
    return "".join(json.dumps(r.to_json(), separators=(",", ":")) + "\n" for r in records)


def write_manifest(manifest: Manifest | Iterable[Record], path: Path | str) -> None:
    Path(path).write_text(format_manifest(manifest))


_BCSS_LABELS = re.compile(r"\[(\d)\s*,?\s*(\d)\s*,?\s*(\d)\s*,?\s*(\d)\]")


def import_bcss_directory(image_dir: Path | str, mask_dir: Path | str | None = None,
                          root: Path | str | None = None) -> Manifest:
    """Build a manifest from BCSS-WSSS style names such as ``xxx-[1 0 0 1].png``.

    The four digits embedded in the file name are the TUM/STR/LYM/NEC indicators.
    Masks, when given, are matched by file name.
    """
    image_dir = Path(image_dir)
    root = Path(root) if root else image_dir
    records = []
    for p in sorted(image_dir.glob("*.png")):
        m = _BCSS_LABELS.search(p.name)
        if m is None:
            logger.warning("no label vector in file name %s, skipped", p.name)
            continue
        mask = None
        if mask_dir is not None and (Path(mask_dir) / p.name).exists():
            mask = os.path.relpath(Path(mask_dir) / p.name, root)
        records.append(Record(image=os.path.relpath(p, root),
                              labels=[int(g) for g in m.groups()], mask=mask))
    return Manifest(root=root, records=records)


# --- images and masks -----------------------------------------------------

def resize_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a (..., H, W) tensor, half-pixel centres (align_corners=False), no antialiasing."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    lead = x.shape[:-2]
    flat = x.reshape(-1, 1, *x.shape[-2:])
    out = F.interpolate(flat, size=tuple(size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size)


def load_image(path: Path | str, target_size: int | tuple[int, int] | None = IMAGE_SIZE) -> np.ndarray:
    """Decode an 8-bit image to an H x W x 3 float32 array in [0, 1], resized bilinearly."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise OSError(f"cannot decode image {path}: {e}") from e
    if target_size is None:
        return arr
    if isinstance(target_size, int):
        target_size = (target_size, target_size)
    t = torch.from_numpy(arr).permute(2, 0, 1)
    t = resize_bilinear(t, target_size).clamp_(0.0, 1.0)
    return t.permute(1, 2, 0).contiguous().numpy()


def save_image(arr: np.ndarray, path: Path | str) -> None:
    arr = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_mask(path: Path | str, target_size: int | tuple[int, int] | None = None) -> np.ndarray:
    """Single-channel PNG with pixel value = class index (4 = background). Resized by nearest neighbour."""
    with Image.open(path) as im:
        if target_size is not None:
            if isinstance(target_size, int):
                target_size = (target_size, target_size)
            im = im.resize((target_size[1], target_size[0]), Image.NEAREST)
        mask = np.asarray(im, dtype=np.int64)
    if mask.ndim != 2:
        raise ValueError(f"mask {path} must be single channel")
    if mask.min() < 0 or mask.max() > BACKGROUND:
        raise ValueError(f"mask {path} has values outside 0..{BACKGROUND}")
    return mask


def save_mask(mask: np.ndarray, path: Path | str) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """H x W x 3 array -> 3 x H x W float tensor."""
    return torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).float()


# --- tokens ---------------------------------------------------------------

def reshape_to_tokens(feature: torch.Tensor) -> torch.Tensor:
    """(..., C, H, W) -> (..., H*W, C); row i is spatial position (i // W, i % W)."""
    return feature.flatten(-2).transpose(-1, -2)


def tokens_to_feature(tokens: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    """Inverse of :func:`reshape_to_tokens` for a (H, W) source shape."""
    h, w = shape
    return tokens.transpose(-1, -2).reshape(*tokens.shape[:-2], tokens.shape[-1], h, w)


def l2_normalize_rows(tokens: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Divide each row by max(||row||, eps). Zero rows stay zero."""
    return tokens / tokens.norm(dim=-1, keepdim=True).clamp_min(eps)


def is_normalized(tokens: torch.Tensor, atol: float = 1e-5) -> bool:
    norms = tokens.norm(dim=-1)
    return bool(torch.all((norms - 1).abs() <= atol))
