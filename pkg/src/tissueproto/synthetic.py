"""Synthetic textured-blob dataset with image-level labels and held-out dense masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import BACKGROUND, CLASS_NAMES, IMAGE_SIZE, NUM_CLASSES, Record, save_image, save_mask, write_manifest
from .protocam import DEFAULT_PROMPTS
from .textures import BACKGROUND_RECIPE, jitter_recipe, recipe_from_text, render

CLASS_RECIPES = [recipe_from_text(DEFAULT_PROMPTS[c]) for c in CLASS_NAMES]


def blob_layout(rng: np.random.Generator, classes: list[int], size: int = IMAGE_SIZE,
                smooth: float = 28.0, min_fraction: float = 0.08, background_bias: float = 1.0,
                tries: int = 50) -> np.ndarray:
    """Label map with one large organic region per listed class plus background.

    Each label owns a smoothed noise field and pixels take the arg-max; ``background_bias``
    is added to the background field, so background typically covers about 60% of the image.
    """
    labels = list(classes) + [BACKGROUND]
    for _ in range(tries):
        fields = np.stack([ndimage.gaussian_filter(rng.standard_normal((size, size)), smooth, mode="wrap")
                           for _ in labels])
        fields /= fields.std(axis=(1, 2), keepdims=True)
        fields[-1] += background_bias
        mask = np.asarray(labels)[np.argmax(fields, axis=0)]
        fractions = [(mask == c).mean() for c in labels]
        if min(fractions) >= min_fraction:
            return mask.astype(np.uint8)
    return mask.astype(np.uint8)


def make_sample(rng: np.random.Generator, size: int = IMAGE_SIZE, max_classes: int = 2,
                jitter: float = 0.02) -> tuple[np.ndarray, np.ndarray, list[int]]:
    n = int(rng.integers(1, max_classes + 1))
    classes = sorted(rng.choice(NUM_CLASSES, size=n, replace=False).tolist())
    mask = blob_layout(rng, classes, size)
    img = np.empty((size, size, 3), dtype=np.float32)
    for c in classes + [BACKGROUND]:
        recipe = BACKGROUND_RECIPE if c == BACKGROUND else CLASS_RECIPES[c]
        tex = render(jitter_recipe(recipe, rng, jitter), (size, size), rng)
        sel = mask == c
        img[sel] = tex[sel]
    labels = [int(c in classes) for c in range(NUM_CLASSES)]
    return img, mask, labels


def generate_dataset(out: Path | str, n_images: int = 64, seed: int = 0, size: int = IMAGE_SIZE,
                     max_classes: int = 2) -> Path:
    """Write images/, masks/ and manifest.jsonl under ``out``; returns the manifest path."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_images):
        img, mask, labels = make_sample(rng, size, max_classes)
        name = f"{i:04d}.png"
        save_image(img, out / "images" / name)
        save_mask(mask, out / "masks" / name)
        records.append(Record(image=f"images/{name}", labels=labels, mask=f"masks/{name}"))
    path = out / "manifest.jsonl"
    write_manifest(records, path)
    return path


def majority_class_prediction(gt: np.ndarray) -> np.ndarray:
    """Label-prior baseline: every pixel gets the image's most frequent ground-truth label."""
    counts = np.bincount(np.asarray(gt).ravel(), minlength=NUM_CLASSES + 1)
    return np.full(gt.shape, int(np.argmax(counts)), dtype=np.int64)
