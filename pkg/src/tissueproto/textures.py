"""Procedural tissue textures driven by descriptive words.

The toy backend's text tower and the synthetic dataset both render textures
through this lexicon, so a class description and the images of that class
share visual attributes without either side knowing about class names.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class Recipe:
    base: tuple[float, float, float] = (0.82, 0.72, 0.82)
    dot_color: tuple[float, float, float] = (0.45, 0.3, 0.55)
    dot_density: float = 1.0      # dots per 1000 px^2
    dot_radius: float = 2.5
    dot_jitter: float = 0.5
    stripe_amp: float = 0.0
    stripe_period: float = 10.0
    noise: float = 0.02


# word -> attribute votes; attributes voted by several words are averaged
LEXICON: dict[str, dict] = {
    # epithelial / malignant
    "malignant": {"base": (0.56, 0.36, 0.62)},
    "epithelial": {"base": (0.6, 0.4, 0.66)},
    "cancerous": {"base": (0.54, 0.34, 0.6)},
    "pleomorphic": {"dot_radius": 4.5, "dot_jitter": 2.0},
    "hyperchromatic": {"dot_color": (0.24, 0.08, 0.36)},
    "mitotic": {"dot_density": 3.0},
    # connective tissue
    "connective": {"base": (0.9, 0.6, 0.74), "stripe_amp": 0.14},
    "collagen": {"stripe_amp": 0.16, "stripe_period": 9.0},
    "fibrous": {"stripe_amp": 0.18},
    "fibers": {"stripe_amp": 0.16},
    "fibroblasts": {"dot_density": 0.4, "dot_radius": 1.5},
    "pink": {"base": (0.94, 0.6, 0.76)},
    "desmoplastic": {"stripe_period": 11.0},
    # immune infiltrate
    "dense": {"dot_density": 9.0},
    "clusters": {"dot_density": 8.0},
    "small": {"dot_radius": 1.7, "dot_jitter": 0.3},
    "dark": {"dot_color": (0.14, 0.05, 0.3)},
    "round": {"dot_jitter": 0.2},
    "cytoplasm": {"base": (0.7, 0.62, 0.86)},
    "immune": {"base": (0.72, 0.62, 0.86)},
    # necrosis
    "pale": {"base": (0.97, 0.83, 0.88)},
    "structureless": {"stripe_amp": 0.0, "noise": 0.01},
    "eosinophilic": {"base": (0.95, 0.76, 0.83)},
    "debris": {"dot_radius": 1.0, "dot_color": (0.6, 0.45, 0.62), "dot_density": 1.2},
    "dead": {"dot_density": 0.3},
    "dying": {"dot_density": 0.5},
    "ghost": {"dot_color": (0.82, 0.66, 0.76)},
}

BACKGROUND_RECIPE = Recipe(base=(0.96, 0.95, 0.97), dot_density=0.0, noise=0.012)

_WORD = re.compile(r"[a-z]+")


def recipe_from_text(text: str) -> Recipe:
    votes: dict[str, list] = {}
    for word in _WORD.findall(text.lower()):
        for key, value in LEXICON.get(word, {}).items():
            votes.setdefault(key, []).append(value)
    fields = {k: tuple(np.mean(v, axis=0)) if isinstance(v[0], tuple) else float(np.mean(v))
              for k, v in votes.items()}
    return replace(Recipe(), **fields)


def text_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def jitter_recipe(recipe: Recipe, rng: np.random.Generator, amount: float = 0.03) -> Recipe:
    def col(c):
        return tuple(float(v) for v in np.clip(np.asarray(c) + rng.normal(0, amount, 3), 0, 1))
    return replace(
        recipe,
        base=col(recipe.base),
        dot_color=col(recipe.dot_color),
        dot_density=recipe.dot_density * float(rng.uniform(0.8, 1.25)),
        stripe_period=recipe.stripe_period * float(rng.uniform(0.85, 1.15)),
    )


def render(recipe: Recipe, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Render an H x W x 3 texture in [0, 1]."""
    h, w = size
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = recipe.base
    if recipe.stripe_amp > 0:
        theta = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        phase = (xx * np.cos(theta) + yy * np.sin(theta)) * 2 * np.pi / recipe.stripe_period
        wave = np.sin(phase + 0.6 * np.sin(0.05 * yy + rng.uniform(0, 6.3)))
        img *= (1.0 - recipe.stripe_amp * (0.5 + 0.5 * wave))[..., None]
    n_dots = rng.poisson(recipe.dot_density * h * w / 1000.0)
    if n_dots:
        yy, xx = np.mgrid[0:h, 0:w]
        cy = rng.uniform(0, h, n_dots)
        cx = rng.uniform(0, w, n_dots)
        r = np.maximum(0.6, recipe.dot_radius + rng.normal(0, recipe.dot_jitter, n_dots))
        dot = np.asarray(recipe.dot_color)
        for y0, x0, r0 in zip(cy, cx, r):
            y_lo, y_hi = max(0, int(y0 - r0 - 1)), min(h, int(y0 + r0 + 2))
            x_lo, x_hi = max(0, int(x0 - r0 - 1)), min(w, int(x0 + r0 + 2))
            if y_lo >= y_hi or x_lo >= x_hi:
                continue
            d2 = (yy[y_lo:y_hi, x_lo:x_hi] - y0) ** 2 + (xx[y_lo:y_hi, x_lo:x_hi] - x0) ** 2
            a = np.clip(r0 + 0.5 - np.sqrt(d2), 0, 1)[..., None]
            patch = img[y_lo:y_hi, x_lo:x_hi]
            img[y_lo:y_hi, x_lo:x_hi] = patch * (1 - a) + dot * a
    if recipe.noise > 0:
        img += rng.normal(0, recipe.noise, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)
