"""Fully connected CRF with Gaussian smoothness and appearance kernels, mean-field inference.

Two message-passing paths share the update rule:

* ``exact``: dense N x N kernel matrix, O(N^2) memory; the reference for small grids.
  ``exact-windowed`` applies the same truncation as the fast path.
* ``fast``: kernels truncated to a square window of radius round(3 sigma). The
  smoothness kernel is separable and applied with 1-D correlations; the
  appearance kernel is evaluated per window offset in a compiled loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage


class CrfContractError(ValueError):
    pass


@dataclass
class CrfParams:
    w1: float = 30.0          # smoothness weight
    sigma_alpha: float = 15.0  # smoothness spatial sigma, px
    w2: float = 50.0          # appearance weight
    sigma_beta: float = 10.0   # appearance spatial sigma, px
    sigma_gamma: float = 20.0  # appearance colour sigma, 0-255 intensity units
    iterations: int = 5
    truncate: float = 3.0

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("kernel weights must be >= 0")
        if min(self.sigma_alpha, self.sigma_beta, self.sigma_gamma) <= 0:
            raise ValueError("kernel widths must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def potts(n_labels: int) -> np.ndarray:
    return 1.0 - np.eye(n_labels)


def unary_from_probabilities(prob: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    return -np.log(np.clip(prob, floor, None))


def _softmax_neg(energy: np.ndarray) -> np.ndarray:
    e = -(energy - energy.min(axis=0, keepdims=True))
    q = np.exp(e)
    return q / q.sum(axis=0, keepdims=True)


def _radius(sigma: float, truncate: float) -> int:
    return int(truncate * sigma + 0.5)


# --- exact path -------------------------------------------------------------

def _positions(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.stack([yy.ravel(), xx.ravel()], 1).astype(np.float64)


def exact_kernel(image: np.ndarray, params: CrfParams, windowed: bool = False) -> np.ndarray:
    """w1 k_smooth + w2 k_appear over all pixel pairs, zero diagonal.

    ``windowed`` drops pairs outside each kernel's square window, as the fast path does.
    """
    h, w = image.shape[:2]
    p = _positions(h, w)
    col = quantize_image(image).reshape(-1, image.shape[-1]).astype(np.float64)
    diff = np.abs(p[:, None, :] - p[None, :, :])
    d2p = (diff ** 2).sum(-1)
    d2c = ((col[:, None, :] - col[None, :, :]) ** 2).sum(-1)
    smooth = np.exp(-d2p / (2 * params.sigma_alpha ** 2))
    appear = np.exp(-d2p / (2 * params.sigma_beta ** 2) - d2c / (2 * params.sigma_gamma ** 2))
    if windowed:
        cheb = diff.max(-1)
        smooth[cheb > _radius(params.sigma_alpha, params.truncate)] = 0.0
        appear[cheb > _radius(params.sigma_beta, params.truncate)] = 0.0
    k = params.w1 * smooth + params.w2 * appear
    np.fill_diagonal(k, 0.0)
    return k


# --- fast path --------------------------------------------------------------

def _smooth_filter(q: np.ndarray, sigma: float, truncate: float) -> np.ndarray:
    """Sum_j exp(-|p_i - p_j|^2 / 2 sigma^2) Q_j over a square window, excluding j = i."""
    r = _radius(sigma, truncate)
    t = np.arange(-r, r + 1, dtype=np.float64)
    taps = np.exp(-t ** 2 / (2 * sigma ** 2))
    out = ndimage.correlate1d(q, taps, axis=1, mode="constant", cval=0.0)
    out = ndimage.correlate1d(out, taps, axis=2, mode="constant", cval=0.0)
    return out - q


def _half_window_offsets(radius: int) -> np.ndarray:
    """Offsets (dy, dx) covering each unordered pixel pair of the window exactly once."""
    return np.array([(dy, dx) for dy in range(radius + 1) for dx in range(-radius, radius + 1)
                     if dy > 0 or dx > 0], dtype=np.int64).reshape(-1, 2)


@numba.njit(cache=True)
def _appearance_weights(image, offsets, spatial, colour_lut):
    # weights[y, o, x] = k(p, p + offset_o) for p = (y, x); zero where p + offset leaves the image.
    h, w = image.shape[0], image.shape[1]
    out = np.zeros((h, offsets.shape[0], w), dtype=np.float32)
    for o in range(offsets.shape[0]):
        dy, dx = offsets[o, 0], offsets[o, 1]
        ws = spatial[o]
        for y in range(h - dy):
            y2 = y + dy
            for x in range(max(0, -dx), min(w, w - dx)):
                d0 = image[y, x, 0] - image[y2, x + dx, 0]
                d1 = image[y, x, 1] - image[y2, x + dx, 1]
                d2 = image[y, x, 2] - image[y2, x + dx, 2]
                out[y, o, x] = ws * colour_lut[d0 * d0 + d1 * d1 + d2 * d2]
    return out


@numba.njit(cache=True)
def _apply_pair_weights(q, weights, offsets):
    # Symmetric accumulation: every stored pair contributes in both directions.
    n_labels, h, w = q.shape
    out = np.zeros_like(q)
    for y in range(h):
        for o in range(offsets.shape[0]):
            dy, dx = offsets[o, 0], offsets[o, 1]
            if y + dy >= h:
                continue
            x_lo, x_hi = max(0, -dx), min(w, w - dx)
            n = x_hi - x_lo
            k = weights[y, o, x_lo:x_hi]
            for l in range(n_labels):
                fwd = out[l, y, x_lo:x_hi]
                src = q[l, y + dy, x_lo + dx:x_hi + dx]
                for i in range(n):
                    fwd[i] += k[i] * src[i]
                back = out[l, y + dy, x_lo + dx:x_hi + dx]
                src = q[l, y, x_lo:x_hi]
                for i in range(n):
                    back[i] += k[i] * src[i]
    return out


class AppearanceFilter:
    """Truncated-window bilateral kernel; weights are computed once per image."""

    def __init__(self, image: np.ndarray, params: CrfParams):
        r = _radius(params.sigma_beta, params.truncate)
        self.offsets = _half_window_offsets(r)
        d2 = (self.offsets ** 2).sum(1).astype(np.float64)
        spatial = np.exp(-d2 / (2 * params.sigma_beta ** 2))
        self.weights = _appearance_weights(image, self.offsets, spatial, _colour_lut(params.sigma_gamma))

    def __call__(self, q: np.ndarray) -> np.ndarray:
        out = _apply_pair_weights(np.ascontiguousarray(q, dtype=np.float32), self.weights, self.offsets)
        return out.astype(np.float64)


def _colour_lut(sigma_gamma: float) -> np.ndarray:
    d = np.arange(3 * 255 * 255 + 1, dtype=np.float64)
    return np.exp(-d / (2 * sigma_gamma ** 2))


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Round intensities to 8-bit integers, as dense-CRF pairwise terms expect."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.int64)


# --- inference --------------------------------------------------------------

def _is_potts(compat: np.ndarray) -> bool:
    return compat.shape[0] == compat.shape[1] and np.array_equal(compat, potts(compat.shape[0]))


def mean_field(unary: np.ndarray, image: np.ndarray, params: CrfParams = CrfParams(),
               method: str = "fast", compat: np.ndarray | None = None,
               return_history: bool = False, prune: float = 1e-8,
               appearance: AppearanceFilter | None = None):
    """Run ``params.iterations`` mean-field rounds.

    unary: L x H x W potentials (-log P); image: H x W x 3 intensities on the 0-255 scale,
    rounded to integers.
    Returns the final Q (L x H x W), and the per-round list when ``return_history``.
    ``appearance`` reuses a filter built by :func:`appearance_filter` for the same image.

    With Potts compatibility the fast path filters only labels whose initial Q exceeds
    ``prune`` somewhere, and recovers one of them from the kernel row sums. The label
    messages of pruned labels are bounded by prune * (kernel row sum) and treated as zero.
    """
    unary = np.asarray(unary, dtype=np.float64)
    n_labels, h, w = unary.shape
    if image.shape[:2] != (h, w):
        raise ValueError(f"image {image.shape[:2]} and unary {(h, w)} disagree")
    total = np.exp(-unary).sum(axis=0)
    if not np.allclose(total, 1.0, atol=1e-4):
        raise CrfContractError("exp(-unary) must sum to 1 at every pixel")
    if method not in ("fast", "exact", "exact-windowed"):
        raise ValueError(f"unknown method {method!r}")
    image = np.ascontiguousarray(quantize_image(image))
    compat = potts(n_labels) if compat is None else np.asarray(compat, dtype=np.float64)
    q = _softmax_neg(unary)
    history = []

    if method != "fast":
        kernel = exact_kernel(image, params, windowed=method == "exact-windowed")

        def message(x):
            return (x.reshape(x.shape[0], -1) @ kernel).reshape(x.shape)
    else:
        if appearance is None and params.w2:
            appearance = AppearanceFilter(image, params)

        def message(x):
            msg = np.zeros_like(x)
            if params.w1:
                msg += params.w1 * _smooth_filter(x, params.sigma_alpha, params.truncate)
            if params.w2:
                msg += params.w2 * appearance(x)
            return msg

    potts_fast = method == "fast" and _is_potts(compat)
    if potts_fast:
        active = np.flatnonzero(q.reshape(n_labels, -1).max(axis=1) > prune)
        row_sums = message(np.ones((1, h, w)))[0] if active.size > 1 else None

    for _ in range(params.iterations):
        if potts_fast:
            # Potts: pairwise(l) = sum_{l' != l} msg(l') = row_sum - msg(l), and row_sum is
            # shared by every label, so only -msg(l) affects the softmax.
            msg = np.zeros_like(q)
            if active.size > 1:
                head = active[:-1]
                msg[head] = message(q[head])
                msg[active[-1]] = row_sums - msg[head].sum(axis=0)
            q = _softmax_neg(unary - msg)
        else:
            pairwise = np.tensordot(compat, message(q), axes=([1], [0]))
            q = _softmax_neg(unary + pairwise)
        if return_history:
            history.append(q.copy())
    return (q, history) if return_history else q


def appearance_filter(image: np.ndarray, params: CrfParams = CrfParams()) -> AppearanceFilter:
    """Precompute the appearance kernel of an H x W x 3 (0-255) image for repeated solves."""
    return AppearanceFilter(np.ascontiguousarray(quantize_image(image)), params)


def dense_crf(prob: np.ndarray, image: np.ndarray, params: CrfParams = CrfParams(),
              method: str = "fast", appearance: AppearanceFilter | None = None) -> np.ndarray:
    """(C+1) x H x W label distribution + H x W x 3 image (0-255) -> H x W label map."""
    q = mean_field(unary_from_probabilities(prob), image, params, method=method, appearance=appearance)
    return np.argmax(q, axis=0)
