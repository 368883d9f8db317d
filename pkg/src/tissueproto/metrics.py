"""Confusion matrices, per-class IoU / Dice and report tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import CLASS_NAMES


class EmptyConfusion(ValueError):
    pass


class ConfusionMatrix:
    """(C+1) x (C+1) pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, n_classes: int = len(CLASS_NAMES), counts: Optional[np.ndarray] = None):
        self.n_classes = n_classes
        size = n_classes + 1
        self.counts = np.zeros((size, size), dtype=np.int64) if counts is None else np.asarray(counts, np.int64)
        if self.counts.shape != (size, size) or (self.counts < 0).any():
            raise ValueError("confusion counts must be a non-negative (C+1) x (C+1) matrix")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        size = self.n_classes + 1
        for name, m in (("prediction", pred), ("ground truth", gt)):
            if m.size and (m.min() < 0 or m.max() >= size):
                raise ValueError(f"{name} has labels outside 0..{size - 1}")
        idx = gt.astype(np.int64).ravel() * size + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=size * size).reshape(size, size)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge confusion matrices over different class sets")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    __add__ = merge


def accumulate(conf: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return conf.accumulate(pred, gt)


@dataclass
class MetricReport:
    class_names: Sequence[str]
    iou: dict
    dice: dict
    miou: float
    mdice: float
    pixels: int
    gt_pixels: dict = field(default_factory=dict)
    skipped: int = 0
    excluded: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"classes": list(self.class_names), "iou": self.iou, "dice": self.dice,
                "miou": self.miou, "mdice": self.mdice, "pixels": self.pixels,
                "gt_pixels": self.gt_pixels, "skipped": self.skipped, "excluded": self.excluded}


def compute_report(conf: ConfusionMatrix, class_names: Sequence[str] = CLASS_NAMES,
                   skipped: int = 0) -> MetricReport:
    """Foreground-only IoU / Dice. Classes absent from both prediction and ground truth are
    reported as None and left out of the means."""
    if conf.total == 0:
        raise EmptyConfusion("no pixels were counted")
    c = conf.counts
    iou, dice, gt_pixels, excluded = {}, {}, {}, []
    for k, name in enumerate(class_names):
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        gt_pixels[name] = tp + fn
        if tp + fp + fn == 0:
            iou[name] = dice[name] = None
            excluded.append(name)
            continue
        iou[name] = tp / (tp + fp + fn)
        dice[name] = 2 * tp / (2 * tp + fp + fn)
    scored = [v for v in iou.values() if v is not None]
    miou = float(np.mean(scored)) if scored else float("nan")
    mdice = float(np.mean([v for v in dice.values() if v is not None])) if scored else float("nan")
    return MetricReport(tuple(class_names), iou, dice, miou, mdice, conf.total, gt_pixels, skipped, excluded)


def _fmt(v) -> str:
    return "   -  " if v is None else f"{100 * v:6.2f}"


def format_table(rows: Iterable[tuple[str, MetricReport]], metric: str = "both") -> str:
    """Aligned text table, one row per method: per-class scores then the means, in percent."""
    rows = list(rows)
    if not rows:
        return ""
    names = list(rows[0][1].class_names)
    width = max(12, max(len(r[0]) for r in rows) + 2)
    lines = []
    for key, title, mean in (("iou", "IoU", "miou"), ("dice", "Dice", "mdice")):
        if metric not in ("both", key):
            continue
        head = f"{title:<{width}}" + "".join(f"{n:>8}" for n in names) + f"{'mean':>8}"
        lines += [head, "-" * len(head)]
        for label, rep in rows:
            scores = getattr(rep, key)
            lines.append(f"{label:<{width}}" + "".join(f"{_fmt(scores[n]):>8}" for n in names)
                         + f"{_fmt(getattr(rep, mean)):>8}")
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def reports_to_json(rows: Iterable[tuple[str, MetricReport]]) -> str:
    return json.dumps({"rows": [{"method": label, **rep.to_dict()} for label, rep in rows]}, indent=2)
