"""Pixel-wise binary cross-entropy on logits, and IoU / Dice scoring."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass
class LossResult:
    loss: float
    d_logits: np.ndarray


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def check_binary(masks: np.ndarray, what: str = "mask") -> None:
    if not np.all((masks == 0) | (masks == 1)):
        bad = masks[(masks != 0) & (masks != 1)].flat[0]
        raise ValidationError(f"{what} must be binary (0/1); found value {bad!r}")


def bce_from_logits(logits, masks) -> LossResult:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``masks``.

    Averaged over every pixel of every image. Uses the overflow-free form
    ``max(z, 0) - z*y + log1p(exp(-|z|))``; the gradient is
    ``(sigmoid(z) - y) / n_pixels``.
    """
    z = np.asarray(logits)
    y = np.asarray(masks)
    if z.shape != y.shape:
        raise ShapeError(f"bce_from_logits: logits shape {z.shape} != masks shape {y.shape}")
    check_binary(y)
    y = y.astype(z.dtype, copy=False)
    n = z.size
    per_pixel = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = per_pixel.mean(dtype=z.dtype)
    d = (sigmoid(z) - y) / z.dtype.type(n)
    return LossResult(float(loss), d.astype(z.dtype, copy=False))


@dataclass
class MetricReport:
    """Per-image IoU / Dice and their means (all in [0, 1])."""

    miou: float
    dice: float
    per_image_iou: list[float] = field(default_factory=list)
    per_image_dice: list[float] = field(default_factory=list)

    @property
    def n_images(self) -> int:
        return len(self.per_image_iou)

    def csv_row(self, centre: str, method: str) -> list[str]:
        return [centre, method, f"{100 * self.miou:.1f}", f"{100 * self.dice:.1f}", str(self.n_images)]


def _overlaps(prob_maps: Sequence, masks: Sequence, threshold: float):
    if len(prob_maps) == 0:
        raise ValidationError("cannot score an empty list of predictions")
    if len(prob_maps) != len(masks):
        raise ValidationError(f"{len(prob_maps)} predictions but {len(masks)} masks")
    for p, g in zip(prob_maps, masks):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ShapeError(f"prediction shape {p.shape} != mask shape {g.shape}")
        pred = p >= threshold
        gt = g > 0.5
        inter = int(np.count_nonzero(pred & gt))
        yield inter, int(np.count_nonzero(pred)), int(np.count_nonzero(gt))


def _iou(inter: int, np_: int, ng: int) -> float:
    union = np_ + ng - inter
    return 1.0 if union == 0 else inter / union


def _dice(inter: int, np_: int, ng: int) -> float:
    total = np_ + ng
    return 1.0 if total == 0 else 2.0 * inter / total


def score(prob_maps: Sequence, masks: Sequence, threshold: float = 0.5) -> MetricReport:
    """Foreground IoU and Dice per image; empty-vs-empty counts as 1.0."""
    counts = list(_overlaps(prob_maps, masks, threshold))
    ious = [_iou(*c) for c in counts]
    dices = [_dice(*c) for c in counts]
    return MetricReport(float(np.mean(ious)), float(np.mean(dices)), ious, dices)


def miou(prob_maps: Sequence, masks: Sequence, threshold: float = 0.5) -> MetricReport:
    return score(prob_maps, masks, threshold)


def dice(prob_maps: Sequence, masks: Sequence, threshold: float = 0.5) -> MetricReport:
    return score(prob_maps, masks, threshold)
