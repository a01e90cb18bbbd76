"""Depth, image and second-view depth losses and their weighted total."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateInputError
from .geometry import DepthMap
from .tensor import Tensor, l1_mean, weighted_sum


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # depth terms (first and second view)
    beta: float = 0.5  # image synthesis term

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigurationError(f"invalid loss weights alpha={self.alpha} beta={self.beta}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.alpha * factor, self.beta * factor)


@dataclass
class LossReport:
    l1: float | None = None
    l2: float | None = None
    l3: float | None = None
    total: float = 0.0
    n1: int = 0
    n2: int = 0
    n3: int = 0

    def recompute_total(self, w: LossWeights) -> float:
        return (
            w.alpha * (self.l1 or 0.0)
            + w.beta * (self.l2 or 0.0)
            + w.alpha * (self.l3 or 0.0)
        )


def _depth_arrays(gt, like: Tensor):
    """Accept a DepthMap, a list of them, or a ``(values, valid)`` pair shaped like ``like``."""
    if isinstance(gt, DepthMap):
        gt = [gt]
    if isinstance(gt, (list, tuple)) and gt and isinstance(gt[0], DepthMap):
        values = np.stack([g.values for g in gt])
        valid = np.stack([g.valid for g in gt])
    else:
        values, valid = gt
    values = np.asarray(values).reshape(like.shape)
    valid = np.asarray(valid, dtype=bool).reshape(like.shape)
    return np.where(valid, values, 0.0), valid


def depth_loss(pred: Tensor, gt) -> Tensor:
    """Mean absolute depth error over pixels where the ground truth is valid."""
    values, valid = _depth_arrays(gt, pred)
    if not valid.any():
        raise DegenerateInputError("depth_loss: ground truth has no valid pixels")
    return l1_mean(pred, values, valid)


def second_view_depth_loss(pred2: Tensor, gt2) -> Tensor:
    """Same contract as ``depth_loss``, evaluated on the second view."""
    return depth_loss(pred2, gt2)


def image_loss(pred_rgb: Tensor, gt_rgb) -> Tensor:
    """Mean absolute difference over every pixel and channel, no masking.

    ``gt_rgb`` may be ``(N, 3, H, W)`` like the prediction, or ``(H, W, 3)`` /
    ``(N, H, W, 3)`` image buffers.
    """
    gt = np.asarray(gt_rgb.data if isinstance(gt_rgb, Tensor) else gt_rgb)
    if gt.shape != pred_rgb.shape:
        if gt.ndim == 3:
            gt = gt[None]
        if gt.ndim == 4 and gt.shape[-1] == 3:
            gt = gt.transpose(0, 3, 1, 2)
    if gt.shape != pred_rgb.shape:
        raise ConfigurationError(f"image_loss shapes differ: {pred_rgb.shape} vs {np.shape(gt_rgb)}")
    return l1_mean(pred_rgb, gt)


def total_loss(l1: Tensor | None, l2: Tensor | None, l3: Tensor | None, w: LossWeights) -> Tensor:
    """``alpha * l1 + beta * l2 + alpha * l3``; absent terms are skipped."""
    terms = [(c, t) for c, t in ((w.alpha, l1), (w.beta, l2), (w.alpha, l3)) if t is not None]
    return weighted_sum(terms)


LOG_COLUMNS = ("step", "l1", "l2", "l3", "total")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def append_loss_log(path, step: int, report: LossReport) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(LOG_COLUMNS)
        w.writerow([step, _fmt(report.l1), _fmt(report.l2), _fmt(report.l3), _fmt(report.total)])


def read_loss_log(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append({k: (int(v) if k == "step" else (float(v) if v != "" else None)) for k, v in r.items()})
    return out
