"""Depth evaluation metrics with range clipping and validity masking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateInputError
from .geometry import DepthMap

METRIC_NAMES = ("rel", "rmse", "rmse_log", "sq_rel", "delta1", "delta2", "delta3")


@dataclass(frozen=True)
class EvalRange:
    min_depth: float
    max_depth: float

    def __post_init__(self):
        if not (0 < self.min_depth < self.max_depth):
            raise ConfigurationError(f"invalid eval range [{self.min_depth}, {self.max_depth}]")


KITTI_RANGE = EvalRange(0.01, 80.0)
NYU_RANGE = EvalRange(0.01, 10.0)
RANGES = {"kitti": KITTI_RANGE, "nyu": NYU_RANGE}


def parse_range(text: str) -> EvalRange:
    """``"kitti"``, ``"nyu"`` or ``"min,max"``."""
    if text.lower() in RANGES:
        return RANGES[text.lower()]
    try:
        lo, hi = (float(s) for s in text.split(","))
    except ValueError:
        raise ConfigurationError(f"range must be a preset name or 'min,max', got {text!r}") from None
    return EvalRange(lo, hi)


@dataclass
class MetricsReport:
    rel: float
    rmse: float
    rmse_log: float
    sq_rel: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=False)

    def csv_row(self) -> str:
        return ",".join(repr(float(getattr(self, k))) for k in METRIC_NAMES) + f",{self.n_valid}"

    @staticmethod
    def csv_header() -> str:
        return ",".join(METRIC_NAMES) + ",n_valid"


def _values(pred) -> np.ndarray:
    return np.asarray(pred.values if isinstance(pred, DepthMap) else pred, dtype=np.float64)


def evaluation_mask(gt: DepthMap, rng: EvalRange, crop=None) -> np.ndarray:
    """GT pixels that carry a measurement inside the evaluation range.

    ``crop`` is an optional ``(top, bottom, left, right)`` pixel rectangle.
    """
    g = gt.values
    mask = gt.valid & (g >= rng.min_depth) & (g <= rng.max_depth)
    if crop is not None:
        top, bottom, left, right = crop
        box = np.zeros_like(mask)
        box[top:bottom, left:right] = True
        mask &= box
    return mask


def compute_metrics(pred, gt: DepthMap, rng: EvalRange = KITTI_RANGE, crop=None) -> MetricsReport:
    p = _values(pred)
    if p.shape != gt.shape:
        raise ConfigurationError(f"prediction shape {p.shape} != ground truth shape {gt.shape}")
    mask = evaluation_mask(gt, rng, crop)
    n = int(mask.sum())
    if n == 0:
        raise DegenerateInputError("no valid ground-truth pixels inside the evaluation range")
    y = gt.values[mask].astype(np.float64)
    yh = np.clip(p[mask], rng.min_depth, rng.max_depth)
    diff = y - yh
    ratio = np.maximum(y / yh, yh / y)
    return MetricsReport(
        rel=float(np.mean(np.abs(diff) / y)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(y) - np.log(yh)) ** 2))),
        sq_rel=float(np.mean(diff**2 / y)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        n_valid=n,
    )


def mean_metrics(reports: list[MetricsReport]) -> MetricsReport:
    """Average of per-image metrics; ``n_valid`` is the total pixel count."""
    if not reports:
        raise DegenerateInputError("cannot average an empty list of metrics")
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    return MetricsReport(**vals, n_valid=int(sum(r.n_valid for r in reports)))


def error_map(pred, gt: DepthMap, rng: EvalRange = KITTI_RANGE, masked: bool = True):
    """Per-pixel ``|y - y_hat|`` and its mean.

    With ``masked`` the error is zero outside the evaluation set and the mean
    runs over that set; otherwise every pixel with a measurement counts.
    Predictions are clipped to the range either way.
    """
    p = np.clip(_values(pred), rng.min_depth, rng.max_depth)
    if masked:
        mask = evaluation_mask(gt, rng)
    else:
        mask = np.ones(gt.shape, dtype=bool)
    g = np.where(gt.valid, gt.values, 0.0)
    err = np.where(mask, np.abs(g - p), 0.0)
    mean = float(err[mask].mean()) if mask.any() else 0.0
    return err, mean


def false_color(values: np.ndarray, vmax: float) -> np.ndarray:
    """Purple (0) to yellow (``vmax``) ramp, returned as uint8 ``(H, W, 3)``."""
    t = np.clip(np.asarray(values, dtype=np.float64) / vmax, 0.0, 1.0)[..., None]
    purple = np.array([68.0, 1.0, 84.0])
    teal = np.array([33.0, 145.0, 140.0])
    yellow = np.array([253.0, 231.0, 37.0])
    lo = purple + (teal - purple) * np.clip(t * 2.0, 0, 1)
    rgb = np.where(t < 0.5, lo, teal + (yellow - teal) * np.clip(t * 2.0 - 1.0, 0, 1))
    return np.round(rgb).astype(np.uint8)
