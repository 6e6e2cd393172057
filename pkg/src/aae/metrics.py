"""Saliency evaluation: adaptive threshold, precision/recall, F-beta and MAE.

Pixel sums use ``math.fsum`` and image means are exact rational means, so
results are correctly rounded and independent of pixel or image order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

BETA_SQ = 0.3


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsRecord:
    precision: float
    recall: float
    f_beta: float
    mae: float
    n_images: int = 1

    def csv_row(self, split: str) -> str:
        return (f"{split},{self.n_images},{self.precision:.6f},{self.recall:.6f},"
                f"{self.f_beta:.6f},{self.mae:.6f}")


CSV_HEADER = "split,n_images,precision,recall,f_beta,mae"


def as_saliency(s) -> np.ndarray:
    """Clamp a map to [0, 1] as float64; accepts a 2-D grid or a 1 x H x W array."""
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"saliency map must be 2-D, got shape {arr.shape}")
    return np.clip(arr, 0.0, 1.0)


def as_mask(g) -> np.ndarray:
    arr = np.asarray(g)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    return (arr > 0.5).astype(np.uint8)


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} differ")


def adaptive_threshold(s) -> np.ndarray:
    """Binarize at min(1, 2 * mean); a pixel is foreground iff strictly above."""
    s = as_saliency(s)
    thresh = min(1.0, 2.0 * (math.fsum(s.ravel()) / s.size))
    return (s > thresh).astype(np.uint8)


def confusion(pred_binary, g) -> ConfusionCounts:
    p = np.asarray(pred_binary).astype(bool)
    t = as_mask(g).astype(bool)
    _check_shapes(p, t, "confusion")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(tp: int, other: int) -> float:
    denom = tp + other
    if denom == 0:
        return 0.0
    return tp / denom


def precision_recall(c: ConfusionCounts) -> tuple[float, float]:
    return _ratio(c.tp, c.fp), _ratio(c.tp, c.fn)


def f_measure(p: float, r: float, beta_sq: float = BETA_SQ) -> float:
    denom = beta_sq * p + r
    if denom == 0:
        return 0.0
    return (1.0 + beta_sq) * p * r / denom


def mae(s, g) -> float:
    s = as_saliency(s)
    g = as_mask(g)
    _check_shapes(s, g, "mae")
    return math.fsum(np.abs(g - s).ravel()) / s.size


def evaluate_pair(s, g, beta_sq: float = BETA_SQ) -> MetricsRecord:
    s = as_saliency(s)
    c = confusion(adaptive_threshold(s), g)
    p, r = precision_recall(c)
    return MetricsRecord(p, r, f_measure(p, r, beta_sq), mae(s, g), 1)


def evaluate_dataset(pairs: Iterable[tuple[object, object]], beta_sq: float = BETA_SQ) -> MetricsRecord:
    """Per-image metrics averaged over images (F-beta is the mean of per-image F-beta)."""
    records = [evaluate_pair(s, g, beta_sq) for s, g in pairs]
    return aggregate(records)


def aggregate(records: list[MetricsRecord]) -> MetricsRecord:
    if not records:
        raise ValueError("cannot aggregate an empty list of images")
    n = len(records)

    def mean(attr):
        # exact rational mean, rounded once: N copies of x give back x
        return float(sum(Fraction(getattr(r, attr)) for r in records) / n)

    return MetricsRecord(mean("precision"), mean("recall"), mean("f_beta"), mean("mae"), n)
