"""Localization maps, sounding-region features and localization metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

#: IoU success thresholds used for AUC, 0.00 .. 1.00.
AUC_GRID = np.arange(101) / 100
F_BETA2 = 0.3


def raw_map(z_audio: Tensor, z_visual_spatial: Tensor) -> Tensor:
    """Cosine between each audio row and every spatial visual feature, ``b x h x w``."""
    b, d, h, w = z_visual_spatial.shape
    if z_audio.shape != (b, d):
        raise nd.ShapeError(f"localize: audio {z_audio.shape} vs visual {z_visual_spatial.shape}")
    a = nd.reshape(z_audio, (b, 1, d))
    v = nd.reshape(z_visual_spatial, (b, d, h * w))
    return nd.reshape(nd.matmul(a, v), (b, h, w))


def localize(z_audio: Tensor, z_visual_spatial: Tensor) -> Tensor:
    """Per-sample localization map scaled to [0, 1] (constant maps become 0.5)."""
    raw = raw_map(z_audio, z_visual_spatial)
    b, h, w = raw.shape
    return nd.reshape(nd.minmax_scale(nd.reshape(raw, (b, h * w))), (b, h, w))


def masked_features(loc_map: Tensor, z_visual_spatial: Tensor) -> Tensor:
    """Map-weighted spatial average of visual features, re-normalized to unit rows.

    The normalization absorbs the weight total, so only the direction of
    ``sum_p map(p) * z(p)`` matters. All-zero maps fall back to uniform
    weights (counted under ``WARNINGS["masked_features_zero_map"]``).
    """
    b, d, h, w = z_visual_spatial.shape
    if loc_map.shape != (b, h, w):
        raise nd.ShapeError(f"masked_features: map {loc_map.shape} vs features {z_visual_spatial.shape}")
    empty = loc_map.data.reshape(b, -1).sum(axis=1) <= 0
    if empty.any():
        nd.warn("masked_features_zero_map", int(empty.sum()))
        fill = np.broadcast_to(empty[:, None, None], (b, h, w)).astype(np.float64)
        loc_map = nd.add(loc_map, Tensor(fill))
    weighted = nd.broadcast_mul(nd.reshape(loc_map, (b, 1, h, w)), z_visual_spatial)
    return nd.l2_normalize(nd.avg_pool(weighted))


@dataclass
class MetricsReport:
    ciou: float
    auc: float
    miou: float
    fscore: float
    per_sample_iou: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k != "per_sample_iou"}


def _overlap_counts(pred: np.ndarray, gt: np.ndarray) -> tuple:
    b = pred.shape[0]
    pred = pred.reshape(b, -1)
    gt = gt.reshape(b, -1)
    return (pred & gt).sum(axis=1), (pred | gt).sum(axis=1)


def iou_per_sample(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """IoU of boolean masks ``b x h x w``; two empty masks score 1."""
    inter, union = _overlap_counts(pred, gt)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def evaluate(maps, gt_masks, loc_threshold: float = 0.5) -> MetricsReport:
    """Localization metrics for scaled maps against binary ground truth.

    CIoU is the fraction of samples with IoU >= 0.5, AUC the mean success rate
    over the IoU thresholds in :data:`AUC_GRID`, and F the pixel-level
    (micro-averaged) F-measure with beta^2 = 0.3. Everything is derived from
    integer pixel counts in exact rational arithmetic and rounded once.
    """
    if not 0 < loc_threshold < 1:
        raise ValueError(f"loc_threshold must lie in (0, 1), got {loc_threshold}")
    maps = maps.data if isinstance(maps, Tensor) else np.asarray(maps, dtype=np.float64)
    gt = np.asarray(gt_masks)
    if maps.shape != gt.shape:
        raise nd.ShapeError(f"evaluate: maps {maps.shape} vs masks {gt.shape}")
    gt = gt.astype(bool)
    pred = maps >= loc_threshold
    inter, union = _overlap_counts(pred, gt)
    n = len(inter)
    # IoU as exact ratios; an empty union counts as a perfect 1/1
    num = np.where(union == 0, 1, inter).astype(np.int64)
    den = np.where(union == 0, 1, union).astype(np.int64)

    hits = int((2 * num >= den).sum())
    grid = np.arange(len(AUC_GRID), dtype=np.int64)
    successes = int((100 * num[None, :] >= grid[:, None] * den[None, :]).sum())
    miou = sum((Fraction(int(a), int(c)) for a, c in zip(num, den)), Fraction(0)) / n

    tp, n_pred, n_gt = int(inter.sum()), int(pred.sum()), int(gt.sum())
    precision = Fraction(tp, n_pred) if n_pred else Fraction(0)
    recall = Fraction(tp, n_gt) if n_gt else Fraction(0)
    beta2 = Fraction(F_BETA2).limit_denominator(1000)
    denom = beta2 * precision + recall
    fscore = (1 + beta2) * precision * recall / denom if denom else Fraction(0)

    return MetricsReport(
        ciou=hits / n,
        auc=float(Fraction(successes, n * len(AUC_GRID))),
        miou=float(miou),
        fscore=float(fscore),
        per_sample_iou=[float(v) for v in num / den],
    )


def region_activation(maps: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Mean map value inside each sample's mask (NaN where the mask is empty)."""
    b = maps.shape[0]
    m = masks.reshape(b, -1).astype(bool)
    v = maps.reshape(b, -1)
    counts = m.sum(axis=1)
    sums = np.where(m, v, 0.0).sum(axis=1)
    return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
