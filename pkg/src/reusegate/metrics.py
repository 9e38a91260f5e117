"""Segmentation quality measures: IoU, region J, boundary F, and the
consecutive-frame IoU histogram used to study how similar adjacent masks are.

Masks are 2-d boolean numpy arrays, True = foreground.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _as_mask(m):
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ValueError(f"masks are 2-d (h, w); got shape {arr.shape}")
    return arr.astype(bool)


def iou(a, b):
    """Intersection over union of two masks; 1.0 when both are empty."""
    a = _as_mask(a)
    b = _as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"iou: dimension mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def jaccard_mean(pred, gt, include_first=False):
    """Mean per-frame IoU over a sequence.

    Frame 0 is excluded by default since its mask is the given one.
    """
    if len(pred) != len(gt):
        raise ValueError(f"jaccard_mean: {len(pred)} predictions vs {len(gt)} truths")
    if not pred:
        raise ValueError("jaccard_mean: empty sequence")
    start = 0 if include_first else 1
    vals = [iou(p, g) for p, g in zip(pred[start:], gt[start:])]
    if not vals:
        raise ValueError("jaccard_mean: no evaluated frames")
    return float(np.mean(vals))


def default_boundary_tolerance(h, w):
    """Conventional tolerance: ceil(0.008 * image diagonal), in pixels."""
    return int(math.ceil(0.008 * math.hypot(h, w)))


def boundary_pixels(mask):
    """Foreground pixels with at least one 4-neighbor outside the mask.

    Pixels on the image border count as boundary (the outside is background).
    """
    m = _as_mask(mask)
    inner = np.ones_like(m)
    inner[1:, :] &= m[:-1, :]
    inner[:-1, :] &= m[1:, :]
    inner[:, 1:] &= m[:, :-1]
    inner[:, :-1] &= m[:, 1:]
    inner[0, :] = inner[-1, :] = False
    inner[:, 0] = inner[:, -1] = False
    return m & ~inner


def boundary_f(pred, gt, tol=None):
    """Boundary F-measure with a pixel tolerance.

    Precision is the fraction of predicted boundary pixels within ``tol``
    (Euclidean) of the truth boundary; recall is symmetric. Distances are
    exact brute-force pairs, which is fine at these image sizes.
    """
    pred = _as_mask(pred)
    gt = _as_mask(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"boundary_f: dimension mismatch {pred.shape} vs {gt.shape}")
    if tol is None:
        tol = default_boundary_tolerance(*pred.shape)
    if tol < 0:
        raise ValueError("boundary_f: tolerance must be >= 0")
    pb = np.argwhere(boundary_pixels(pred))
    gb = np.argwhere(boundary_pixels(gt))
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0
    d2 = ((pb[:, None, :] - gb[None, :, :]) ** 2).sum(axis=2)
    tol2 = float(tol) ** 2
    precision = float((d2.min(axis=1) <= tol2).mean())
    recall = float((d2.min(axis=0) <= tol2).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def jf_mean(j, f):
    """Mean of region and boundary scores, the usual combined accuracy."""
    if not (0.0 <= j <= 1.0 and 0.0 <= f <= 1.0):
        raise ValueError("jf_mean expects scores in [0, 1]")
    return (j + f) / 2.0


@dataclass
class IoUHistogram:
    """Binned consecutive-pair IoUs; bins partition [0, 1], top bin closed."""

    bin_width: float = 0.1
    counts: list = field(default_factory=list)
    total: int = 0

    @property
    def n_bins(self):
        return len(self.counts)

    def fractions(self):
        if self.total == 0:
            return [0.0] * self.n_bins
        return [c / self.total for c in self.counts]

    def edges(self):
        return [
            (i * self.bin_width, min(1.0, (i + 1) * self.bin_width))
            for i in range(self.n_bins)
        ]


def consecutive_iou_histogram(gt, bin_width=0.1):
    """Histogram of IoU between each consecutive ground-truth mask pair."""
    if len(gt) < 2:
        raise ValueError("consecutive_iou_histogram needs at least 2 masks")
    if not (0.0 < bin_width <= 1.0):
        raise ValueError("bin_width must be in (0, 1]")
    n_bins = int(math.ceil(1.0 / bin_width - 1e-12))
    counts = [0] * n_bins
    for prev, cur in zip(gt[:-1], gt[1:]):
        v = iou(prev, cur)
        idx = min(int(v / bin_width), n_bins - 1)
        counts[idx] += 1
    return IoUHistogram(bin_width=bin_width, counts=counts, total=len(gt) - 1)


def consecutive_ious(gt):
    """Raw IoU values for each consecutive pair, in order."""
    if len(gt) < 2:
        raise ValueError("need at least 2 masks")
    return [iou(prev, cur) for prev, cur in zip(gt[:-1], gt[1:])]


def pearson(xs, ys):
    """Pearson correlation of two equal-length sequences."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length sequences of size >= 2")
    sx = x.std()
    sy = y.std()
    if sx == 0.0 or sy == 0.0:
        raise ValueError("pearson undefined for constant sequences")
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))
