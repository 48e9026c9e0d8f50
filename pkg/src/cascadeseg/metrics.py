"""Segmentation metrics, summary statistics and the Wilcoxon signed-rank test."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
from scipy import ndimage
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import DegenerateTest, InvalidArgument, UndefinedMetric
from .phantom import CROSS


def _binary(a):
    return np.asarray(getattr(a, "data", a)).astype(bool)


def overlap_metrics(a, b) -> dict:
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    union = na + nb - inter
    if union == 0:
        return {"dsc": 1.0, "jaccard": 1.0}
    return {"dsc": 2.0 * inter / (na + nb), "jaccard": inter / union}


def dice(a, b) -> float:
    return overlap_metrics(a, b)["dsc"]


def surface_voxels(mask) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (or outside the grid)."""
    mask = _binary(mask)
    return mask & ~ndimage.binary_erosion(mask, CROSS, border_value=0)


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> dict:
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedMetric("surface distance needs two non-empty masks")
    sa, sb = surface_voxels(a), surface_voxels(b)
    # exact EDT to the nearest surface voxel of the other mask
    to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    d_ab = to_b[sa]
    d_ba = to_a[sb]
    both = np.concatenate([d_ab, d_ba])
    return {"hausdorff_mm": float(both.max()), "avgdist_mm": float(both.mean())}


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise InvalidArgument("cannot summarize an empty sample")
    return {
        "mean": float(v.mean()),
        "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "median": float(np.percentile(v, 50)),
        "min": float(v.min()),
        "max": float(v.max()),
        "p10": float(np.percentile(v, 10)),
        "p90": float(np.percentile(v, 90)),
    }


def _signed_ranks(x, y):
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    if d.shape != np.shape(y) or d.ndim != 1:
        raise InvalidArgument("paired samples must be equal-length 1D sequences")
    d = d[d != 0]
    if d.size == 0:
        raise DegenerateTest("all paired differences are zero")
    if d.size < 5:
        raise InvalidArgument(f"need at least 5 non-zero differences, got {d.size}")
    ranks = rankdata(np.abs(d))  # average ranks for ties
    return d, ranks


def _exact_two_sided(ranks, w_plus) -> float:
    # Ranks are multiples of 1/2; count sign assignments by doubled rank sums.
    twice = np.rint(2 * ranks).astype(int)
    total = int(twice.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in twice:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    w2 = int(round(2 * w_plus))
    n_all = 2 ** len(ranks)
    lower = sum(counts[: w2 + 1])
    upper = sum(counts[w2:])
    p = 2 * Fraction(min(lower, upper), n_all)
    return float(min(p, Fraction(1)))


def wilcoxon_signed_rank(x, y, exact_max_n: int = 25) -> float:
    """Two-sided p-value; exact null distribution up to ``exact_max_n`` pairs."""
    d, ranks = _signed_ranks(x, y)
    w_plus = float(ranks[d > 0].sum())
    n = d.size
    if n <= exact_max_n:
        return _exact_two_sided(ranks, w_plus)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * (1.0 - ndtr(z))))
