"""Stage-2 refinement: superpixel features, forest classification, threshold calibration."""
from __future__ import annotations

import numpy as np

from .errors import InvalidArgument
from .forest import ForestModel, train_forest as _train_forest
from .metrics import dice
from .volume import BBox3, Volume

PERCENTILES = (20, 30, 40, 50, 60, 70, 80, 90)
STATS = ("mean", "variance", "skewness", "kurtosis") + tuple(f"p{q}" for q in PERCENTILES)
CHANNELS = ("ct", "hnn_i", "hnn_b")
FEATURE_NAMES = tuple(f"{c}_{s}" for c in CHANNELS for s in STATS) + ("x", "y", "z")
N_FEATURES = len(FEATURE_NAMES)  # 39
THRESHOLD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


def _data(v):
    return np.asarray(getattr(v, "data", v))


def group_stats(values, groups, n_groups) -> np.ndarray:
    """(n_groups, 12) statistics of ``values`` grouped by integer ids.

    Moments are population moments; kurtosis is the raw standardized
    fourth moment. Groups smaller than 4, or constant ones, get zero
    skewness and kurtosis. Percentiles interpolate linearly between order
    statistics.
    """
    v = np.asarray(values, dtype=np.float64)
    g = np.asarray(groups, dtype=np.int64)
    count = np.bincount(g, minlength=n_groups).astype(np.float64)
    if np.any(count == 0):
        raise InvalidArgument("empty superpixel")
    mean = np.bincount(g, v, n_groups) / count
    d = v - mean[g]
    m2 = np.bincount(g, d * d, n_groups) / count
    m3 = np.bincount(g, d**3, n_groups) / count
    m4 = np.bincount(g, d**4, n_groups) / count
    ok = (count >= 4) & (m2 > 0)
    safe = np.where(ok, m2, 1.0)
    skew = np.where(ok, m3 / safe**1.5, 0.0)
    kurt = np.where(ok, m4 / safe**2, 0.0)

    order = np.lexsort((v, g))
    sv = v[order]
    start = np.concatenate([[0], np.cumsum(count)[:-1]]).astype(np.int64)
    pct = []
    for q in PERCENTILES:
        pos = q / 100.0 * (count - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, count.astype(np.int64) - 1)
        frac = pos - lo
        a, b = sv[start + lo], sv[start + hi]
        pct.append(a + (b - a) * frac)
    return np.column_stack([mean, m2, skew, kurt] + pct)


def proposal_features(voxel_lists, ct, hnn_i, hnn_b, region: BBox3) -> np.ndarray:
    """Feature matrix (len(voxel_lists), 39) for region-local flat voxel index lists.

    ``ct``, ``hnn_i`` and ``hnn_b`` are either full-frame volumes (cropped to
    ``region`` here) or arrays already shaped like the region.
    """
    shape = region.shape
    chans = []
    for c in (ct, hnn_i, hnn_b):
        a = _data(c)
        if a.shape != shape:
            a = a[region.slices]
        chans.append(a.astype(np.float64).ravel())
    sizes = np.array([len(v) for v in voxel_lists], dtype=np.int64)
    if len(sizes) == 0:
        return np.zeros((0, N_FEATURES))
    if np.any(sizes == 0):
        raise InvalidArgument("empty superpixel")
    # sorted lists make the features independent of voxel order, bit for bit
    idx = np.concatenate([np.sort(np.asarray(v, dtype=np.int64)) for v in voxel_lists])
    if idx.min() < 0 or idx.max() >= int(np.prod(shape)):
        raise InvalidArgument("superpixel voxels fall outside the region")
    gid = np.repeat(np.arange(len(sizes)), sizes)
    blocks = [group_stats(ch[idx], gid, len(sizes)) for ch in chans]
    coords = np.unravel_index(idx, shape)
    for axis, ci in enumerate(coords):
        extent = shape[axis] - 1
        mean = np.bincount(gid, ci.astype(np.float64), len(sizes)) / sizes
        blocks.append((mean / extent if extent > 0 else np.full(len(sizes), 0.5))[:, None])
    return np.hstack(blocks)


def superpixel_features(sp, ct, hnn_i, hnn_b, region: BBox3) -> np.ndarray:
    """39-vector for one superpixel given as region-local flat voxel indices."""
    vox = np.asarray(getattr(sp, "voxels", sp))
    if vox.size == 0:
        raise InvalidArgument("empty superpixel")
    return proposal_features([vox], ct, hnn_i, hnn_b, region)[0]


def label_superpixels(voxel_lists, gt, region: BBox3) -> np.ndarray:
    """1 where at least half of the superpixel lies inside ``gt``."""
    g = _data(gt)
    if g.shape != region.shape:
        g = g[region.slices]
    g = g.astype(bool).ravel()
    return np.array([1 if 2 * np.count_nonzero(g[np.asarray(getattr(v, "voxels", v))]) >= len(getattr(v, "voxels", v)) else 0
                     for v in voxel_lists], dtype=np.uint8)


def train_forest(features, labels, trees: int = 50, seed: int = 0) -> ForestModel:
    return _train_forest(features, labels, trees=trees, seed=seed)


def positive_probability(model: ForestModel, features) -> np.ndarray:
    proba = model.predict_proba(features)
    hit = np.flatnonzero(model.classes == 1)
    return proba[:, hit[0]] if hit.size else np.zeros(len(proba))


def assemble_mask(voxel_lists, positive, region: BBox3, dims, spacing=(1.0, 1.0, 1.0)) -> Volume:
    local = np.zeros(int(np.prod(region.shape)), dtype=np.uint8)
    for vox, keep in zip(voxel_lists, positive):
        if keep:
            local[vox] = 1
    full = np.zeros(tuple(dims), dtype=np.uint8)
    full[region.slices] = local.reshape(region.shape)
    return Volume(full, spacing)


def predict_segmentation(model: ForestModel, voxel_lists, features, threshold: float, region: BBox3, dims, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Union of superpixels whose forest probability reaches ``threshold``; no post-processing."""
    prob = positive_probability(model, features) if len(voxel_lists) else np.zeros(0)
    return assemble_mask(voxel_lists, prob >= threshold, region, dims, spacing)


def calibrate_threshold(cases, grid=THRESHOLD_GRID) -> float:
    """Grid threshold maximising mean DSC over ``cases``; ties go to the lower value.

    Each case is ``(voxel_lists, probabilities, region, gt)``, with the
    probabilities being held-out (out-of-bag) forest scores.
    """
    cases = list(cases)
    if not cases:
        raise InvalidArgument("calibration needs at least one case")
    best_t, best = None, -1.0
    for t in grid:
        scores = []
        for vox, prob, region, gt in cases:
            g = _data(gt)
            mask = assemble_mask(vox, np.asarray(prob) >= t, region, g.shape)
            scores.append(dice(mask, g))
        mean = float(np.mean(scores))
        if mean > best:
            best_t, best = t, mean
    return float(best_t)
