"""Stage-1 candidate region: threshold, erode, largest component, dilate, box."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, NoCandidate, UndefinedMetric
from .phantom import CROSS
from .volume import BBox3

FULL_26 = np.ones((3, 3, 3), dtype=bool)


def _data(vol):
    return np.asarray(getattr(vol, "data", vol))


def morphology(mask, op: str, radius: int = 1) -> np.ndarray:
    """Binary erosion/dilation with the 6-neighbour cross, repeated ``radius`` times."""
    if radius < 1:
        raise InvalidArgument("radius must be >= 1")
    m = _data(mask).astype(bool)
    if op == "erode":
        out = ndimage.binary_erosion(m, CROSS, iterations=radius, border_value=0)
    elif op == "dilate":
        out = ndimage.binary_dilation(m, CROSS, iterations=radius)
    else:
        raise InvalidArgument(f"unknown morphology op {op!r}")
    return out.astype(np.uint8)


def largest_component(mask, connectivity: int = 26) -> np.ndarray:
    """Keep the biggest connected component.

    Equal sizes resolve to the component whose smallest linear voxel index
    (x-fastest) is lowest. Labelling the transposed array makes scipy number
    components in exactly that scan order.
    """
    m = _data(mask).astype(bool)
    if connectivity == 26:
        structure = FULL_26
    elif connectivity == 6:
        structure = CROSS
    else:
        raise InvalidArgument("connectivity must be 6 or 26")
    labels, n = ndimage.label(m.T, structure)
    labels = labels.T
    if n == 0:
        return np.zeros(m.shape, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    return (labels == best).astype(np.uint8)


def candidate_region(prob, threshold: float = 0.5, pad: int = 5, erode_radius: int = 1):
    """Return ``(mask, box)`` for a pooled probability volume.

    Raises :class:`NoCandidate` when nothing reaches the threshold.
    """
    if not 0.0 < threshold < 1.0:
        raise InvalidArgument("threshold must lie in (0, 1)")
    p = _data(prob)
    hot = p >= threshold
    if not hot.any():
        raise NoCandidate(f"no voxel reaches probability {threshold}")
    eroded = morphology(hot, "erode", erode_radius)
    if eroded.any():
        core = largest_component(eroded, 26)
        mask = morphology(core, "dilate", erode_radius)
    else:
        mask = largest_component(hot, 26)
    box = BBox3.of_mask(mask, pad=pad, source="hnn-candidate")
    return mask, box


def bbox_stats(box: BBox3, gt) -> dict:
    g = _data(gt).astype(bool)
    total = int(np.count_nonzero(g))
    if total == 0:
        raise UndefinedMetric("recall is undefined for an empty ground truth")
    inside = int(np.count_nonzero(g[box.slices]))
    return {"recall": inside / total, "volume_reduction": 1.0 - box.size / g.size}
