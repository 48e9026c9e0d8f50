"""Boundary-driven superpixels: watershed base partition and a two-level merge hierarchy.

This is a reproducible stand-in for multiscale combinatorial grouping. The
base partition floods the mean of the three boundary scales from its
regional minima; adjacent regions are then merged greedily by the mean
boundary strength along their shared border. Superpixels are 2D, computed
per axial slice.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.morphology import local_minima

from .errors import InvalidArgument
from .metrics import dice
from .volume import BBox3

_N4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_IN_PLANE = np.zeros((3, 3, 3), dtype=bool)
_IN_PLANE[:, :, 1] = ndimage.generate_binary_structure(2, 1)


def interface_band(mask) -> np.ndarray:
    """Boundary-network target: pixels on either side of the organ border within each axial slice.

    Inner shell plus outer shell under the in-plane 4-neighbourhood, so the
    ridge the network learns sits on the crack between organ and
    background, which is where the watershed cuts fall.
    """
    m = np.asarray(getattr(mask, "data", mask)).astype(bool)
    band = ndimage.binary_dilation(m, _IN_PLANE) & ~ndimage.binary_erosion(m, _IN_PLANE, border_value=0)
    return band.astype(np.uint8)


def watershed_partition(boundary, smooth_radius: int = 1, levels: int | None = None) -> np.ndarray:
    """Label map (1-based, int32) covering every pixel of a 2D boundary map.

    Seeds are the regional minima of the mean-filtered map; flooding runs on
    the unfiltered values. Flooding runs
    over pixel adjacencies rather than pixels: an unlabelled pixel joins the
    basin that reaches it through the weakest edge, with edge strength the
    mean of its two pixels. Cuts therefore fall between pixels, on the crest
    of the boundary ridge, and no pixel is left on a watershed line. Equal
    edges go to the basin with the lower seed value, then the lower label,
    then first come.
    """
    raw = np.asarray(boundary, dtype=np.float64)
    if raw.ndim != 2:
        raise InvalidArgument("watershed expects a 2D map")
    b = raw
    # radius r means r passes of the 3x3 mean filter; repeated passes never
    # add minima in practice, unlike a single wider box
    for _ in range(smooth_radius):
        b = ndimage.uniform_filter(b, size=3, mode="nearest")
        # drop summation noise so flat plateaus stay single minima
        b = np.round(b, 9) + 0.0
    if levels:
        b = np.floor(b * levels) / levels
    h, w = b.shape
    seeds = local_minima(b, connectivity=1, allow_borders=True)
    if not seeds.any():
        return np.ones((h, w), dtype=np.int32)
    labels, n = ndimage.label(seeds, structure=ndimage.generate_binary_structure(2, 1))
    seed_value = np.zeros(n + 1)
    seed_value[1:] = ndimage.minimum(b, labels, index=np.arange(1, n + 1))

    # seeds come from the smoothed map, flooding runs on the raw one
    flat = raw.ravel().tolist()
    lab = labels.ravel().tolist()
    heap = []
    counter = 0

    def push_neighbours(i, label):
        nonlocal counter
        y, x = divmod(i, w)
        sv = seed_value[label]
        for dy, dx in _N4:
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w:
                j = yy * w + xx
                if not lab[j]:
                    heapq.heappush(heap, ((flat[i] + flat[j]) * 0.5, sv, label, counter, j))
                    counter += 1

    for i in np.flatnonzero(labels.ravel()).tolist():
        push_neighbours(i, lab[i])
    while heap:
        _, _, label, _, j = heapq.heappop(heap)
        if lab[j]:
            continue
        lab[j] = label
        push_neighbours(j, label)
    return np.asarray(lab, dtype=np.int32).reshape(h, w)


@dataclass
class Hierarchy:
    """Level 1 is the base partition; level 2 merges edges below ``threshold``."""

    level1: np.ndarray
    level2: np.ndarray
    threshold: float
    # (kept label, absorbed label, weight) in merge order, down to one region
    merges: list = field(default_factory=list)


def _edge_stats(labels, strength):
    stats = {}
    for axis in (0, 1):
        a = labels if axis == 0 else labels.T
        s = strength if axis == 0 else strength.T
        la, lb = a[:-1].ravel(), a[1:].ravel()
        va = (s[:-1].ravel() + s[1:].ravel()) / 2.0
        diff = la != lb
        lo = np.minimum(la[diff], lb[diff])
        hi = np.maximum(la[diff], lb[diff])
        for u, v, val in zip(lo.tolist(), hi.tolist(), va[diff].tolist()):
            e = stats.get((u, v))
            if e is None:
                stats[(u, v)] = [val, 1]
            else:
                e[0] += val
                e[1] += 1
    return stats


def merge_hierarchy(base, scales, quantile: float = 25.0) -> Hierarchy:
    """Greedy region merging on the average of the three boundary scales.

    Edge weight is the mean strength over 4-adjacent pixel pairs straddling
    the border. Equal weights are merged in ``(min label, max label)`` order;
    the merged region keeps the smaller label.
    """
    base = np.asarray(base)
    maps = [np.asarray(s, dtype=np.float64) for s in scales]
    if any(m.shape != base.shape for m in maps):
        raise InvalidArgument("boundary scales must match the label map shape")
    same = all(np.array_equal(maps[0], m) for m in maps[1:])
    strength = maps[0] if same else np.mean(maps, axis=0)
    edges = _edge_stats(base, strength)
    if not edges:
        return Hierarchy(base.copy(), base.copy(), float("nan"), [])
    threshold = float(np.percentile([s / c for s, c in edges.values()], quantile))

    adj = {}
    for (u, v) in edges:
        adj.setdefault(u, set()).add(v)
        adj.setdefault(v, set()).add(u)
    heap = [(s / c, u, v) for (u, v), (s, c) in edges.items()]
    heapq.heapify(heap)
    parent = {}
    merges = []
    level2_parent = None
    while heap:
        wgt, u, v = heapq.heappop(heap)
        e = edges.get((u, v))
        if e is None or e[0] / e[1] != wgt:
            continue
        if level2_parent is None and not wgt < threshold:
            level2_parent = dict(parent)
        # absorb v into u (u < v)
        merges.append((u, v, wgt))
        parent[v] = u
        del edges[(u, v)]
        adj[u].discard(v)
        for x in adj.pop(v):
            if x == u:
                continue
            adj[x].discard(v)
            old = edges.pop((min(v, x), max(v, x)))
            key = (min(u, x), max(u, x))
            cur = edges.get(key)
            if cur is None:
                edges[key] = list(old)
                adj[u].add(x)
                adj[x].add(u)
            else:
                cur[0] += old[0]
                cur[1] += old[1]
            s, c = edges[key]
            heapq.heappush(heap, (s / c, key[0], key[1]))
    if level2_parent is None:
        level2_parent = dict(parent)
    return Hierarchy(base.copy(), _relabel(base, level2_parent), threshold, merges)


def _relabel(labels, parent):
    def root(x):
        while x in parent:
            x = parent[x]
        return x

    lut = np.arange(int(labels.max()) + 1)
    for x in parent:
        lut[x] = root(x)
    return lut[labels]


@dataclass
class SuperpixelPartition:
    """Label map over a candidate region; labels are unique across slices."""

    region: BBox3
    labels: np.ndarray
    level: int

    def regions(self) -> dict:
        """label -> flat (C-order) voxel indices within the region."""
        flat = self.labels.ravel()
        order = np.argsort(flat, kind="stable")
        uniq, starts = np.unique(flat[order], return_index=True)
        bounds = list(starts[1:]) + [flat.size]
        return {int(u): order[s:e] for u, s, e in zip(uniq, starts, bounds)}


@dataclass
class Proposal:
    level: int
    label: int
    voxels: np.ndarray


def slice_hierarchies(boundary_scales, smooth_radius: int = 1, quantile: float = 25.0, levels: int | None = None) -> list:
    """One hierarchy per axial slice of region-shaped 3D boundary maps (x, y, z)."""
    maps = [np.asarray(getattr(s, "data", s), dtype=np.float64) for s in boundary_scales]
    out = []
    for k in range(maps[0].shape[2]):
        per_slice = [m[:, :, k] for m in maps]
        base = watershed_partition(np.mean(per_slice, axis=0), smooth_radius, levels)
        out.append(merge_hierarchy(base, per_slice, quantile))
    return out


def build_partitions(boundary_scales, region: BBox3, smooth_radius: int = 1, quantile: float = 25.0, levels: int | None = None):
    """Level-1 and level-2 partitions of the region from per-slice hierarchies."""
    hier = slice_hierarchies(boundary_scales, smooth_radius, quantile, levels)
    shape = region.shape
    l1 = np.zeros(shape, dtype=np.uint32)
    l2 = np.zeros(shape, dtype=np.uint32)
    offset = 0
    for k, h in enumerate(hier):
        l1[:, :, k] = h.level1 + offset
        l2[:, :, k] = h.level2 + offset
        offset += int(h.level1.max())
    return SuperpixelPartition(region, l1, 1), SuperpixelPartition(region, l2, 2)


def proposals_first_two_levels(level1: SuperpixelPartition, level2: SuperpixelPartition) -> list:
    """Union of both levels' regions, dropping level-2 regions identical to a level-1 one."""
    props = [Proposal(1, lbl, vox) for lbl, vox in level1.regions().items()]
    seen = {(len(p.voxels), p.voxels.tobytes()) for p in props}
    for lbl, vox in level2.regions().items():
        key = (len(vox), vox.tobytes())
        if key not in seen:
            seen.add(key)
            props.append(Proposal(2, lbl, vox))
    return props


def check_partition(part: SuperpixelPartition) -> None:
    """Assert labels are disjoint and cover the region."""
    if part.labels.shape != part.region.shape:
        raise AssertionError("label map does not match the region shape")
    if np.any(part.labels == 0):
        raise AssertionError("unlabelled voxels in partition")
    total = sum(len(v) for v in part.regions().values())
    if total != part.labels.size:
        raise AssertionError("superpixel voxel lists do not partition the region")


def optimal_assignment(level1: SuperpixelPartition, gt, min_overlap: float = 0.5):
    """Label each base superpixel by majority overlap with ``gt``; return (mask, DSC)."""
    g = np.asarray(getattr(gt, "data", gt)).astype(bool)
    g_region = g[level1.region.slices].ravel()
    local = np.zeros(level1.labels.size, dtype=np.uint8)
    for vox in level1.regions().values():
        if g_region[vox].mean() >= min_overlap:
            local[vox] = 1
    mask = np.zeros(g.shape, dtype=np.uint8)
    mask[level1.region.slices] = local.reshape(level1.region.shape)
    return mask, dice(mask, g)
