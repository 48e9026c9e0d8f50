"""Regression-forest bounding-box localization baseline.

Every grid point votes for an organ box: a 9-output forest regresses the
offset to the box center and the two corner offsets from paired-cuboid
appearance features. A second forest accepts or rejects each vote from the
appearance at the voted center. Accepted votes are thinned by non-maximum
suppression and the candidate box holding most accepted votes wins.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NoCandidate
from .forest import ForestModel, train_forest, train_regression_forest
from .volume import BBox3

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchFeatureConfig:
    """Paired cuboid probes. Each row of ``probes`` is
    (offset_a xyz, size_a xyz, offset_b xyz, size_b xyz) in mm."""

    count: int = 32
    max_radius_mm: float = 24.0
    max_size_mm: float = 9.0
    seed: int = 7
    probes: tuple = field(default=None)

    def __post_init__(self):
        if self.count < 16:
            raise InvalidArgument("need at least 16 probe pairs")
        if self.probes is None:
            object.__setattr__(self, "probes", tuple(map(tuple, _random_probes(self))))
        if len(self.probes) != self.count:
            raise InvalidArgument("probe list does not match count")
        for p in self.probes:
            for off, size in ((p[0:3], p[3:6]), (p[6:9], p[9:12])):
                if any(abs(o) + s / 2 > self.max_radius_mm + 1e-9 for o, s in zip(off, size)):
                    raise InvalidArgument("probe exceeds the context radius")

    def to_json(self) -> dict:
        return {"count": self.count, "max_radius_mm": self.max_radius_mm, "max_size_mm": self.max_size_mm,
                "seed": self.seed, "probes": [list(p) for p in self.probes]}

    @classmethod
    def from_json(cls, d: dict) -> "PatchFeatureConfig":
        return cls(d["count"], d["max_radius_mm"], d["max_size_mm"], d["seed"], tuple(map(tuple, d["probes"])))


def _random_probes(cfg):
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for k in range(cfg.count):
        parts = []
        for cub in range(2):
            size = rng.uniform(1.0, cfg.max_size_mm, 3)
            # half of the pairs compare against the patch itself
            if cub == 1 and k % 2 == 0:
                off = np.zeros(3)
            else:
                reach = cfg.max_radius_mm - size / 2
                off = rng.uniform(-reach, reach)
            parts += [*np.round(off, 3), *np.round(size, 3)]
        rows.append(parts)
    return rows


class _Integral:
    """Summed-volume table over an edge-padded copy, so cuboid reads clamp to the border."""

    def __init__(self, data, pad):
        a = np.pad(np.asarray(data, dtype=np.float64), pad, mode="edge")
        s = np.zeros(tuple(n + 1 for n in a.shape))
        s[1:, 1:, 1:] = a.cumsum(0).cumsum(1).cumsum(2)
        self.s, self.pad = s, pad

    def box_mean(self, lo, hi):
        """Mean over voxels [lo, hi) given in unpadded coordinates, (n, 3) each."""
        lo = lo + self.pad
        hi = hi + self.pad
        s = self.s
        x0, y0, z0 = lo.T
        x1, y1, z1 = hi.T
        total = (s[x1, y1, z1] - s[x0, y1, z1] - s[x1, y0, z1] - s[x1, y1, z0]
                 + s[x0, y0, z1] + s[x0, y1, z0] + s[x1, y0, z0] - s[x0, y0, z0])
        return total / np.prod(hi - lo, axis=1)


def _probe_voxels(cfg, spacing):
    sp = np.asarray(spacing, dtype=np.float64)
    p = np.asarray(cfg.probes, dtype=np.float64)
    out = []
    for off, size in ((p[:, 0:3], p[:, 3:6]), (p[:, 6:9], p[:, 9:12])):
        ext = np.maximum(np.rint(size / sp), 1).astype(np.int64)
        start = np.rint(off / sp).astype(np.int64) - ext // 2
        out.append((start, ext))
    return out


def _reach(cfg, spacing):
    return int(np.ceil(cfg.max_radius_mm / min(spacing))) + 2


def patch_features(vol, points, cfg: PatchFeatureConfig, table: _Integral | None = None) -> np.ndarray:
    """(n, F) mean-HU differences of probe cuboid pairs around voxel ``points``."""
    data = np.asarray(getattr(vol, "data", vol))
    spacing = getattr(vol, "spacing", (1.0, 1.0, 1.0))
    pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
    if table is None:
        table = _Integral(data, _reach(cfg, spacing))
    hi_clamp = np.asarray(data.shape) - 1
    pts = np.clip(pts, 0, hi_clamp)
    (sa, ea), (sb, eb) = _probe_voxels(cfg, spacing)
    lim_lo = -table.pad
    lim_hi = np.asarray(data.shape) + table.pad
    feats = np.empty((len(pts), cfg.count))
    for k in range(cfg.count):
        loa = np.clip(pts + sa[k], lim_lo, lim_hi - ea[k])
        lob = np.clip(pts + sb[k], lim_lo, lim_hi - eb[k])
        feats[:, k] = table.box_mean(loa, loa + ea[k]) - table.box_mean(lob, lob + eb[k])
    return feats


@dataclass(frozen=True)
class LocalizerConfig:
    features: PatchFeatureConfig = field(default_factory=PatchFeatureConfig)
    stride: int = 4
    samples_per_case: int = 400
    trees: int = 20
    max_depth: int = 12
    min_samples_leaf: int = 5
    accept_radius_mm: float = 10.0
    accept_trees: int = 20
    accept_threshold: float = 0.5
    nms_radius_mm: float = 20.0
    refine_steps: int = 10
    seed: int = 0

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "features"}
        d["features"] = self.features.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LocalizerConfig":
        kw = dict(d)
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown localizer option(s): {sorted(unknown)}")
        if "features" in kw:
            kw["features"] = PatchFeatureConfig.from_json(kw["features"])
        return cls(**kw)


@dataclass
class Localizer:
    config: LocalizerConfig
    regressor: ForestModel
    classifier: ForestModel | None   # None when every training vote was accepted (or none was)
    constant_accept: float = 1.0


@dataclass
class BoxPrediction:
    center: np.ndarray        # mm
    lower_offset: np.ndarray  # mm
    upper_offset: np.ndarray  # mm
    score: float


def grid_points(dims, stride: int) -> np.ndarray:
    axes = [np.arange(stride // 2, n, stride) for n in dims]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return g


def _box_targets(mask, spacing):
    box = BBox3.of_mask(mask, pad=0)
    sp = np.asarray(spacing, dtype=np.float64)
    lo = np.asarray(box.lo) * sp
    hi = (np.asarray(box.hi) - 1) * sp
    center = (lo + hi) / 2.0
    return center, lo - center, hi - center


def train_localizer(cases, cfg: LocalizerConfig = LocalizerConfig()) -> Localizer:
    rng = np.random.default_rng(cfg.seed)
    X, Y, pos, centers, tables, owner = [], [], [], [], [], []
    used = 0
    for case in cases:
        ct, gt = case.ct, np.asarray(case.gt_interior.data)
        if not gt.any():
            log.warning("skipping %s: empty ground truth", case.id)
            continue
        sp = np.asarray(ct.spacing, dtype=np.float64)
        center, dlo, dhi = _box_targets(gt, sp)
        grid = grid_points(ct.dims, cfg.stride)
        take = rng.choice(len(grid), size=min(cfg.samples_per_case, len(grid)), replace=False)
        pts = grid[np.sort(take)]
        table = _Integral(ct.data, _reach(cfg.features, ct.spacing))
        X.append(patch_features(ct, pts, cfg.features, table))
        Y.append(np.hstack([center - pts * sp, np.tile(dlo, (len(pts), 1)), np.tile(dhi, (len(pts), 1))]))
        pos.append(pts * sp)
        centers.append(np.tile(center, (len(pts), 1)))
        tables.append((ct, table))
        owner.append(np.full(len(pts), used))
        used += 1
    if used < 1:
        raise InvalidArgument("no usable training cases")
    X, Y = np.vstack(X), np.vstack(Y)
    pos, centers, owner = np.vstack(pos), np.vstack(centers), np.concatenate(owner)
    reg, oob = train_regression_forest(X, Y, trees=cfg.trees, seed=cfg.seed, max_depth=cfg.max_depth,
                                       min_samples_leaf=cfg.min_samples_leaf)
    # accept/reject targets come from out-of-bag votes, so they look like test-time votes
    pred = np.where(np.isnan(oob), reg.predict(X), oob)
    voted = pos + pred[:, :3]
    accept = (np.linalg.norm(voted - centers, axis=1) <= cfg.accept_radius_mm).astype(np.uint8)
    feats = np.empty((len(X), cfg.features.count))
    for i, (ct, table) in enumerate(tables):
        rows = owner == i
        vox = np.rint(voted[rows] / np.asarray(ct.spacing)).astype(np.int64)
        feats[rows] = patch_features(ct, vox, cfg.features, table)
    if accept.min() == accept.max():
        return Localizer(cfg, reg, None, float(accept[0]))
    clf = train_forest(feats, accept, trees=cfg.accept_trees, seed=cfg.seed + 1)
    return Localizer(cfg, reg, clf)


def _accept_scores(model: Localizer, feats):
    if model.classifier is None:
        return np.full(len(feats), model.constant_accept)
    proba = model.classifier.predict_proba(feats)
    hit = np.flatnonzero(model.classifier.classes == 1)
    return proba[:, hit[0]] if hit.size else np.zeros(len(feats))


def predict_bbox(model: Localizer, vol):
    """Return ``(BBox3, diagnostics)``; raises :class:`NoCandidate` if every vote is rejected."""
    cfg = model.config
    sp = np.asarray(vol.spacing, dtype=np.float64)
    dims = np.asarray(vol.dims)
    table = _Integral(vol.data, _reach(cfg.features, vol.spacing))
    grid = grid_points(vol.dims, cfg.stride)
    out = model.regressor.predict(patch_features(vol, grid, cfg.features, table))
    centers = grid * sp + out[:, :3]
    vox = np.clip(np.rint(centers / sp).astype(np.int64), 0, dims - 1)
    score = _accept_scores(model, patch_features(vol, vox, cfg.features, table))
    acc = np.flatnonzero(score >= cfg.accept_threshold)
    if acc.size == 0:
        raise NoCandidate("every regression vote was rejected")
    # non-maximum suppression by score; equal scores keep grid order
    order = acc[np.lexsort((acc, -score[acc]))]
    keep = []
    alive = np.ones(len(order), dtype=bool)
    for i, idx in enumerate(order):
        if not alive[i]:
            continue
        keep.append(idx)
        d = np.linalg.norm(centers[order] - centers[idx], axis=1)
        alive &= d > cfg.nms_radius_mm
    best, best_key, members = None, None, None
    for idx in keep:
        lo, hi = centers[idx] + out[idx, 3:6], centers[idx] + out[idx, 6:9]
        inside = acc[np.all((centers[acc] >= lo) & (centers[acc] <= hi), axis=1)]
        key = (len(inside), float(score[inside].sum()))
        if best_key is None or key > best_key:
            best, best_key, members = idx, key, inside
    if members.size == 0:
        members = np.array([best])
    # the winning box becomes the mean vote of the accepted predictions it
    # contains, re-collected until stable so one stray winner vote cannot
    # truncate the consensus
    for _ in range(cfg.refine_steps):
        c = centers[members].mean(axis=0)
        lo_off = out[members, 3:6].mean(axis=0)
        hi_off = out[members, 6:9].mean(axis=0)
        inside = acc[np.all((centers[acc] >= c + lo_off) & (centers[acc] <= c + hi_off), axis=1)]
        if inside.size == 0 or np.array_equal(inside, members):
            break
        members = inside
    c = centers[members].mean(axis=0)
    lo_off = out[members, 3:6].mean(axis=0)
    hi_off = out[members, 6:9].mean(axis=0)
    lo = np.clip(np.floor((c + lo_off) / sp + 1e-9).astype(int), 0, dims - 1)
    hi = np.clip(np.ceil((c + hi_off) / sp - 1e-9).astype(int) + 1, 1, dims)
    hi = np.maximum(hi, lo + 1)
    box = BBox3(tuple(int(v) for v in lo), tuple(int(v) for v in hi), "regforest")
    pred = BoxPrediction(c, lo_off, hi_off, float(score[members].mean()))
    diag = {
        "votes": int(len(grid)),
        "accepted": int(acc.size),
        "nms_kept": len(keep),
        "winner_count": int(best_key[0]),
        "winner_score_sum": best_key[1],
        "center_mm": [float(v) for v in c],
        "score": pred.score,
    }
    return box, diag
