"""Synthetic CT phantoms with analytic organ masks, and fold splitting."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument
from .volume import Volume

CROSS = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    # organ centre as a fraction of each dim
    center_range: tuple = (0.35, 0.65)
    semi_axes_range: tuple = ((10.0, 16.0), (7.0, 11.0), (6.0, 9.0))
    lobe_amplitude: float = 0.15
    max_rotation: float = 0.6
    organ_hu: tuple = (30.0, 90.0)
    background_hu: float = -60.0
    distractor_count: int = 4
    distractor_radius: tuple = (2.0, 4.0)
    distractor_hu: tuple = ((10.0, 70.0), (90.0, 160.0))
    noise_sigma: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "semi_axes_range", tuple(tuple(map(float, r)) for r in self.semi_axes_range))
        object.__setattr__(self, "distractor_hu", tuple(tuple(map(float, r)) for r in self.distractor_hu))
        if min(self.dims) < 1 or len(self.dims) != 3:
            raise InvalidArgument(f"bad dims {self.dims}")
        if any(lo < 2 or hi < lo for lo, hi in self.semi_axes_range):
            raise InvalidArgument("semi-axes must be at least 2 voxels")
        if self.noise_sigma < 0:
            raise InvalidArgument("noise sigma must be >= 0")
        if self.organ_hu[0] > self.organ_hu[1]:
            raise InvalidArgument("organ HU range is reversed")

    def replace(self, **kw) -> "PhantomConfig":
        d = asdict(self)
        d.update(kw)
        return PhantomConfig(**d)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Case:
    id: str
    ct: Volume
    gt_interior: Volume
    gt_boundary: Volume
    meta: dict = field(default_factory=dict, compare=False)


def boundary_shell(mask) -> np.ndarray:
    """Inner morphological gradient with the 6-neighbour cross.

    Voxels on the volume edge count as having an exterior neighbour.
    """
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, CROSS, border_value=0)
    return (mask & ~eroded).astype(np.uint8)


def _organ_mask(cfg: PhantomConfig, rng) -> tuple:
    dims = np.array(cfg.dims, dtype=float)
    axes = np.array([rng.uniform(lo, hi) for lo, hi in cfg.semi_axes_range])
    reach = axes.max() * (1 + cfg.lobe_amplitude) + 1
    lo_c = np.maximum(dims * cfg.center_range[0], reach)
    hi_c = np.minimum(dims * cfg.center_range[1], dims - 1 - reach)
    if np.any(lo_c > hi_c):
        raise InvalidArgument(f"organ with semi-axes up to {reach:.1f} voxels cannot fit in dims {cfg.dims}")
    center = rng.uniform(lo_c, hi_c)
    theta = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    # low-order lobes: two angular harmonics with random phases
    k_az = rng.integers(2, 4)
    k_el = rng.integers(1, 3)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    x, y, z = np.meshgrid(*(np.arange(d) for d in cfg.dims), indexing="ij")
    dx, dy, dz = x - center[0], y - center[1], z - center[2]
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / axes[0]
    v = (-s * dx + c * dy) / axes[1]
    w = dz / axes[2]
    r = np.sqrt(u * u + v * v + w * w)
    az = np.arctan2(v, u)
    el = np.arctan2(w, np.hypot(u, v))
    radius = 1 + cfg.lobe_amplitude * np.sin(k_az * az + ph[0]) * np.cos(k_el * el + ph[1])
    mask = r <= radius
    return mask, center, axes


def generate_phantom(cfg: PhantomConfig, case_id: str | None = None) -> Case:
    rng = np.random.default_rng(cfg.seed)
    mask, center, axes = _organ_mask(cfg, rng)
    organ_value = rng.uniform(*cfg.organ_hu)
    ct = np.full(cfg.dims, cfg.background_hu, dtype=np.float64)
    # gentle intra-organ shading, still inside the organ HU range
    shade = rng.uniform(-1, 1, size=3)
    grid = np.meshgrid(*(np.arange(d) - c for d, c in zip(cfg.dims, center)), indexing="ij")
    ramp = sum(sv * g / a for sv, g, a in zip(shade, grid, axes)) / 3.0
    span = min(organ_value - cfg.organ_hu[0], cfg.organ_hu[1] - organ_value)
    ct[mask] = organ_value + span * np.clip(ramp[mask], -1, 1)

    keepout = ndimage.binary_dilation(mask, CROSS, iterations=3)
    placed = 0
    attempts = 0
    while placed < cfg.distractor_count and attempts < 200 * max(cfg.distractor_count, 1):
        attempts += 1
        rad = rng.uniform(*cfg.distractor_radius)
        pos = rng.uniform(rad + 1, np.array(cfg.dims) - rad - 1)
        blob = (grid[0] + center[0] - pos[0]) ** 2 + (grid[1] + center[1] - pos[1]) ** 2 + (
            grid[2] + center[2] - pos[2]
        ) ** 2 <= rad * rad
        if np.any(blob & keepout) or not blob.any():
            continue
        lo, hi = cfg.distractor_hu[placed % len(cfg.distractor_hu)]
        ct[blob] = rng.uniform(lo, hi)
        keepout |= ndimage.binary_dilation(blob, CROSS, iterations=2)
        placed += 1

    if cfg.noise_sigma > 0:
        ct = ct + rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)
    ct = np.clip(np.rint(ct), -1024, 3071).astype(np.int16)
    interior = mask.astype(np.uint8)
    return Case(
        id=case_id if case_id is not None else f"case{cfg.seed:04d}",
        ct=Volume(ct, cfg.spacing),
        gt_interior=Volume(interior, cfg.spacing),
        gt_boundary=Volume(boundary_shell(interior), cfg.spacing),
        meta={"center": [float(c) for c in center], "semi_axes": [float(a) for a in axes], "organ_hu": organ_value},
    )


def generate_corpus(n: int, seed: int = 0, cfg: PhantomConfig | None = None) -> list:
    """``n`` cases whose per-case seeds derive deterministically from ``seed``."""
    cfg = cfg or PhantomConfig()
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
    return [generate_phantom(cfg.replace(seed=int(s)), case_id=f"case{i:03d}") for i, s in enumerate(seeds)]


def split_folds(case_ids, k: int, seed=0) -> list:
    """Shuffle then deal into ``k`` folds; earlier folds take the remainder."""
    ids = list(case_ids)
    if k < 2:
        raise InvalidArgument("k must be at least 2")
    if k > len(ids):
        raise InvalidArgument(f"cannot split {len(ids)} cases into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    base, extra = divmod(len(ids), k)
    folds, start = [], 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        folds.append([ids[i] for i in order[start:start + size]])
        start += size
    return folds
