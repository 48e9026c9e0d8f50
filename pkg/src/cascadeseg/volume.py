"""Volume container, intensity windowing, orthogonal slicing and cropping.

Arrays are indexed ``data[x, y, z]``. On disk the payload is written
x-fastest (Fortran order), see :mod:`cascadeseg.io`.

Slice conventions per view plane:

* ``AXIAL``    -- (x, y) images indexed by z, ``data[:, :, k]``
* ``CORONAL``  -- (x, z) images indexed by y, ``data[:, k, :]``
* ``SAGITTAL`` -- (y, z) images indexed by x, ``data[k, :, :]``
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

SOFT_TISSUE_WINDOW = (-160.0, 240.0)

_DTYPES = {np.dtype(np.int16): "i16", np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8"}


class ViewPlane(enum.Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def axis(self) -> int:
        """Index of the axis normal to the plane."""
        return {"axial": 2, "coronal": 1, "sagittal": 0}[self.value]

    @classmethod
    def parse(cls, name) -> "ViewPlane":
        if isinstance(name, cls):
            return name
        key = str(name).lower()
        aliases = {"ax": "axial", "co": "coronal", "sa": "sagittal"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise InvalidArgument(f"unknown view plane {name!r}") from None


PLANES = (ViewPlane.AXIAL, ViewPlane.CORONAL, ViewPlane.SAGITTAL)


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar grid with per-axis spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgument(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype not in _DTYPES:
            raise InvalidArgument(f"unsupported element type {data.dtype}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise InvalidArgument(f"spacing must be three positive numbers, got {self.spacing}")
        if data.dtype == np.float32 and data.size and (
            not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0
        ):
            raise InvalidArgument("probability volume elements must lie in [0, 1]")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)

    @property
    def dtype_code(self) -> str:
        return _DTYPES[self.data.dtype]

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data.view(np.uint8), other.data.view(np.uint8)))
        )

    __hash__ = None


@dataclass(frozen=True)
class BBox3:
    """Voxel box, ``lo`` inclusive and ``hi`` exclusive."""

    lo: tuple
    hi: tuple
    source: str = field(default="", compare=False)

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise InvalidArgument("bbox corners must have three components")
        if any(a >= b for a, b in zip(lo, hi)) or min(lo) < 0:
            raise InvalidArgument(f"invalid bbox lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> tuple:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def slices(self) -> tuple:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def fits(self, dims) -> bool:
        return all(b <= d for b, d in zip(self.hi, dims))

    @classmethod
    def full(cls, dims, source="full") -> "BBox3":
        return cls((0, 0, 0), tuple(dims), source)

    @classmethod
    def of_mask(cls, mask, pad=0, source="") -> "BBox3":
        """Tight box around the nonzero voxels, grown by ``pad`` and clamped."""
        mask = np.asarray(mask)
        idx = np.nonzero(mask)
        if len(idx[0]) == 0:
            raise InvalidArgument("cannot box an empty mask")
        lo = [max(int(i.min()) - pad, 0) for i in idx]
        hi = [min(int(i.max()) + 1 + pad, d) for i, d in zip(idx, mask.shape)]
        return cls(tuple(lo), tuple(hi), source)

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "source": self.source}

    @classmethod
    def from_json(cls, d) -> "BBox3":
        return cls(tuple(d["lo"]), tuple(d["hi"]), d.get("source", ""))


def window_rescale(vol: Volume, window=SOFT_TISSUE_WINDOW) -> Volume:
    """Map HU to u8 with a clamp window; rounding is half-up."""
    lo, hi = (float(w) for w in window)
    if not lo < hi:
        raise InvalidArgument(f"degenerate window {window}")
    v = vol.data.astype(np.float64)
    scaled = 255.0 * np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    return Volume(np.floor(scaled + 0.5).astype(np.uint8), vol.spacing)


def extract_slices(vol: Volume, plane) -> list:
    plane = ViewPlane.parse(plane)
    data = vol.data
    n = data.shape[plane.axis]
    return [np.take(data, k, axis=plane.axis) for k in range(n)]


def assemble_volume(slices, plane, dims, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Inverse of :func:`extract_slices`."""
    plane = ViewPlane.parse(plane)
    dims = tuple(int(d) for d in dims)
    axis = plane.axis
    in_plane = tuple(d for i, d in enumerate(dims) if i != axis)
    if len(slices) != dims[axis]:
        raise InvalidArgument(f"expected {dims[axis]} slices for {plane.value}, got {len(slices)}")
    for k, s in enumerate(slices):
        if np.shape(s) != in_plane:
            raise InvalidArgument(f"slice {k} has shape {np.shape(s)}, expected {in_plane}")
    return Volume(np.stack([np.asarray(s) for s in slices], axis=axis), spacing)


def crop(vol: Volume, box: BBox3) -> Volume:
    if not box.fits(vol.dims):
        raise InvalidArgument(f"box {box.lo}-{box.hi} exceeds volume dims {vol.dims}")
    return Volume(vol.data[box.slices], vol.spacing)


def paste(values, box: BBox3, dims, fill=0) -> np.ndarray:
    """Place a region-sized array into a zero full-volume frame."""
    out = np.full(tuple(dims), fill, dtype=np.asarray(values).dtype)
    out[box.slices] = values
    return out
