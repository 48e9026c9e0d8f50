"""Per-view slice inference and voxelwise pooling of the three view volumes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, NumericFailure
from .hnn import HnnParams, forward_batch
from .volume import ViewPlane, Volume, assemble_volume, extract_slices


@dataclass(frozen=True)
class PoolingMode:
    """``single``, ``mean_pair``, ``mean_all``, ``max_all`` or ``mean_max``."""

    kind: str
    planes: tuple = ()

    ARITY = {"single": 1, "mean_pair": 2, "mean_all": 3, "max_all": 3, "mean_max": 3}

    def __post_init__(self):
        if self.kind not in self.ARITY:
            raise InvalidArgument(f"unknown pooling mode {self.kind!r}")

    @property
    def arity(self) -> int:
        return self.ARITY[self.kind]

    @classmethod
    def parse(cls, text: str) -> "PoolingMode":
        """Accepts ``meanmax``, ``mean``, ``max``, ``ax``, ``ax+co`` and the canonical names."""
        key = text.lower().replace("-", "_")
        aliases = {"meanmax": "mean_max", "mean": "mean_all", "max": "max_all"}
        if key in aliases or key in cls.ARITY and key not in ("single", "mean_pair"):
            return cls(aliases.get(key, key))
        parts = key.split("+")
        planes = tuple(ViewPlane.parse(p) for p in parts)
        if len(planes) == 1:
            return cls("single", planes)
        if len(planes) == 2:
            return cls("mean_pair", planes)
        raise InvalidArgument(f"cannot parse pooling mode {text!r}")

    def label(self) -> str:
        if self.planes:
            return "+".join(p.value[:2] for p in self.planes)
        return self.kind


MEAN_MAX = PoolingMode("mean_max")


def predict_volume(params: HnnParams, vol: Volume, plane, batch_size: int = 64, output: str = "fused") -> Volume:
    """Run the network on every slice of ``plane`` and restack the maps.

    ``output`` is ``"fused"`` or ``"side<m>"`` (1-based side index).
    """
    plane = ViewPlane.parse(plane)
    slices = extract_slices(vol, plane)
    maps = []
    for start in range(0, len(slices), batch_size):
        chunk = np.stack(slices[start:start + batch_size])
        try:
            preds = forward_batch(params, chunk)
        except NumericFailure as exc:
            raise NumericFailure(f"{exc} (slices {start}..{start + len(chunk) - 1}, {plane.value})") from exc
        for p in preds:
            maps.append(p.fused if output == "fused" else p.sides[int(output[4:]) - 1])
    probs = [np.clip(m, 0.0, 1.0).astype(np.float32) for m in maps]
    return assemble_volume(probs, plane, vol.dims, vol.spacing)


def predict_volume_outputs(params: HnnParams, vol: Volume, plane, outputs, batch_size: int = 64) -> dict:
    """Like :func:`predict_volume` but collects several outputs in one pass."""
    plane = ViewPlane.parse(plane)
    slices = extract_slices(vol, plane)
    collected = {o: [] for o in outputs}
    for start in range(0, len(slices), batch_size):
        for p in forward_batch(params, np.stack(slices[start:start + batch_size])):
            for o in outputs:
                m = p.fused if o == "fused" else p.sides[int(o[4:]) - 1]
                collected[o].append(np.clip(m, 0.0, 1.0).astype(np.float32))
    return {o: assemble_volume(v, plane, vol.dims, vol.spacing) for o, v in collected.items()}


def pool_views(maps, mode: PoolingMode) -> Volume:
    maps = list(maps)
    if len(maps) != mode.arity:
        raise InvalidArgument(f"{mode.kind} pooling takes {mode.arity} maps, got {len(maps)}")
    dims = maps[0].dims
    if any(m.dims != dims for m in maps):
        raise InvalidArgument("pooled maps must share dims")
    stack = np.stack([m.data for m in maps]).astype(np.float32)
    if mode.kind == "single":
        out = stack[0]
    elif mode.kind in ("mean_pair", "mean_all"):
        # a fixed summation order keeps the mean exactly commutative
        out = np.sort(stack, axis=0).mean(axis=0, dtype=np.float64)
    elif mode.kind == "max_all":
        out = stack.max(axis=0)
    else:
        top = np.sort(stack, axis=0)
        out = (top[1].astype(np.float64) + top[2]) / 2.0
    return Volume(np.clip(out, 0.0, 1.0).astype(np.float32), maps[0].spacing)
