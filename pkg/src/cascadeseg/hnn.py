"""Deeply supervised fully convolutional network with a learned fusion layer.

The same architecture serves the interior model (HNN-I) and the boundary
model (HNN-B). Each stage ``m`` runs at cumulative stride ``2**(m-1)``; its
1x1 side classifier produces an activation map that is upsampled back to the
input resolution with a fixed bilinear kernel. The fused map is
``sigmoid(sum_m h_m * A_m + b)``.
"""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgument, InvalidTrainingSet, NumericFailure

log = logging.getLogger(__name__)

EPS = 1e-7

_ACTIVATIONS = {"softplus": F.softplus, "relu": F.relu}
_POOLS = {"avg": F.avg_pool2d, "max": F.max_pool2d}


@dataclass(frozen=True)
class NetConfig:
    stages: int = 3
    channels: tuple = (8, 16, 16)
    depths: tuple = (2, 2, 2)
    kernel: int = 3
    alpha: tuple = (1.0, 1.0, 1.0)
    learning_rate: float = 1e-2
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    # smooth defaults keep the objective differentiable everywhere
    activation: str = "softplus"
    pooling: str = "avg"

    def __post_init__(self):
        for name in ("channels", "depths", "alpha"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not 2 <= self.stages <= 5:
            raise InvalidArgument("stages must be between 2 and 5")
        if len(self.channels) != self.stages or len(self.depths) != self.stages:
            raise InvalidArgument("channels/depths need one entry per stage")
        if len(self.alpha) != self.stages or any(a < 0 for a in self.alpha):
            raise InvalidArgument("alpha needs one non-negative weight per stage")
        if self.kernel % 2 != 1 or min(self.depths) < 1 or min(self.channels) < 1:
            raise InvalidArgument("kernel must be odd; depths and channels positive")
        if self.activation not in _ACTIVATIONS or self.pooling not in _POOLS:
            raise InvalidArgument(f"unknown activation/pooling {self.activation}/{self.pooling}")

    @property
    def strides(self) -> tuple:
        return tuple(2**m for m in range(self.stages))

    def replace(self, **kw) -> "NetConfig":
        d = asdict(self)
        d.update(kw)
        return NetConfig(**d)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d) -> "NetConfig":
        return cls(**d)


@dataclass
class HnnParams:
    """All learnable tensors, keyed in a fixed declaration order."""

    config: NetConfig
    tensors: "OrderedDict[str, torch.Tensor]"

    def group(self, name: str) -> str:
        """``W`` (stage convs), ``w`` (side classifiers) or ``h`` (fusion)."""
        return {"stage": "W", "side": "w", "fuse": "h"}[name.split(".")[0].rstrip("0123456789")]

    def to(self, dtype) -> "HnnParams":
        return HnnParams(self.config, OrderedDict((k, v.detach().to(dtype).clone()) for k, v in self.tensors.items()))

    def numpy(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.detach().cpu().numpy()) for k, v in self.tensors.items())

    def n_parameters(self) -> int:
        return sum(v.numel() for v in self.tensors.values())


@dataclass
class SidePrediction:
    fused: np.ndarray
    sides: list
    side_activations: list
    fused_activation: np.ndarray = field(repr=False, default=None)


def param_shapes(cfg: NetConfig) -> "OrderedDict[str, tuple]":
    shapes = OrderedDict()
    cin = 1
    for m in range(cfg.stages):
        c = cfg.channels[m]
        for d in range(cfg.depths[m]):
            shapes[f"stage{m}.conv{d}.weight"] = (c, cin, cfg.kernel, cfg.kernel)
            shapes[f"stage{m}.conv{d}.bias"] = (c,)
            cin = c
        shapes[f"side{m}.weight"] = (1, c, 1, 1)
        shapes[f"side{m}.bias"] = (1,)
    shapes["fuse.h"] = (cfg.stages,)
    shapes["fuse.bias"] = (1,)
    return shapes


def init_params(cfg: NetConfig, seed: int | None = None) -> HnnParams:
    gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name == "fuse.h":
            t = torch.full(shape, 1.0 / cfg.stages)
        elif name.endswith("bias"):
            t = torch.zeros(shape)
        elif name.startswith("side"):
            t = torch.randn(shape, generator=gen) * 0.1
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            t = torch.randn(shape, generator=gen) * math.sqrt(2.0 / fan_in)
        tensors[name] = t.float()
    return HnnParams(cfg, tensors)


def zero_params(cfg: NetConfig) -> HnnParams:
    return HnnParams(cfg, OrderedDict((k, torch.zeros(s)) for k, s in param_shapes(cfg).items()))


def _activations(t, cfg: NetConfig, x):
    """Side activations (upsampled) and fused activation for a batch ``x`` of shape (B,1,H,W)."""
    h_in, w_in = x.shape[-2:]
    stride = cfg.strides[-1]
    ph, pw = (-h_in) % stride, (-w_in) % stride
    if ph or pw:
        mode = "reflect" if ph < h_in and pw < w_in else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    feats = x
    acts = []
    pad = cfg.kernel // 2
    act_fn, pool_fn = _ACTIVATIONS[cfg.activation], _POOLS[cfg.pooling]
    for m in range(cfg.stages):
        if m > 0:
            feats = pool_fn(feats, 2)
        for d in range(cfg.depths[m]):
            feats = act_fn(F.conv2d(feats, t[f"stage{m}.conv{d}.weight"], t[f"stage{m}.conv{d}.bias"], padding=pad))
        a = F.conv2d(feats, t[f"side{m}.weight"], t[f"side{m}.bias"])
        if m > 0:
            a = F.interpolate(a, scale_factor=cfg.strides[m], mode="bilinear", align_corners=False)
        acts.append(a[..., :h_in, :w_in])
    stacked = torch.cat(acts, dim=1)
    fused = (stacked * t["fuse.h"].view(1, -1, 1, 1)).sum(dim=1, keepdim=True) + t["fuse.bias"]
    return acts, fused


def _as_batch(images, dtype):
    arr = np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(arr.astype(np.float64) / 255.0).to(dtype).unsqueeze(1)


def forward(params: HnnParams, image) -> SidePrediction:
    """Predict side and fused maps for one 2D u8 image."""
    return forward_batch(params, np.asarray(image)[None])[0]


def forward_batch(params: HnnParams, images) -> list:
    dtype = next(iter(params.tensors.values())).dtype
    with torch.no_grad():
        acts, fused = _activations(params.tensors, params.config, _as_batch(images, dtype))
    if not torch.isfinite(fused).all():
        raise NumericFailure("non-finite activations in forward pass")
    fused_np = fused[:, 0].numpy()
    acts_np = [a[:, 0].numpy() for a in acts]
    out = []
    for b in range(fused_np.shape[0]):
        side_a = [a[b] for a in acts_np]
        out.append(
            SidePrediction(
                fused=_sigmoid(fused_np[b]),
                sides=[_sigmoid(a) for a in side_a],
                side_activations=side_a,
                fused_activation=fused_np[b],
            )
        )
    return out


def _sigmoid(a):
    return (1.0 / (1.0 + np.exp(-a.astype(np.float64)))).astype(a.dtype)


def compute_beta(masks) -> float:
    """Fraction of negative pixels pooled over every training mask."""
    neg = pos = 0
    for m in masks:
        m = np.asarray(m).astype(bool)
        p = int(np.count_nonzero(m))
        pos += p
        neg += m.size - p
    if pos + neg == 0:
        raise InvalidTrainingSet("training set has no pixels")
    if pos == 0:
        raise InvalidTrainingSet("training set has no positive pixels")
    return neg / (pos + neg)


def side_loss(pred, gt, beta: float) -> float:
    """Class-balanced cross-entropy summed over pixels, in float64."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise InvalidArgument(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    p = np.clip(p, EPS, 1.0 - EPS)
    return float(-beta * np.log(p[g]).sum() - (1.0 - beta) * np.log1p(-p[~g]).sum())


def _balanced_ce(act, y, beta, clamp=True):
    if clamp:
        p = torch.sigmoid(act).clamp(EPS, 1.0 - EPS)
        return -(beta * y * torch.log(p) + (1.0 - beta) * (1.0 - y) * torch.log1p(-p)).sum()
    # logit form for training: no dead gradient on saturated mistakes
    return -(beta * y * F.logsigmoid(act) + (1.0 - beta) * (1.0 - y) * F.logsigmoid(-act)).sum()


def _objective_tensor(t, cfg, x, y, beta, clamp=True):
    acts, fused = _activations(t, cfg, x)
    total = _balanced_ce(fused, y, beta, clamp)
    for alpha, a in zip(cfg.alpha, acts):
        if alpha:
            total = total + alpha * _balanced_ce(a, y, beta, clamp)
    return total


def total_objective(params: HnnParams, sample, beta: float) -> float:
    """Weighted side losses plus the fused-layer loss for one ``(image, gt)`` pair."""
    image, gt = sample
    dtype = next(iter(params.tensors.values())).dtype
    y = torch.from_numpy(np.asarray(gt, dtype=np.float64)).to(dtype)[None, None]
    with torch.no_grad():
        value = _objective_tensor(params.tensors, params.config, _as_batch(image, dtype), y, beta)
    if not torch.isfinite(value):
        raise NumericFailure(f"objective is {value.item()}; check parameters for overflow")
    return float(value)


def objective_gradient(params: HnnParams, sample, beta: float):
    """Return ``(value, OrderedDict of gradients)`` by back-propagation."""
    image, gt = sample
    dtype = next(iter(params.tensors.values())).dtype
    t = OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in params.tensors.items())
    y = torch.from_numpy(np.asarray(gt, dtype=np.float64)).to(dtype)[None, None]
    value = _objective_tensor(t, params.config, _as_batch(image, dtype), y, beta)
    value.backward()
    return value.item(), OrderedDict((k, v.grad.detach().clone()) for k, v in t.items())


def grad_check(params: HnnParams, sample, beta: float, n_coords: int = 200, step: float = 1e-3, seed: int = 0) -> dict:
    """Compare back-propagated gradients with central differences in float64.

    Coordinates are drawn from the stage weights ``W``, side classifiers
    ``w`` and fusion weights ``h``; every fusion coordinate is always checked.
    """
    p64 = params.to(torch.float64)
    _, grads = objective_gradient(p64, sample, beta)
    rng = np.random.default_rng(seed)
    names = list(p64.tensors)
    by_group = {"W": [], "w": [], "h": []}
    for name in names:
        for i in range(p64.tensors[name].numel()):
            by_group[p64.group(name)].append((name, i))
    chosen = list(by_group["h"])
    rest = n_coords - len(chosen)
    n_side = min(len(by_group["w"]), max(rest // 4, 1))
    n_stage = max(rest - n_side, 1)
    for group, k in (("w", n_side), ("W", n_stage)):
        pool = by_group[group]
        idx = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
        chosen.extend(pool[i] for i in sorted(idx))

    worst = 0.0
    records = []
    for name, i in chosen:
        flat = p64.tensors[name].view(-1)
        orig = flat[i].item()
        flat[i] = orig + step
        up = total_objective(p64, sample, beta)
        flat[i] = orig - step
        down = total_objective(p64, sample, beta)
        flat[i] = orig
        numeric = (up - down) / (2 * step)
        analytic = grads[name].view(-1)[i].item()
        denom = max(abs(analytic), abs(numeric))
        rel = abs(analytic - numeric) / denom if denom > 0 else 0.0
        worst = max(worst, rel)
        records.append((name, i, analytic, numeric, rel))
    return {"max_rel_error": worst, "coords": records, "groups": {g: sum(1 for r in records if p64.group(r[0]) == g) for g in by_group}}


def _batches(shapes, batch_size, rng):
    """Shuffled minibatches whose members share an image shape."""
    buckets = OrderedDict()
    for i in rng.permutation(len(shapes)):
        buckets.setdefault(shapes[i], []).append(int(i))
    batches = []
    for members in buckets.values():
        batches.extend(members[s:s + batch_size] for s in range(0, len(members), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(cfg: NetConfig, beta: float, dataset, init: HnnParams | None = None, history: list | None = None) -> HnnParams:
    """SGD with momentum on the total objective.

    Each step divides the summed objective by ``2*beta*(1-beta)*pixels``.
    That only rescales the step size; it keeps the learning rate independent
    of image size and of how skewed the classes are.
    """
    if not dataset:
        raise InvalidTrainingSet("empty training set")
    if not 0.0 < beta < 1.0:
        raise InvalidArgument("beta must lie in (0, 1)")
    params = init.to(torch.float32) if init is not None else init_params(cfg)
    t = OrderedDict((k, v.clone().requires_grad_(True)) for k, v in params.tensors.items())
    opt = torch.optim.SGD(list(t.values()), lr=cfg.learning_rate, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    images = [np.asarray(im) for im, _ in dataset]
    labels = [np.asarray(gt) for _, gt in dataset]
    shapes = [im.shape for im in images]
    for epoch in range(cfg.epochs):
        total, pixels = 0.0, 0
        for batch in _batches(shapes, cfg.batch_size, rng):
            x = _as_batch(np.stack([images[i] for i in batch]), torch.float32)
            y = torch.from_numpy(np.stack([labels[i] for i in batch]).astype(np.float32)).unsqueeze(1)
            loss = _objective_tensor(t, cfg, x, y, beta, clamp=False)
            n = y.numel()
            opt.zero_grad()
            (loss / (2.0 * beta * (1.0 - beta) * n)).backward()
            opt.step()
            total += loss.item()
            pixels += n
        mean_loss = total / pixels
        if not math.isfinite(mean_loss):
            raise NumericFailure(f"training diverged in epoch {epoch + 1} (loss {mean_loss})")
        log.info("epoch %d/%d mean loss per pixel %.6f", epoch + 1, cfg.epochs, mean_loss)
        if history is not None:
            history.append(mean_loss)
    return HnnParams(cfg, OrderedDict((k, v.detach().clone()) for k, v in t.items()))
