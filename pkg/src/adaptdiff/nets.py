"""Conditional denoiser, residual segmentation U-Net, losses and training utilities.

Both networks share one residual U-Net skeleton.  The denoiser normalizes
through :class:`SpadeNorm` (mask-driven scale and shift) and adds a projected
sinusoidal step embedding in every block; the segmenter uses plain instance
normalization with a learned affine and ends in a sigmoid.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-5
CHECKPOINT_MAGIC = b"ADPT"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at batch {batch}")
        self.batch = batch
        self.value = value


@dataclass(frozen=True)
class ArchConfig:
    """Architecture descriptor; the parameter count is a pure function of it."""

    kind: str = "denoiser"  # "denoiser" | "segmenter"
    image_size: int = 64
    base_width: int = 32
    depth: int = 3
    time_dim: int = 64
    spade_hidden: int = 16
    spade_levels: str = "all"  # "all" | "decoder"
    dtype: str = "float32"

    def __post_init__(self):
        if self.kind not in ("denoiser", "segmenter"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.spade_levels not in ("all", "decoder"):
            raise ValueError(f"spade_levels must be 'all' or 'decoder', got {self.spade_levels!r}")
        if self.depth < 1 or self.base_width < 1:
            raise ValueError("depth and base_width must be positive")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.image_size % (2 ** self.depth):
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 2**depth = {2 ** self.depth}"
            )

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def time_embed(t, dim: int) -> torch.Tensor:
    """Interleaved sinusoidal encoding: slot 2k is sin(t w_k), 2k+1 is cos(t w_k).

    ``w_k = 10000 ** (-2k / dim)``.  Accepts a scalar or a 1-d tensor of steps.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64)
    k = torch.arange(dim // 2, dtype=torch.float64)
    freqs = torch.pow(torch.tensor(10000.0, dtype=torch.float64), -2.0 * k / dim)
    angles = t[..., None] * freqs
    out = torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1)
    return out.reshape(*t.shape, dim)


def normalize(x: torch.Tensor) -> torch.Tensor:
    """Zero mean, unit variance per sample and channel over spatial positions."""
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var.clamp_min(VAR_FLOOR))


class SpadeNorm(nn.Module):
    """Spatially-adaptive normalization driven by a binary mask.

    A two-layer 3x3 head maps the (nearest-resampled) mask to per-pixel
    ``gamma`` and ``beta``.  The output convolutions start at gamma = 1,
    beta = 0 so the block is a plain normalization at initialization.
    """

    def __init__(self, channels: int, hidden: int = 16):
        super().__init__()
        self.channels = channels
        self.shared = nn.Conv2d(1, hidden, 3, padding=1)
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)
        for conv, bias in ((self.gamma, 1.0), (self.beta, 0.0)):
            nn.init.zeros_(conv.weight)
            nn.init.constant_(conv.bias, bias)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"SPADE head built for {self.channels} channels, got {x.shape[1]}")
        if mask.shape[0] != x.shape[0]:
            raise ValueError("mask batch size does not match features")
        if mask.shape[-2:] != x.shape[-2:]:
            mask = F.interpolate(mask, size=x.shape[-2:], mode="nearest")
        a = F.silu(self.shared(mask))
        return self.gamma(a) * normalize(x) + self.beta(a)


def spade_modulate(features: torch.Tensor, mask: torch.Tensor, head: SpadeNorm) -> torch.Tensor:
    """Functional form of :class:`SpadeNorm` for ``(C, H, W)`` or batched features."""
    squeeze = features.dim() == 3
    if squeeze:
        features = features[None]
    mask = torch.as_tensor(mask, dtype=features.dtype)
    while mask.dim() < 4:
        mask = mask[None]
    out = head(features, mask.expand(features.shape[0], -1, -1, -1))
    return out[0] if squeeze else out


class InstanceNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))

    def forward(self, x, mask=None):
        return self.weight * normalize(x) + self.bias


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, spade_hidden: int | None, time_dim: int | None):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = SpadeNorm(cout, spade_hidden) if spade_hidden else InstanceNorm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = InstanceNorm(cout)
        self.time = nn.Linear(time_dim, cout) if time_dim else None
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, mask=None, temb=None):
        # the step shift goes after the norm, which would otherwise cancel it
        h = self.norm1(self.conv1(x), mask)
        if self.time is not None:
            h = h + self.time(temb)[:, :, None, None]
        h = F.silu(h)
        h = self.norm2(self.conv2(h))
        return F.silu(h + self.skip(x))


class _UNet(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.image_size = arch.image_size
        conditioned = arch.kind == "denoiser"
        tdim = arch.time_dim if conditioned else None
        enc_spade = arch.spade_hidden if conditioned and arch.spade_levels == "all" else None
        dec_spade = arch.spade_hidden if conditioned else None
        widths = [arch.base_width * 2 ** i for i in range(arch.depth + 1)]
        self.inc = nn.Conv2d(1, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        c = widths[0]
        for w in widths[:-1]:
            self.down.append(ResBlock(c, w, enc_spade, tdim))
            c = w
        self.mid = ResBlock(c, widths[-1], dec_spade, tdim)
        c = widths[-1]
        self.up = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(ResBlock(c + w, w, dec_spade, tdim))
            c = w
        self.out = nn.Conv2d(c, 1, 1)
        if conditioned:
            self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.to(arch.torch_dtype)

    def _check(self, x: torch.Tensor):
        step = 2 ** self.arch.depth
        h, w = x.shape[-2:]
        if h % step or w % step:
            raise ValueError(
                f"input {h}x{w} is not divisible by {step}; pad to "
                f"{math.ceil(h / step) * step}x{math.ceil(w / step) * step}"
            )

    def _run(self, x, mask=None, temb=None):
        self._check(x)
        h = self.inc(x)
        skips = []
        for block in self.down:
            h = block(h, mask, temb)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = self.mid(h, mask, temb)
        for block in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat((h, skips.pop()), dim=1), mask, temb)
        return self.out(h)


class Denoiser(_UNet):
    """Noise predictor ``eps_hat = f(x_t, mask, t)``."""

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if cond.shape != x_t.shape:
            raise ValueError(f"condition shape {tuple(cond.shape)} != input {tuple(x_t.shape)}")
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        temb = self.time_mlp(time_embed(t, self.arch.time_dim).to(x_t.dtype))
        return self._run(x_t, cond.to(x_t.dtype), temb)


class Segmenter(_UNet):
    """Residual U-Net returning per-pixel vessel probabilities."""

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self._run(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


def build_model(arch: ArchConfig, seed: int | None = None) -> _UNet:
    if seed is not None:
        torch.manual_seed(seed)
    return (Denoiser if arch.kind == "denoiser" else Segmenter)(arch)


def denoiser_forward(model: Denoiser, x_t, cond, t) -> torch.Tensor:
    """Batched or single-grid call of the denoiser."""
    single = torch.as_tensor(x_t).dim() == 2
    x = torch.as_tensor(x_t, dtype=model.arch.torch_dtype)
    c = torch.as_tensor(cond, dtype=model.arch.torch_dtype)
    if single:
        x, c = x[None, None], c[None, None]
    out = model(x, c, torch.as_tensor(t).reshape(-1).expand(x.shape[0]))
    return out[0, 0] if single else out


def seg_forward(model: Segmenter, x) -> torch.Tensor:
    single = torch.as_tensor(x).dim() == 2
    x = torch.as_tensor(x, dtype=model.arch.torch_dtype)
    if single:
        x = x[None, None]
    out = model(x)
    return out[0, 0] if single else out


# -- losses -------------------------------------------------------------------

PROB_EPS = 1e-7


def _check_target(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("target mask must contain only 0 and 1")


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """``1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s)``, averaged over the batch."""
    dims = tuple(range(1, pred.dim())) if pred.dim() > 2 else None
    if dims is None:
        inter, denom = (pred * target).sum(), pred.sum() + target.sum()
    else:
        inter, denom = (pred * target).sum(dims), pred.sum(dims) + target.sum(dims)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def dice_ce_loss(
    pred: torch.Tensor, target: torch.Tensor, dice_weight: float = 1.0, ce_weight: float = 1.0
) -> torch.Tensor:
    target = torch.as_tensor(target, dtype=pred.dtype)
    _check_target(pred, target)
    return dice_weight * soft_dice_loss(pred, target) + ce_weight * bce_loss(pred, target)


# -- training -------------------------------------------------------------------

Objective = Callable[[nn.Module, torch.Tensor, torch.Tensor, torch.Generator], torch.Tensor]


def segmentation_objective(dice_weight: float = 1.0, ce_weight: float = 1.0) -> Objective:
    def objective(model, x, y, generator):
        return dice_ce_loss(model(x), y, dice_weight, ce_weight)

    return objective


def diffusion_objective(schedule) -> Objective:
    from .diffusion import training_loss

    def objective(model, x, y, generator):
        return training_loss(model, x, y, schedule, generator)

    return objective


def train_epoch(
    model: nn.Module,
    data: tuple[torch.Tensor, torch.Tensor],
    objective: Objective,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
    batch_size: int = 16,
) -> float:
    """One shuffled pass over ``(images, masks)``; returns the mean batch loss."""
    images, masks = data
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    model.train()
    order = torch.randperm(n, generator=generator)
    total, batches = 0.0, 0
    for b, start in enumerate(range(0, n, batch_size)):
        idx = order[start:start + batch_size]
        loss = objective(model, images[idx], masks[idx], generator)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(b, value)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        total += value
        batches += 1
    return total / batches


def gradient_check(
    params: Sequence[torch.Tensor],
    loss_fn: Callable[[], torch.Tensor],
    n_checks: int = 50,
    epsilon: float = 1e-5,
    generator: torch.Generator | None = None,
    floor: float = 1e-7,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``loss_fn`` must be deterministic (freeze any random draws).  The relative
    error uses ``max(|a|, |n|, floor)`` as denominator so that entries whose
    true gradient vanishes are judged on absolute error.
    """
    params = [p for p in params if p.requires_grad]
    if any(p.dtype != torch.float64 for p in params):
        raise ValueError("gradient checks need float64 parameters")
    for p in params:
        p.grad = None
    loss_fn().backward()
    sizes = torch.tensor([p.numel() for p in params])
    total = int(sizes.sum())
    picks = torch.randperm(total, generator=generator)[: min(n_checks, total)]
    offsets = torch.cumsum(sizes, 0) - sizes
    worst = 0.0
    bad = []
    with torch.no_grad():
        for flat in picks.tolist():
            i = int(torch.searchsorted(offsets, torch.tensor(flat), right=True)) - 1
            p, j = params[i], flat - int(offsets[i])
            view = p.view(-1)
            analytic = float(p.grad.view(-1)[j])
            orig = float(view[j])
            view[j] = orig + epsilon
            up = float(loss_fn())
            view[j] = orig - epsilon
            down = float(loss_fn())
            view[j] = orig
            numeric = (up - down) / (2.0 * epsilon)
            if not (math.isfinite(numeric) and math.isfinite(analytic)):
                bad.append((i, j, analytic, numeric))
                continue
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
    if bad:
        raise FloatingPointError(f"non-finite gradients at (block, index, analytic, numeric): {bad}")
    return worst


# -- checkpoints ------------------------------------------------------------------


def save_model(path: str | os.PathLike, model: _UNet) -> None:
    """Write an ``ADPT`` checkpoint (layout documented in the README)."""
    buf = io.BytesIO()
    arch = json.dumps(asdict(model.arch), sort_keys=True).encode("utf-8")
    state = model.state_dict()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", tensor.dim()))
        buf.write(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        buf.write(tensor.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())
    from .gridio import atomic_write

    atomic_write(path, buf.getvalue())


def load_model(path: str | os.PathLike) -> _UNet:
    data = open(path, "rb").read()
    if len(data) < 10:
        raise ValueError(f"{path}: truncated checkpoint ({len(data)} bytes)")
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic at offset 0")
    version, alen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} at offset 4")
    try:
        return _parse_checkpoint(path, data, alen)
    except struct.error:
        raise ValueError(f"{path}: truncated checkpoint ({len(data)} bytes)") from None


def _parse_checkpoint(path, data: bytes, alen: int) -> _UNet:
    pos = 10
    arch = ArchConfig(**json.loads(data[pos:pos + alen].decode("utf-8")))
    pos += alen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(data):
            raise ValueError(f"{path}: truncated parameter block {name!r} at offset {pos}")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        state[name] = torch.from_numpy(arr.copy()).to(arch.torch_dtype)
    model = build_model(arch)
    model.load_state_dict(state)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
