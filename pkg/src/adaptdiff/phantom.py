"""Procedural vessel phantoms rendered in several synthetic "modalities".

A binary branching tree supplies the ground-truth mask; :func:`render` turns
the same mask into images whose appearance depends on a :class:`DomainStyle`.
Source and target domains therefore share one label space while differing in
polarity, contrast, noise and background.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class BranchingConfig:
    min_depth: int = 3
    max_depth: int = 5
    root_width: tuple[float, float] = (2.5, 3.5)
    root_length: tuple[float, float] = (0.30, 0.42)  # fraction of the canvas side
    length_decay: float = 0.75
    width_decay: float = 0.7
    branch_angle: float = 0.5  # radians, half-angle between siblings
    angle_jitter: float = 0.3
    min_width: float = 1.0
    min_fraction: float = 0.03
    max_fraction: float = 0.20
    max_retries: int = 10


@dataclass
class VesselTree:
    segments: list[tuple[tuple[float, float], tuple[float, float], float]]
    bounds: tuple[int, int]


def _clip_point(p, bounds):
    h, w = bounds
    return (float(np.clip(p[0], 0, h - 1)), float(np.clip(p[1], 0, w - 1)))


def rasterize(tree: VesselTree) -> np.ndarray:
    """Mark every pixel whose centre lies within ``width / 2`` of a segment."""
    h, w = tree.bounds
    mask = np.zeros((h, w), dtype=np.uint8)
    for (r0, c0), (r1, c1), width in tree.segments:
        rad = width / 2.0
        lo_r = max(int(np.floor(min(r0, r1) - rad)), 0)
        hi_r = min(int(np.ceil(max(r0, r1) + rad)) + 1, h)
        lo_c = max(int(np.floor(min(c0, c1) - rad)), 0)
        hi_c = min(int(np.ceil(max(c0, c1) + rad)) + 1, w)
        rr, cc = np.mgrid[lo_r:hi_r, lo_c:hi_c].astype(np.float64)
        dr, dc = r1 - r0, c1 - c0
        seg2 = dr * dr + dc * dc
        if seg2 == 0:
            u = np.zeros_like(rr)
        else:
            u = np.clip(((rr - r0) * dr + (cc - c0) * dc) / seg2, 0.0, 1.0)
        dist2 = (rr - (r0 + u * dr)) ** 2 + (cc - (c0 + u * dc)) ** 2
        mask[lo_r:hi_r, lo_c:hi_c] |= (dist2 <= rad * rad + 1e-9).astype(np.uint8)
    return mask


def _grow(rng, cfg: BranchingConfig, bounds, start, angle, length, width, depth, segments):
    end = _clip_point(
        (start[0] + length * np.sin(angle), start[1] + length * np.cos(angle)), bounds
    )
    segments.append((start, end, width))
    if depth <= 1:
        return
    child_w = max(width * cfg.width_decay, cfg.min_width)
    child_l = length * cfg.length_decay
    for side in (-1.0, 1.0):
        a = angle + side * cfg.branch_angle + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter)
        _grow(rng, cfg, bounds, end, a, child_l, child_w, depth - 1, segments)


def generate_tree(
    rng: np.random.Generator,
    bounds: tuple[int, int] = (64, 64),
    cfg: BranchingConfig = BranchingConfig(),
) -> tuple[VesselTree, np.ndarray]:
    """Grow one tree from a random point on the canvas border, inward.

    Retries up to ``cfg.max_retries`` times until the vessel fraction is
    inside ``[cfg.min_fraction, cfg.max_fraction]``.
    """
    h, w = bounds
    if h < 32 or w < 32:
        raise ValueError(f"phantom canvas must be at least 32x32, got {h}x{w}")
    for _ in range(cfg.max_retries):
        side = rng.integers(4)
        pos = rng.uniform(0.25, 0.75)
        start, angle = {
            0: ((0.0, pos * (w - 1)), np.pi / 2),
            1: ((h - 1.0, pos * (w - 1)), -np.pi / 2),
            2: ((pos * (h - 1), 0.0), 0.0),
            3: ((pos * (h - 1), w - 1.0), np.pi),
        }[int(side)]
        angle += rng.uniform(-0.3, 0.3)
        depth = int(rng.integers(cfg.min_depth, cfg.max_depth + 1))
        length = rng.uniform(*cfg.root_length) * min(h, w)
        width = rng.uniform(*cfg.root_width)
        segments: list = []
        _grow(rng, cfg, bounds, start, angle, length, width, depth, segments)
        tree = VesselTree(segments, (h, w))
        mask = rasterize(tree)
        if cfg.min_fraction <= mask.mean() <= cfg.max_fraction:
            return tree, mask
    raise RuntimeError(
        f"vessel fraction stayed outside [{cfg.min_fraction}, {cfg.max_fraction}] "
        f"after {cfg.max_retries} attempts"
    )


# -- rendering -------------------------------------------------------------------


@dataclass(frozen=True)
class DomainStyle:
    name: str
    vessel_polarity: str = "bright"  # "bright" (on dark) | "dark" (on bright)
    contrast: float = 1.0
    noise: str = "gaussian"  # "gaussian" | "speckle"
    noise_sigma: float = 0.0
    blur_radius: float = 0.0  # gaussian sigma in pixels
    background: float = 0.0  # flat level
    gradient: float = 0.0  # amplitude of a low-frequency background wave
    texture: float = 0.0  # amplitude of smoothed background clutter

    def __post_init__(self):
        if self.vessel_polarity not in ("bright", "dark"):
            raise ValueError(f"polarity must be 'bright' or 'dark', got {self.vessel_polarity!r}")
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError(f"contrast must lie in (0, 1], got {self.contrast}")
        if self.noise not in ("gaussian", "speckle"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        if min(self.noise_sigma, self.blur_radius, self.gradient, self.texture) < 0:
            raise ValueError("noise, blur, gradient and texture must be non-negative")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError("background level must lie in [0, 1]")


STYLES: dict[str, DomainStyle] = {
    # fundus-like: dark vessels on a bright, mildly uneven background
    "source": DomainStyle(
        "source", "dark", contrast=0.45, noise="gaussian", noise_sigma=0.03,
        blur_radius=0.6, background=0.75, gradient=0.06, texture=0.02,
    ),
    # OCT-A-like: bright vessels in heavy speckle
    "targetA": DomainStyle(
        "targetA", "bright", contrast=0.5, noise="speckle", noise_sigma=0.35,
        blur_radius=0.4, background=0.25, gradient=0.0, texture=0.1,
    ),
    # FA-like: bright, blurred vessels over a strong illumination gradient
    "targetB": DomainStyle(
        "targetB", "bright", contrast=0.5, noise="gaussian", noise_sigma=0.04,
        blur_radius=0.8, background=0.25, gradient=0.2, texture=0.04,
    ),
}


def get_style(name: str) -> DomainStyle:
    try:
        return STYLES[name]
    except KeyError:
        raise ValueError(f"unknown style {name!r}; known: {sorted(STYLES)}") from None


def render(mask: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    """Draw ``mask`` in the given style; returns float64 values in [0, 1]."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    bg = np.full((h, w), style.background)
    if style.gradient > 0:
        theta = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        rr, cc = np.mgrid[0:h, 0:w] / max(h, w)
        bg = bg + style.gradient * np.cos(2 * np.pi * 0.6 * (rr * np.sin(theta) + cc * np.cos(theta)) + phase)
    if style.texture > 0:
        clutter = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.5)
        clutter /= clutter.std() + 1e-12
        bg = bg + style.texture * clutter
    bg = np.clip(bg, 0.0, 1.0)
    if style.vessel_polarity == "bright":
        img = bg + style.contrast * (1.0 - bg) * mask
    else:
        img = bg - style.contrast * bg * mask
    if style.blur_radius > 0:
        img = ndimage.gaussian_filter(img, style.blur_radius, mode="nearest")
    if style.noise_sigma > 0:
        n = rng.standard_normal((h, w))
        img = img * (1.0 + style.noise_sigma * n) if style.noise == "speckle" else img + style.noise_sigma * n
    return np.clip(img, 0.0, 1.0)


def make_pairs(
    seed: int,
    n: int,
    style: DomainStyle,
    size: int = 64,
    cfg: BranchingConfig = BranchingConfig(),
    stream: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` (image, mask) pairs; item ``i`` is seeded from ``(seed, stream, i)``."""
    images = np.empty((n, size, size), dtype=np.float32)
    masks = np.empty((n, size, size), dtype=np.uint8)
    for i in range(n):
        rng = np.random.default_rng([seed, stream, i])
        _, m = generate_tree(rng, (size, size), cfg)
        masks[i] = m
        images[i] = render(m, style, rng)
    return images, masks


# -- label pollution ---------------------------------------------------------------


def pollute_mask(
    mask: np.ndarray,
    r_fp: float,
    r_fn: float,
    rng: np.random.Generator,
    blob_radius: tuple[float, float] = (1.5, 4.0),
    stroke_length: tuple[int, int] = (3, 10),
) -> np.ndarray:
    """Delete vessel blobs and draw spurious strokes.

    Exactly ``round(r_fn * |vessel|)`` vessel pixels are removed and
    ``round(r_fp * |vessel|)`` background pixels are added (both relative to
    the original vessel count); the last blob or stroke is truncated to hit
    the count.  Additions are capped by the available background.
    """
    for name, r in (("r_fp", r_fp), ("r_fn", r_fn)):
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {r}")
    mask = np.asarray(mask).astype(np.uint8)
    out = mask.copy()
    h, w = mask.shape
    n_vessel = int(mask.sum())
    n_remove = int(round(r_fn * n_vessel))
    n_add = min(int(round(r_fp * n_vessel)), int((mask == 0).sum()))

    removed = 0
    while removed < n_remove:
        vr, vc = np.nonzero(out & mask)
        k = rng.integers(len(vr))
        radius = rng.uniform(*blob_radius)
        d2 = (vr - vr[k]) ** 2 + (vc - vc[k]) ** 2
        near = np.flatnonzero(d2 <= radius * radius)
        near = near[np.argsort(d2[near], kind="stable")][: n_remove - removed]
        out[vr[near], vc[near]] = 0
        removed += len(near)

    added = np.zeros_like(mask, dtype=bool)
    count = 0
    while count < n_add:
        r0, c0 = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        length = rng.integers(stroke_length[0], stroke_length[1] + 1)
        ang = rng.uniform(0, np.pi)
        steps = np.linspace(0.0, 1.0, 2 * int(length) + 1)
        rr = np.clip(np.round(r0 + steps * length * np.sin(ang)), 0, h - 1).astype(int)
        cc = np.clip(np.round(c0 + steps * length * np.cos(ang)), 0, w - 1).astype(int)
        for r, c in dict.fromkeys(zip(rr.tolist(), cc.tolist())):
            if count >= n_add:
                break
            if mask[r, c] == 0 and not added[r, c]:
                added[r, c] = True
                count += 1
    out[added] = 1
    return out


def pollution_rates(original: np.ndarray, polluted: np.ndarray) -> tuple[float, float]:
    """Measured (false-positive, false-negative) counts relative to ``|original|``."""
    original = np.asarray(original).astype(bool)
    polluted = np.asarray(polluted).astype(bool)
    n = max(int(original.sum()), 1)
    return float((polluted & ~original).sum()) / n, float((original & ~polluted).sum()) / n


def with_style(style: DomainStyle, **changes) -> DomainStyle:
    return replace(style, **changes)
