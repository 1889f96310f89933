"""Contrast preprocessing for source-domain images and pseudo-label binarization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClaheConfig:
    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 2.0  # multiple of the uniform bin height
    bins: int = 256

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ValueError("tile counts must be positive")
        if not self.clip_limit >= 1.0:
            raise ValueError(f"clip_limit must be >= 1, got {self.clip_limit}")
        if self.bins < 2:
            raise ValueError("need at least two histogram bins")


def green_channel(rgb: np.ndarray) -> np.ndarray:
    """Channel 1 of a channel-first ``(3, H, W)`` image."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {rgb.shape}")
    return rgb[1].copy()


def invert(img: np.ndarray) -> np.ndarray:
    return 1.0 - np.asarray(img)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strictly-greater thresholding to a uint8 mask."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(prob) > threshold).astype(np.uint8)


def _edges(n: int, tiles: int) -> np.ndarray:
    """Tile boundaries; the last tile absorbs the remainder."""
    step = n // tiles
    if step == 0:
        raise ValueError(f"{tiles} tiles do not fit in {n} pixels")
    e = np.arange(tiles + 1) * step
    e[-1] = n
    return e


def tile_mapping(values: np.ndarray, cfg: ClaheConfig) -> np.ndarray:
    """Transfer function (one output level per bin) for one tile.

    Tiles with fewer pixels than bins, or with a single occupied bin, have
    nothing to equalize and get the identity (bin centres).
    """
    bins = cfg.bins
    idx = np.minimum((values.ravel() * bins).astype(np.int64), bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    n = idx.size
    if n < bins or np.count_nonzero(hist) < 2:
        return (np.arange(bins) + 0.5) / bins
    if np.isfinite(cfg.clip_limit):
        limit = cfg.clip_limit * n / bins
        excess = np.maximum(hist - limit, 0.0).sum()
        hist = np.minimum(hist, limit) + excess / bins
    return np.cumsum(hist) / n


def clahe(img: np.ndarray, cfg: ClaheConfig = ClaheConfig()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of a [0, 1] image.

    Each tile's clipped histogram gives a monotone transfer function; every
    pixel is mapped by bilinear interpolation between the transfer functions
    of the four nearest tile centres (clamped at the borders).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("clahe expects a single-channel 2-d image")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError("clahe expects values in [0, 1]")
    h, w = img.shape
    ey, ex = _edges(h, cfg.tiles_y), _edges(w, cfg.tiles_x)
    maps = np.empty((cfg.tiles_y, cfg.tiles_x, cfg.bins))
    for i in range(cfg.tiles_y):
        for j in range(cfg.tiles_x):
            maps[i, j] = tile_mapping(img[ey[i]:ey[i + 1], ex[j]:ex[j + 1]], cfg)
    cy = (ey[:-1] + ey[1:] - 1) / 2.0
    cx = (ex[:-1] + ex[1:] - 1) / 2.0

    def _interp(coords, centres):
        k = np.clip(np.searchsorted(centres, coords, side="right") - 1, 0, len(centres) - 1)
        k1 = np.minimum(k + 1, len(centres) - 1)
        span = centres[k1] - centres[k]
        frac = np.where(span > 0, (coords - centres[k]) / np.where(span > 0, span, 1), 0.0)
        return k, k1, np.clip(frac, 0.0, 1.0)

    y0, y1, fy = _interp(np.arange(h), cy)
    x0, x1, fx = _interp(np.arange(w), cx)
    b = np.minimum((img * cfg.bins).astype(np.int64), cfg.bins - 1)
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    FY, FX = fy[:, None], fx[None, :]
    out = (
        (1 - FY) * (1 - FX) * maps[Y0, X0, b]
        + (1 - FY) * FX * maps[Y0, X1, b]
        + FY * (1 - FX) * maps[Y1, X0, b]
        + FY * FX * maps[Y1, X1, b]
    )
    return np.clip(out, 0.0, 1.0)


def prepare_source(img: np.ndarray, cfg: ClaheConfig) -> np.ndarray:
    """Source chain: CLAHE, then inversion so vessels are bright.

    RGB input goes through :func:`green_channel` first; phantoms are
    single-channel already.
    """
    img = np.asarray(img)
    if img.ndim == 3:
        img = green_channel(img)
    return invert(clahe(img, cfg))
