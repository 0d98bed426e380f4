"""Rasterisation of digit scenes and the crop -> blur -> noise model."""

from __future__ import annotations

import math

import numpy as np

from .factors import REFERENCE_SIZE, FactorRanges, SceneParams, canonicalize, record_rng
from .glyphs import glyph_coverage

VALID_SIZES = (16, 32)
NOISE_STREAM = 1
FLANK_STREAM = 2


def _check_size(size: int) -> None:
    if size not in VALID_SIZES:
        raise ValueError(f"image size must be one of {VALID_SIZES}, got {size}")


def pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates (x, y), each (size, size)."""
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c, indexing="xy")


def _flank_layout(p: SceneParams) -> list[tuple[int, int]]:
    """(digit, horizontal slot) pairs; slot 0 is the centre digit."""
    if p.n_instances <= 1:
        return [(p.digit_class, 0)]
    rng = record_rng(p.seed, 0, FLANK_STREAM)
    left_first = bool(rng.integers(0, 2))
    classes = [int(c) for c in rng.integers(0, 10, size=2)]
    slots = [-1, 1] if p.n_instances >= 3 else ([-1] if left_first else [1])
    return [(p.digit_class, 0)] + [(classes[i], s) for i, s in enumerate(slots)]


def render_canvas(p: SceneParams, size: int) -> np.ndarray:
    """Untransformed scene: glyphs composited over a flat background, (3, H, W)."""
    xs, ys = pixel_grid(size)
    height = p.font_size * size
    spacing = 0.55 * height * 1.15
    centre = size / 2
    ink = np.zeros((size, size))
    for digit, slot in _flank_layout(p):
        cov = glyph_coverage(xs, ys, digit, p.font_type, centre + slot * spacing, centre, height)
        ink = np.maximum(ink, cov)
    fg = np.asarray(p.font_color, dtype=np.float64)[:, None, None]
    bg = np.asarray(p.bg_color, dtype=np.float64)[:, None, None]
    return bg * (1 - ink) + fg * ink


def affine_matrix(p: SceneParams) -> np.ndarray:
    """Forward 2x2 map (about the image centre): scale * rotation * x-shear."""
    th = math.radians(p.rotation_deg)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, p.shear], [0.0, 1.0]])
    return p.scale * rot @ shear


def bilinear_sample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill) -> np.ndarray:
    """Sample (C, H, W) at continuous pixel coordinates; outside samples take ``fill``.

    Coordinates follow the pixel-centre convention: pixel (i, j) covers
    [j, j+1) x [i, i+1) and its value sits at (j + 0.5, i + 0.5).
    """
    ch, h, w = img.shape
    fx, fy = sx - 0.5, sy - 0.5
    x0, y0 = np.floor(fx).astype(int), np.floor(fy).astype(int)
    ax, ay = fx - x0, fy - y0
    fill = np.asarray(fill, dtype=np.float64).reshape(ch, 1, 1) * np.ones((1,) + sx.shape)

    def tap(yi, xi):
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside[None], vals, fill)

    return ((1 - ay) * (1 - ax) * tap(y0, x0) + (1 - ay) * ax * tap(y0, x0 + 1)
            + ay * (1 - ax) * tap(y0 + 1, x0) + ay * ax * tap(y0 + 1, x0 + 1))


def _warp(canvas: np.ndarray, p: SceneParams, size: int) -> np.ndarray:
    k = size / REFERENCE_SIZE
    tx, ty = p.translation[0] * k, p.translation[1] * k
    if (p.rotation_deg == 0 and p.shear == 0 and p.scale == 1 and tx == 0 and ty == 0):
        return canvas
    inv = np.linalg.inv(affine_matrix(p))
    xs, ys = pixel_grid(size)
    c = size / 2
    dx, dy = xs - c - tx, ys - c - ty
    sx = inv[0, 0] * dx + inv[0, 1] * dy + c
    sy = inv[1, 0] * dx + inv[1, 1] * dy + c
    return bilinear_sample(canvas, sx, sy, p.fill_color)


def crop_resize(img: np.ndarray, ox: float, oy: float) -> np.ndarray:
    """Keep the window [ox, W) x [oy, H) and stretch it back to full size."""
    if ox == 0 and oy == 0:
        return img
    _, h, w = img.shape
    xs, ys = pixel_grid(w)
    sx = ox + xs * (w - ox) / w
    sy = oy + ys * (h - oy) / h
    sx = np.clip(sx, 0.5, w - 0.5)
    sy = np.clip(sy, 0.5, h - 0.5)
    return bilinear_sample(img, sx, sy, (0.0,) * img.shape[0])


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; sigma in pixels."""
    if sigma <= 0:
        return img
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = img
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect" if out.shape[axis] > r else "edge")
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for i, weight in enumerate(k):
            acc += weight * np.take(padded, range(i, i + n), axis=axis)
        out = acc
    return out


def apply_noise_model(img: np.ndarray, p: SceneParams, size: int) -> np.ndarray:
    """crop -> blur -> additive Gaussian noise (clamped to [0, 1])."""
    k = size / REFERENCE_SIZE
    out = crop_resize(img, p.crop_params[0] * k, p.crop_params[1] * k)
    out = gaussian_blur(out, p.blur_sigma * k)
    if p.noise_sigma > 0:
        rng = record_rng(p.seed, 0, NOISE_STREAM)
        out = np.clip(out + rng.normal(0.0, p.noise_sigma, size=out.shape), 0.0, 1.0)
    return out


def render_scene(p: SceneParams, size: int = 32, with_noise: bool = False) -> np.ndarray:
    """Render a scene to a (3, size, size) float32 image in [0, 1]."""
    _check_size(size)
    img = _warp(render_canvas(p, size), p, size)
    if with_noise:
        img = apply_noise_model(img, p, size)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def canonical_target(p: SceneParams, path, ranges: FactorRanges, size: int = 32) -> np.ndarray:
    """Clean render with every factor on ``path`` set to its canonical value.

    The empty path gives the clean image, i.e. the bypass target.
    """
    return render_scene(canonicalize(p, ranges, path), size, with_noise=False)
