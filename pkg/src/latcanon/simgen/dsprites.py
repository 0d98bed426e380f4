"""dSprites-style renderer: one white shape on black, five independent factors."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .factors import record_rng

SHAPES = ("square", "ellipse", "heart")
FACTORS = ("shape", "scale", "rotation", "x_pos", "y_pos")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class DspriteParams:
    shape: int
    scale: float
    rotation: float
    x_pos: float
    y_pos: float


@dataclass(frozen=True)
class DspriteRanges:
    scale: tuple[float, float] = (0.5, 1.0)
    rotation: tuple[float, float] = (0.0, 360.0)
    x_pos: tuple[float, float] = (0.0, 1.0)
    y_pos: tuple[float, float] = (0.0, 1.0)
    canonical: tuple = (0, 0.75, 0.0, 0.5, 0.5)
    # fraction of the image kept free at each border by the position range
    margin: float = 0.3

    def validate(self) -> None:
        for name in ("scale", "rotation", "x_pos", "y_pos"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"empty range for {name}")


def sample_dsprite(ranges: DspriteRanges, seed: int, index: int) -> DspriteParams:
    ranges.validate()
    rng = record_rng(seed, index)
    return DspriteParams(
        shape=int(rng.integers(0, len(SHAPES))),
        scale=float(rng.uniform(*ranges.scale)),
        rotation=float(rng.uniform(*ranges.rotation)),
        x_pos=float(rng.uniform(*ranges.x_pos)),
        y_pos=float(rng.uniform(*ranges.y_pos)),
    )


def canonicalize_dsprite(p: DspriteParams, ranges: DspriteRanges, factor_ids) -> DspriteParams:
    out = p
    for j in factor_ids:
        if not 0 <= j < len(FACTORS):
            raise ValueError(f"canonicalizer id {j} out of range [0, {len(FACTORS)})")
        out = replace(out, **{FACTORS[j]: ranges.canonical[j]})
    return out


def _cos_sin(deg: float) -> tuple[float, float]:
    # exact values at multiples of 90 degrees keep 4-fold symmetric shapes bit-symmetric
    d = deg % 360.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if d in exact:
        return exact[d]
    r = math.radians(d)
    return math.cos(r), math.sin(r)


def _inside(shape: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership in the unit-sized shape; v points up."""
    if shape == 0:
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if shape == 1:
        return (u / 1.0) ** 2 + (v / 0.5) ** 2 <= 1.0
    if shape == 2:
        x, y = u * 1.2, v * 1.2 + 0.1
        return (x * x + y * y - 1) ** 3 - x * x * y ** 3 <= 0
    raise ValueError(f"unknown shape index {shape}")


def render_dsprite(p: DspriteParams, size: int = 16, ranges: DspriteRanges | None = None) -> np.ndarray:
    """Anti-aliased (1, size, size) float32 image by 4x4 supersampling."""
    ranges = ranges or DspriteRanges()
    m = ranges.margin * size
    cx = m + p.x_pos * (size - 2 * m)
    cy = m + p.y_pos * (size - 2 * m)
    half = 0.3 * size * p.scale
    offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    grid = (np.arange(size)[:, None] + offs[None, :]).reshape(-1)
    xs, ys = np.meshgrid(grid, grid, indexing="xy")
    c, s = _cos_sin(p.rotation)
    dx, dy = (xs - cx) / half, -(ys - cy) / half
    # rotate the sample points by -rotation so the shape appears rotated by +rotation
    u = c * dx + s * dy
    v = -s * dx + c * dy
    hit = _inside(p.shape, u, v).astype(np.float64)
    img = hit.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    return img[None].astype(np.float32)
