"""Factor ranges, scene parameters, and per-record sampling for the digit simulator."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

GENERATOR_VERSION = 1

# Supervised factors, in canonicalizer-index order.
SUPERVISED = ("font_color", "bg_color", "font_size", "font_type", "rotation", "shear")
N_FONTS = 6
HELD_OUT_FONT = 6

# Distances (translation, crop, blur) are given in pixels of a 32x32 reference
# image and scaled to the rendered size.
REFERENCE_SIZE = 32

Interval = tuple[float, float]
RGBRange = tuple[Interval, Interval, Interval]


def record_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, index, stream); order independent."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream), int(index)])))


@dataclass(frozen=True)
class SceneParams:
    digit_class: int
    font_color: tuple[float, float, float]
    bg_color: tuple[float, float, float]
    font_size: float
    font_type: int
    rotation_deg: float
    shear: float
    fill_color: tuple[float, float, float]
    scale: float
    n_instances: int
    translation: tuple[float, float]
    noise_sigma: float
    blur_sigma: float
    crop_params: tuple[float, float]
    seed: int

    def factor(self, name: str):
        return getattr(self, _FIELD_OF[name])

    def with_factor(self, name: str, value) -> "SceneParams":
        return replace(self, **{_FIELD_OF[name]: value})


_FIELD_OF = {
    "font_color": "font_color",
    "bg_color": "bg_color",
    "font_size": "font_size",
    "font_type": "font_type",
    "rotation": "rotation_deg",
    "shear": "shear",
}

_RGB = ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0))


@dataclass(frozen=True)
class FactorRanges:
    """Per-factor sampling ranges plus the dataset-wide canonical values.

    None of these numbers come from a published table; they are plausible
    defaults for 32x32 street-number-like digits.
    """

    font_color: RGBRange = _RGB
    bg_color: RGBRange = _RGB
    fill_color: RGBRange = _RGB
    min_contrast: float = 0.2
    font_size: Interval = (0.5, 0.9)
    font_types: tuple[int, ...] = tuple(range(N_FONTS))
    rotation: Interval = (-30.0, 30.0)
    shear: Interval = (-0.3, 0.3)
    scale: Interval = (0.8, 1.2)
    n_instances: tuple[int, int] = (1, 3)
    translation: Interval = (-3.0, 3.0)
    noise_sigma: Interval = (0.0, 0.08)
    blur_sigma: Interval = (0.0, 1.2)
    crop: Interval = (0.0, 2.0)
    canonical: dict = field(default_factory=lambda: dict(
        font_color=(0.0, 0.0, 0.0),
        bg_color=(0.5, 0.5, 0.5),
        font_size=0.7,
        font_type=0,
        rotation=0.0,
        shear=0.0,
    ))

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("font_size", "rotation", "shear", "scale", "translation",
                     "noise_sigma", "blur_sigma", "crop", "n_instances"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"empty range for {name}: ({lo}, {hi})")
        for name in ("font_color", "bg_color", "fill_color"):
            for lo, hi in getattr(self, name):
                if not 0.0 <= lo <= hi <= 1.0:
                    raise ValueError(f"empty or out-of-gamut colour range for {name}: ({lo}, {hi})")
        if not self.font_types:
            raise ValueError("font_types is empty")
        if set(self.canonical) != set(SUPERVISED):
            raise ValueError(f"canonical values must cover exactly {SUPERVISED}")

    @classmethod
    def desk(cls, **kw) -> "FactorRanges":
        """Milder nuisances for 16x16 renders: one glyph, bounded contrast, light noise.

        Rotation spans +-60 degrees so that tilt stays visible at this resolution.
        """
        base = dict(n_instances=(1, 1), min_contrast=0.5, font_size=(0.65, 0.9), translation=(-1.0, 1.0),
                    rotation=(-60.0, 60.0), noise_sigma=(0.0, 0.04), blur_sigma=(0.0, 0.6), crop=(0.0, 1.0))
        base.update(kw)
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "FactorRanges":
        raw = json.loads(text)
        kw = {}
        for f in fields(cls):
            v = raw[f.name]
            if f.name == "canonical":
                v = {k: (tuple(x) if isinstance(x, list) else x) for k, x in v.items()}
            else:
                v = _tuplify(v)
            kw[f.name] = v
        return cls(**kw)


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _rgb(rng: np.random.Generator, rgb: RGBRange) -> tuple[float, float, float]:
    return tuple(_uniform(rng, lo, hi) for lo, hi in rgb)


def color_distance(a, b) -> float:
    return float(np.linalg.norm(np.subtract(a, b)) / math.sqrt(3))


def sample_scene(ranges: FactorRanges, seed: int, index: int) -> SceneParams:
    """Draw one record; every factor independent and uniform over its range.

    The font colour is redrawn until it differs from the background by at
    least ``min_contrast`` (at most 64 tries, keeping the best).
    """
    rng = record_rng(seed, index)
    digit = int(rng.integers(0, 10))
    font_type = int(ranges.font_types[int(rng.integers(0, len(ranges.font_types)))])
    font_size = _uniform(rng, *ranges.font_size)
    rotation = _uniform(rng, *ranges.rotation)
    shear = _uniform(rng, *ranges.shear)
    scale = _uniform(rng, *ranges.scale)
    n_lo, n_hi = ranges.n_instances
    n_instances = int(rng.integers(n_lo, n_hi + 1))
    translation = (_uniform(rng, *ranges.translation), _uniform(rng, *ranges.translation))
    noise_sigma = _uniform(rng, *ranges.noise_sigma)
    blur_sigma = _uniform(rng, *ranges.blur_sigma)
    crop = (_uniform(rng, *ranges.crop), _uniform(rng, *ranges.crop))
    fill = _rgb(rng, ranges.fill_color)
    bg = _rgb(rng, ranges.bg_color)
    best, best_d = None, -1.0
    for _ in range(64):
        fg = _rgb(rng, ranges.font_color)
        d = color_distance(fg, bg)
        if d > best_d:
            best, best_d = fg, d
        if d >= ranges.min_contrast:
            break
    record_seed = int(rng.integers(0, 2**63 - 1))
    return SceneParams(
        digit_class=digit, font_color=best, bg_color=bg, font_size=font_size,
        font_type=font_type, rotation_deg=rotation, shear=shear, fill_color=fill,
        scale=scale, n_instances=n_instances, translation=translation,
        noise_sigma=noise_sigma, blur_sigma=blur_sigma, crop_params=crop, seed=record_seed,
    )


def canonicalize(p: SceneParams, ranges: FactorRanges, factor_ids) -> SceneParams:
    """Set each listed supervised factor (by canonicalizer index) to its canonical value."""
    out = p
    for j in factor_ids:
        if not 0 <= j < len(SUPERVISED):
            raise ValueError(f"canonicalizer id {j} out of range [0, {len(SUPERVISED)})")
        name = SUPERVISED[j]
        out = out.with_factor(name, ranges.canonical[name])
    return out


def shifted_domain(ranges: FactorRanges, shift_spec: dict | None = None) -> FactorRanges:
    """Systematically shifted ranges standing in for a real target domain.

    Recognised keys (all optional):
      bg_offset    raise the lower bound of every background channel
      font_offset  lower the upper bound of every font channel
      rotation_scale  multiply the rotation interval
      noise_scale  multiply the noise and blur intervals
      extra_font   enable the held-out glyph style
      only_extra_font  draw every glyph in the held-out style

    Canonical values are carried over untouched.
    """
    spec = dict(shift_spec or {})
    unknown = set(spec) - {"bg_offset", "font_offset", "rotation_scale", "noise_scale",
                           "extra_font", "only_extra_font"}
    if unknown:
        raise ValueError(f"unknown shift keys: {sorted(unknown)}")
    changes: dict = {}
    if spec.get("bg_offset"):
        d = float(spec["bg_offset"])
        changes["bg_color"] = tuple((lo + d, hi) for lo, hi in ranges.bg_color)
    if spec.get("font_offset"):
        d = float(spec["font_offset"])
        changes["font_color"] = tuple((lo, hi - d) for lo, hi in ranges.font_color)
    if spec.get("rotation_scale", 1.0) != 1.0:
        k = float(spec["rotation_scale"])
        changes["rotation"] = (ranges.rotation[0] * k, ranges.rotation[1] * k)
    if spec.get("noise_scale", 1.0) != 1.0:
        k = float(spec["noise_scale"])
        changes["noise_sigma"] = (ranges.noise_sigma[0] * k, ranges.noise_sigma[1] * k)
        changes["blur_sigma"] = (ranges.blur_sigma[0] * k, ranges.blur_sigma[1] * k)
    if spec.get("only_extra_font"):
        changes["font_types"] = (HELD_OUT_FONT,)
    elif spec.get("extra_font"):
        changes["font_types"] = tuple(sorted(set(ranges.font_types) | {HELD_OUT_FONT}))
    # FactorRanges.__post_init__ rejects empty intervals
    return replace(ranges, **changes)


DEFAULT_SHIFT = {"bg_offset": 0.3, "font_offset": 0.3, "rotation_scale": 1.5,
                 "noise_scale": 1.5, "extra_font": True}


def estimate_factor_space(bins, n: int = 75000) -> tuple[int, float]:
    """Number of joint bins over the supervised factors and the fraction ``n`` covers."""
    bins = [int(b) for b in bins]
    if not bins or any(b <= 0 for b in bins):
        raise ValueError(f"bins must be positive, got {bins}")
    total = 1
    for b in bins:
        total *= b
        if total >= 2**64:
            raise OverflowError("combination count does not fit in 64 bits")
    return total, n / total
