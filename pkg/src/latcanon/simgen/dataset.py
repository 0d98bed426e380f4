"""LCDS dataset container and lazy image datasets.

File layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"LCDS"
    4       4     u32 format version (1)
    8       1     u8 kind: 0 = digit scenes, 1 = dsprites, 2 = external pixels
    9       2     u16 image size (square)
    11      1     u8 image channels
    12      4     u32 generator version
    16      8     u64 seed
    24      4     u32 L, length of the JSON factor-range block
    28      L     utf-8 JSON (sorted keys, compact separators)
    28+L    4     u32 record count N
    32+L    4     u32 record width W in bytes
    36+L    N*W   records

Digit-scene record (W = 163)::

    u8 digit_class, f64[3] font_color, f64[3] bg_color, f64 font_size,
    u8 font_type, f64 rotation_deg, f64 shear, f64[3] fill_color, f64 scale,
    u8 n_instances, f64[2] translation, f64 noise_sigma, f64 blur_sigma,
    f64[2] crop_params, u64 seed

dSprites record (W = 33): u8 shape, f64 scale, f64 rotation, f64 x_pos, f64 y_pos.

External record (W = 1 + C*H*W): u8 label, then uint8 pixels in (H, W, C)
order, i.e. the same raster order as a binary PPM/PGM.

Simulated files never hold pixels; images and canonical targets are
re-rendered from the stored parameters on access.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dsprites import (FACTORS as DSPRITE_FACTORS, DspriteParams, DspriteRanges,
                       canonicalize_dsprite, render_dsprite, sample_dsprite)
from .factors import GENERATOR_VERSION, SUPERVISED, FactorRanges, SceneParams, sample_scene
from .imageio import from_uint8, to_uint8
from .render import canonical_target, render_scene

MAGIC = b"LCDS"
FORMAT_VERSION = 1
KINDS = {"svhn": 0, "dsprites": 1, "external": 2}
KIND_NAMES = {v: k for k, v in KINDS.items()}

_HEADER = struct.Struct("<4sIBHBIQ")
_SCENE = struct.Struct("<B3d3ddBdd3ddB2ddd2dQ")
_SPRITE = struct.Struct("<B4d")


def pack_scene(p: SceneParams) -> bytes:
    return _SCENE.pack(p.digit_class, *p.font_color, *p.bg_color, p.font_size, p.font_type,
                       p.rotation_deg, p.shear, *p.fill_color, p.scale, p.n_instances,
                       *p.translation, p.noise_sigma, p.blur_sigma, *p.crop_params, p.seed)


def unpack_scene(buf: bytes) -> SceneParams:
    v = _SCENE.unpack(buf)
    return SceneParams(
        digit_class=v[0], font_color=tuple(v[1:4]), bg_color=tuple(v[4:7]), font_size=v[7],
        font_type=v[8], rotation_deg=v[9], shear=v[10], fill_color=tuple(v[11:14]), scale=v[14],
        n_instances=v[15], translation=tuple(v[16:18]), noise_sigma=v[18], blur_sigma=v[19],
        crop_params=tuple(v[20:22]), seed=v[22],
    )


def pack_sprite(p: DspriteParams) -> bytes:
    return _SPRITE.pack(p.shape, p.scale, p.rotation, p.x_pos, p.y_pos)


def unpack_sprite(buf: bytes) -> DspriteParams:
    s, sc, r, x, y = _SPRITE.unpack(buf)
    return DspriteParams(s, sc, r, x, y)


class ImageDataset:
    """Common interface: ``len``, ``labels``, ``clean``, ``noised``, ``target``."""

    kind: str = ""
    size: int
    channels: int
    n_factors: int = 0
    factor_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        raise NotImplementedError

    def clean(self, i: int) -> np.ndarray:
        raise NotImplementedError

    def noised(self, i: int) -> np.ndarray:
        return self.clean(i)

    def target(self, i: int, path) -> np.ndarray:
        raise ValueError(f"{self.kind} datasets carry no factor metadata for canonical targets")

    def images(self, idx, which: str = "clean") -> np.ndarray:
        fn = self.clean if which == "clean" else self.noised
        return np.stack([fn(int(i)) for i in idx])

    def targets(self, idx, path) -> np.ndarray:
        return np.stack([self.target(int(i), path) for i in idx])

    def subset(self, idx) -> "SubsetDataset":
        return SubsetDataset(self, idx)


class _RenderCache:
    def __init__(self, max_entries: int):
        self.max_entries = max_entries
        self._d: OrderedDict = OrderedDict()

    def get(self, key, make):
        hit = self._d.get(key)
        if hit is not None:
            self._d.move_to_end(key)
            return hit
        val = make()
        if self.max_entries:
            self._d[key] = val
            if len(self._d) > self.max_entries:
                self._d.popitem(last=False)
        return val


class SceneDataset(ImageDataset):
    """Street-number-like digit scenes rendered lazily from parameters."""

    kind = "svhn"
    channels = 3
    n_factors = len(SUPERVISED)
    factor_names = SUPERVISED

    def __init__(self, records: list[SceneParams], ranges: FactorRanges, size: int = 32,
                 seed: int = 0, cache_size: int = 60000):
        self.records = list(records)
        self.ranges = ranges
        self.size = size
        self.seed = seed
        self.labels = np.array([r.digit_class for r in self.records], dtype=np.int64)
        self._cache = _RenderCache(cache_size)

    @classmethod
    def sample(cls, ranges: FactorRanges, n: int, seed: int, size: int = 32, **kw) -> "SceneDataset":
        return cls([sample_scene(ranges, seed, i) for i in range(n)], ranges, size, seed, **kw)

    def __len__(self) -> int:
        return len(self.records)

    def clean(self, i: int) -> np.ndarray:
        return self._cache.get((i, "clean"), lambda: render_scene(self.records[i], self.size, False))

    def noised(self, i: int) -> np.ndarray:
        return self._cache.get((i, "noised"), lambda: render_scene(self.records[i], self.size, True))

    def target(self, i: int, path) -> np.ndarray:
        key = tuple(sorted(set(int(j) for j in path)))
        if not key:
            return self.clean(i)
        return self._cache.get((i, key), lambda: canonical_target(self.records[i], key, self.ranges, self.size))

    def factor_values(self, name: str) -> np.ndarray:
        return np.array([r.factor(name) for r in self.records], dtype=np.float64)


class DspriteDataset(ImageDataset):
    kind = "dsprites"
    channels = 1
    n_factors = len(DSPRITE_FACTORS)
    factor_names = DSPRITE_FACTORS

    def __init__(self, records: list[DspriteParams], ranges: DspriteRanges | None = None,
                 size: int = 16, seed: int = 0, cache_size: int = 60000):
        self.records = list(records)
        self.ranges = ranges or DspriteRanges()
        self.size = size
        self.seed = seed
        self.labels = np.array([r.shape for r in self.records], dtype=np.int64)
        self._cache = _RenderCache(cache_size)

    @classmethod
    def sample(cls, n: int, seed: int, size: int = 16, ranges: DspriteRanges | None = None, **kw):
        ranges = ranges or DspriteRanges()
        return cls([sample_dsprite(ranges, seed, i) for i in range(n)], ranges, size, seed, **kw)

    def __len__(self) -> int:
        return len(self.records)

    def clean(self, i: int) -> np.ndarray:
        return self._cache.get((i, "clean"), lambda: render_dsprite(self.records[i], self.size, self.ranges))

    def target(self, i: int, path) -> np.ndarray:
        key = tuple(sorted(set(int(j) for j in path)))
        if not key:
            return self.clean(i)
        return self._cache.get((i, key), lambda: render_dsprite(
            canonicalize_dsprite(self.records[i], self.ranges, key), self.size, self.ranges))

    def factor_values(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)


class ExternalDataset(ImageDataset):
    """Labelled pixel images with no factor metadata (e.g. ingested real photos)."""

    kind = "external"

    def __init__(self, pixels: np.ndarray, labels):
        pixels = np.asarray(pixels, dtype=np.uint8)
        if pixels.ndim == 3:
            pixels = pixels[..., None]
        if pixels.ndim != 4 or pixels.shape[1] != pixels.shape[2]:
            raise ValueError(f"expected (N, H, W, C) square images, got {pixels.shape}")
        self.pixels = pixels
        self.size = pixels.shape[1]
        self.channels = pixels.shape[3]
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.shape != (len(pixels),):
            raise ValueError("one label per image is required")

    @classmethod
    def from_images(cls, images, labels) -> "ExternalDataset":
        return cls(np.stack([to_uint8(im) for im in images]), labels)

    def __len__(self) -> int:
        return len(self.pixels)

    def clean(self, i: int) -> np.ndarray:
        return from_uint8(self.pixels[i])


class SubsetDataset(ImageDataset):
    def __init__(self, base: ImageDataset, idx):
        self.base = base
        self.idx = np.asarray(idx, dtype=np.int64)
        self.kind = base.kind
        self.size = base.size
        self.channels = base.channels
        self.n_factors = base.n_factors
        self.factor_names = base.factor_names
        self.labels = base.labels[self.idx]

    def __len__(self) -> int:
        return len(self.idx)

    def clean(self, i):
        return self.base.clean(int(self.idx[i]))

    def noised(self, i):
        return self.base.noised(int(self.idx[i]))

    def target(self, i, path):
        return self.base.target(int(self.idx[i]), path)

    def factor_values(self, name):
        return self.base.factor_values(name)[self.idx]

    @property
    def records(self):
        return [self.base.records[int(i)] for i in self.idx]


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _encode(ds: ImageDataset) -> bytes:
    kind = KINDS[ds.kind]
    if isinstance(ds, SceneDataset):
        cfg, recs, width = ds.ranges.to_json(), [pack_scene(r) for r in ds.records], _SCENE.size
        seed = ds.seed
    elif isinstance(ds, DspriteDataset):
        cfg = json.dumps(asdict(ds.ranges), sort_keys=True, separators=(",", ":"))
        recs, width, seed = [pack_sprite(r) for r in ds.records], _SPRITE.size, ds.seed
    elif isinstance(ds, ExternalDataset):
        cfg, seed = "{}", 0
        width = 1 + ds.pixels[0].size if len(ds) else 1
        recs = [struct.pack("<B", int(lab)) + ds.pixels[i].tobytes() for i, lab in enumerate(ds.labels)]
    else:
        raise TypeError(f"cannot serialise {type(ds).__name__}")
    cfg_b = cfg.encode("utf-8")
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, kind, ds.size, ds.channels, GENERATOR_VERSION, seed)
    return b"".join([head, struct.pack("<I", len(cfg_b)), cfg_b,
                     struct.pack("<II", len(recs), width), *recs])


def write_dataset(ds: ImageDataset, path: str | os.PathLike) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(_encode(ds))
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


def read_dataset(path: str | os.PathLike) -> ImageDataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an LCDS file")
    magic, version, kind, size, channels, gen_version, seed = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported LCDS version {version}")
    pos = _HEADER.size
    (cfg_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    cfg = buf[pos:pos + cfg_len].decode("utf-8")
    pos += cfg_len
    n, width = struct.unpack_from("<II", buf, pos)
    pos += 8
    if len(buf) != pos + n * width:
        raise ValueError(f"{path}: expected {n} records of {width} bytes")
    chunks = [buf[pos + i * width: pos + (i + 1) * width] for i in range(n)]
    name = KIND_NAMES.get(kind)
    if name == "svhn":
        return SceneDataset([unpack_scene(c) for c in chunks], FactorRanges.from_json(cfg), size, seed)
    if name == "dsprites":
        raw = json.loads(cfg)
        raw = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
        return DspriteDataset([unpack_sprite(c) for c in chunks], DspriteRanges(**raw), size, seed)
    if name == "external":
        labels = [c[0] for c in chunks]
        pix = np.frombuffer(b"".join(c[1:] for c in chunks), dtype=np.uint8)
        return ExternalDataset(pix.reshape(n, size, size, channels), labels)
    raise ValueError(f"{path}: unknown dataset kind {kind}")


def generate_dataset(kind: str, n: int, seed: int, out_path: str | os.PathLike | None = None,
                     ranges=None, size: int = 32) -> ImageDataset:
    """Sample ``n`` records, optionally write them to ``out_path``, and return the dataset."""
    if kind == "svhn":
        ds = SceneDataset.sample(ranges or FactorRanges(), n, seed, size)
    elif kind == "dsprites":
        ds = DspriteDataset.sample(n, seed, size, ranges)
    else:
        raise ValueError(f"unknown generator kind {kind!r}")
    if out_path is not None:
        write_dataset(ds, out_path)
    return ds
