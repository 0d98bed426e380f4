"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255."""

from __future__ import annotations

import os

import numpy as np


def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1  # exactly one whitespace byte before the raster


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Return uint8 pixels as (H, W, 3) for P6 or (H, W) for P5."""
    with open(path, "rb") as fh:
        buf = fh.read()
    (magic, w, h, maxval), pos = _tokens(buf, 4, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    if raster.size != need:
        raise ValueError(f"{path}: raster is truncated")
    return raster.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


def encode_pnm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise TypeError("PNM pixels must be uint8")
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode pixels of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(pixels).tobytes()


def write_pnm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(pixels))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(C, H, W) floats in [0, 1] -> (H, W, C) uint8."""
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """(H, W[, C]) uint8 -> (C, H, W) float32 in [0, 1]."""
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def image_strip(images: list[np.ndarray]) -> np.ndarray:
    """Concatenate (C, H, W) images left to right into one uint8 (H, W*n, C) raster."""
    return np.concatenate([to_uint8(im) for im in images], axis=1)
