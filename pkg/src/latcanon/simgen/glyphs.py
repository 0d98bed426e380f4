"""Procedural digit glyphs on a 14-segment skeleton.

Coordinates are in a unit box, x to the right and y downward. A glyph style
varies stroke width, slant, corner rounding and whether the diagonal variants
of 1, 2 and 7 are used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_P = {
    "TL": (0.0, 0.0), "TC": (0.5, 0.0), "TR": (1.0, 0.0),
    "ML": (0.0, 0.5), "C": (0.5, 0.5), "MR": (1.0, 0.5),
    "BL": (0.0, 1.0), "BC": (0.5, 1.0), "BR": (1.0, 1.0),
}

SEGMENTS = {
    "a": ("TL", "TR"), "b": ("TR", "MR"), "c": ("MR", "BR"), "d": ("BL", "BR"),
    "e": ("ML", "BL"), "f": ("TL", "ML"), "g1": ("ML", "C"), "g2": ("C", "MR"),
    "h": ("TL", "C"), "i": ("TC", "C"), "j": ("TR", "C"),
    "k": ("C", "BL"), "l": ("C", "BC"), "m": ("C", "BR"),
}

DIGITS = {
    0: "a b c d e f",
    1: "b c",
    2: "a b g1 g2 e d",
    3: "a b g1 g2 c d",
    4: "f g1 g2 b c",
    5: "a f g1 g2 c d",
    6: "a f e d c g1 g2",
    7: "a b c",
    8: "a b c d e f g1 g2",
    9: "a b c d f g1 g2",
}

DIAGONAL_DIGITS = {
    1: "i l j",
    2: "a b g2 k d",
    7: "a j k",
}


@dataclass(frozen=True)
class GlyphStyle:
    stroke: float      # stroke width as a fraction of glyph height
    slant: float       # horizontal shift of the top relative to the bottom, in glyph widths
    rounding: float    # 0 = square stroke ends, 1 = round caps
    diagonal: bool


STYLES = (
    GlyphStyle(0.14, 0.00, 1.0, False),
    GlyphStyle(0.22, 0.00, 0.0, False),
    GlyphStyle(0.10, 0.20, 1.0, False),
    GlyphStyle(0.16, 0.00, 0.5, True),
    GlyphStyle(0.20, 0.25, 0.0, True),
    GlyphStyle(0.12, -0.15, 0.5, False),
    # held out of the source domain
    GlyphStyle(0.08, 0.35, 1.0, True),
)


def segments_for(digit: int, style: GlyphStyle) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    names = (DIAGONAL_DIGITS.get(digit) if style.diagonal else None) or DIGITS[digit]
    return [(_P[SEGMENTS[s][0]], _P[SEGMENTS[s][1]]) for s in names.split()]


def glyph_coverage(xs: np.ndarray, ys: np.ndarray, digit: int, font_type: int,
                   cx: float, cy: float, height: float) -> np.ndarray:
    """Anti-aliased ink coverage in [0, 1] of one glyph at sample points (xs, ys).

    ``(cx, cy)`` is the glyph centre and ``height`` its full height, both in
    pixels. Coverage uses a one-pixel linear ramp on the stroke distance.
    """
    style = STYLES[font_type]
    width = 0.55 * height
    stroke = max(style.stroke * height, 0.6)
    inner_w, inner_h = max(width - stroke, 1e-6), max(height - stroke, 1e-6)

    dist = np.full(xs.shape, np.inf)
    for (u0, v0), (u1, v1) in segments_for(digit, style):
        x0 = cx + (u0 - 0.5) * inner_w - style.slant * (v0 - 0.5) * inner_w
        y0 = cy + (v0 - 0.5) * inner_h
        x1 = cx + (u1 - 0.5) * inner_w - style.slant * (v1 - 0.5) * inner_w
        y1 = cy + (v1 - 0.5) * inner_h
        dist = np.minimum(dist, _segment_distance(xs, ys, x0, y0, x1, y1, style.rounding))
    return np.clip(stroke / 2 - dist + 0.5, 0.0, 1.0)


def _segment_distance(xs, ys, x0, y0, x1, y1, rounding: float) -> np.ndarray:
    dx, dy = x1 - x0, y1 - y0
    length = float(np.hypot(dx, dy))
    tx, ty = dx / length, dy / length
    mx, my = (x0 + x1) / 2, (y0 + y1) / 2
    along = (xs - mx) * tx + (ys - my) * ty
    perp = np.abs(-(xs - mx) * ty + (ys - my) * tx)
    over = np.maximum(np.abs(along) - length / 2, 0.0)
    round_d = np.hypot(over, perp)
    square_d = np.maximum(over, perp)
    return rounding * round_d + (1 - rounding) * square_d
