"""Strict, binary attribute checker for rendered or generated shape scenes.

Pixels are labelled with the nearest palette colour (background included);
a grid cell holds an object when it has at least ``MIN_MASS`` coloured pixels
and one colour owns at least half of them.  Shape comes from the fill ratio of
the colour mask inside its bounding box and the vertical offset of its centroid.
"""

from __future__ import annotations

import numpy as np

from .scenes import CELLS, COLORS, ShapeObject, cell_bounds, parse_caption

MIN_MASS = 12
DOMINANCE = 0.5
MAX_COLOR_DIST = 0.45
SQUARE_FILL = 0.85
TRIANGLE_DROP = 0.06

_NAMES = ["background", *COLORS]
_PALETTE = np.array([(0.0, 0.0, 0.0), *COLORS.values()])


def label_pixels(pixels: np.ndarray) -> np.ndarray:
    """Index into ``_NAMES`` per pixel; -1 for pixels far from every palette colour."""
    px = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    d = np.linalg.norm(px[..., None, :] - _PALETTE, axis=-1)
    lab = d.argmin(axis=-1)
    return np.where(d.min(axis=-1) <= MAX_COLOR_DIST, lab, -1)


def classify_shape(mask: np.ndarray) -> str:
    ys, xs = np.nonzero(mask)
    h = ys.max() - ys.min() + 1
    w = xs.max() - xs.min() + 1
    fill = len(ys) / float(h * w)
    if fill >= SQUARE_FILL:
        return "square"
    drop = (ys.mean() - (ys.min() + ys.max()) / 2.0) / h
    return "triangle" if drop > TRIANGLE_DROP else "circle"


def detect_objects(pixels: np.ndarray) -> list[ShapeObject]:
    H, W = pixels.shape[:2]
    lab = label_pixels(pixels)
    found = []
    for cell in range(len(CELLS)):
        y0, y1, x0, x1 = cell_bounds(cell, H, W)
        sub = lab[y0:y1, x0:x1]
        counts = np.array([(sub == k).sum() for k in range(1, len(_NAMES))])
        total = counts.sum()
        if total < MIN_MASS:
            continue
        k = int(counts.argmax())
        if counts[k] < DOMINANCE * total:
            continue
        found.append(ShapeObject(classify_shape(sub == k + 1), _NAMES[k + 1], cell))
    return found


def attribute_check(pixels: np.ndarray, caption: str) -> dict:
    """Per-attribute pass/fail of an image against a scene caption.

    Raises ``CaptionError`` for captions outside the grammar.
    """
    expected = parse_caption(caption)
    detected = {o.cell: o for o in detect_objects(pixels)}
    position = all(o.cell in detected for o in expected)
    color = all(o.cell in detected and detected[o.cell].color == o.color for o in expected)
    shape = all(o.cell in detected and detected[o.cell].shape == o.shape for o in expected)
    count = len(detected) == len(expected)
    return {"count": count, "position": position, "color": color, "shape": shape,
            "overall": count and position and color and shape}
