"""Exact polygon geometry on the pixel grid.

Vertices are handled as :class:`fractions.Fraction` internally so that
clipping a polygon against integer tile borders and rasterizing the pieces
reproduces the unclipped rasterization pixel for pixel.

Pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)`` and its center is
``(col + 1/2, row + 1/2)``. A pixel belongs to a polygon iff its center is
inside (even-odd rule). Centers on an edge follow the top-left rule: left and
top edges are inside, right and bottom edges are outside.
"""
from __future__ import annotations

import math
from fractions import Fraction
from numbers import Real
from typing import Iterable, Iterator, Sequence

import numpy as np

Point = tuple[Real, Real]

_HALF = Fraction(1, 2)


def as_exact(value: Real | str) -> Fraction | int:
    """Exact rational for ``value``; integral results are returned as ``int``."""
    frac = Fraction(value)
    return frac.numerator if frac.denominator == 1 else frac


def exact_points(vertices: Iterable[Sequence[Real]]) -> list[tuple[Fraction, Fraction]]:
    return [(Fraction(x), Fraction(y)) for x, y in vertices]


def polygon_area(vertices: Sequence[Point]) -> Fraction:
    """Unsigned shoelace area."""
    pts = exact_points(vertices)
    n = len(pts)
    acc = Fraction(0)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) / 2


def polygon_bounds(vertices: Sequence[Point]) -> tuple[Real, Real, Real, Real]:
    xs = [v[0] for v in vertices]
    ys = [v[1] for v in vertices]
    return min(xs), min(ys), max(xs), max(ys)


def _clip_edge(pts, inside, intersect):
    out = []
    n = len(pts)
    for i in range(n):
        cur = pts[i]
        prev = pts[i - 1]
        cur_in = inside(cur)
        prev_in = inside(prev)
        if cur_in:
            if not prev_in:
                out.append(intersect(prev, cur))
            out.append(cur)
        elif prev_in:
            out.append(intersect(prev, cur))
    return out


def _at_x(x):
    def intersect(p, q):
        t = (x - p[0]) / (q[0] - p[0])
        return (x, p[1] + t * (q[1] - p[1]))
    return intersect


def _at_y(y):
    def intersect(p, q):
        t = (y - p[1]) / (q[1] - p[1])
        return (p[0] + t * (q[0] - p[0]), y)
    return intersect


def _dedupe(pts):
    out = []
    for p in pts:
        if not out or out[-1] != p:
            out.append(p)
    while len(out) > 1 and out[0] == out[-1]:
        out.pop()
    return out


def clip_polygon(vertices: Sequence[Point], xmin: Real, ymin: Real, xmax: Real, ymax: Real) -> list[tuple]:
    """Sutherland-Hodgman clip against an axis-aligned rectangle.

    Returns exact vertices, or an empty list when the clipped polygon has zero
    area.
    """
    pts = exact_points(vertices)
    xmin, ymin, xmax, ymax = (Fraction(v) for v in (xmin, ymin, xmax, ymax))
    for inside, intersect in (
        (lambda p: p[0] >= xmin, _at_x(xmin)),
        (lambda p: p[0] <= xmax, _at_x(xmax)),
        (lambda p: p[1] >= ymin, _at_y(ymin)),
        (lambda p: p[1] <= ymax, _at_y(ymax)),
    ):
        if not pts:
            break
        pts = _dedupe(_clip_edge(pts, inside, intersect))
    if len(pts) < 3 or polygon_area(pts) == 0:
        return []
    return [(as_exact(x), as_exact(y)) for x, y in pts]


def scanline_spans(vertices: Sequence[Point], height: int, width: int) -> Iterator[tuple[int, int, int]]:
    """Yield ``(row, col_start, col_stop)`` runs of pixels inside the polygon.

    Runs are clipped to the ``height x width`` grid; ``col_stop`` is exclusive.
    """
    pts = exact_points(vertices)
    if len(pts) < 3:
        return
    edges = [(pts[i - 1], pts[i]) for i in range(len(pts)) if pts[i - 1][1] != pts[i][1]]
    ys = [p[1] for p in pts]
    row_lo = max(0, math.ceil(min(ys) - _HALF))
    row_hi = min(height, math.ceil(max(ys) - _HALF))
    for row in range(row_lo, row_hi):
        yc = row + _HALF
        xs = []
        for (x0, y0), (x1, y1) in edges:
            if (y0 <= yc < y1) or (y1 <= yc < y0):
                xs.append(x0 + (yc - y0) * (x1 - x0) / (y1 - y0))
        xs.sort()
        for a, b in zip(xs[0::2], xs[1::2]):
            c0 = max(0, math.ceil(a - _HALF))
            c1 = min(width, math.ceil(b - _HALF))
            if c1 > c0:
                yield row, c0, c1


def rasterize_polygon(vertices: Sequence[Point], height: int, width: int, out: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the polygon."""
    mask = np.zeros((height, width), dtype=bool) if out is None else out
    for row, c0, c1 in scanline_spans(vertices, height, width):
        mask[row, c0:c1] = True
    return mask


def pixel_count(vertices: Sequence[Point], height: int | None = None, width: int | None = None) -> int:
    """Number of pixel centers inside the polygon (optionally grid-clipped)."""
    if height is None or width is None:
        _, _, xmax, ymax = polygon_bounds(vertices)
        height = math.ceil(ymax) + 1
        width = math.ceil(xmax) + 1
    return sum(c1 - c0 for _, c0, c1 in scanline_spans(vertices, height, width))


def box_pixel_extent(x1: float, y1: float, x2: float, y2: float, height: int, width: int) -> tuple[int, int, int, int]:
    """Half-open pixel ranges ``[floor(x1), ceil(x2)) x [floor(y1), ceil(y2))`` clipped to the grid."""
    c0 = max(0, math.floor(x1))
    c1 = min(width, math.ceil(x2))
    r0 = max(0, math.floor(y1))
    r1 = min(height, math.ceil(y2))
    return r0, r1, c0, c1


def fill_box(mask: np.ndarray, box: Sequence[float]) -> np.ndarray:
    h, w = mask.shape
    r0, r1, c0, c1 = box_pixel_extent(*box, height=h, width=w)
    if r1 > r0 and c1 > c0:
        mask[r0:r1, c0:c1] = True
    return mask
