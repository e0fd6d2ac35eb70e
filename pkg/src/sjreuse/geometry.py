"""Planar point/rectangle/polygon primitives.

Bulk operations take ``(n, 2)`` float arrays; scalar helpers take
:class:`Point` tuples. Everything here is a pure function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateInput


class Point(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Rect:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self):
        if not (self.min_x <= self.max_x and self.min_y <= self.max_y):
            raise ValueError(f"inverted rectangle {self.as_list()}")

    @classmethod
    def from_list(cls, xs: Sequence[float]) -> "Rect":
        if len(xs) != 4:
            raise ValueError("rectangle needs 4 coordinates")
        return cls(*(float(v) for v in xs))

    @classmethod
    def bounding(cls, pts: np.ndarray) -> "Rect":
        pts = np.asarray(pts, dtype=float)
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        return cls(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    def as_list(self) -> list[float]:
        return [float(self.min_x), float(self.min_y), float(self.max_x), float(self.max_y)]

    @property
    def width(self) -> float:
        return self.max_x - self.min_x

    @property
    def height(self) -> float:
        return self.max_y - self.min_y

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, p: Point) -> bool:
        return self.min_x <= p[0] <= self.max_x and self.min_y <= p[1] <= self.max_y

    def contains_rect(self, other: "Rect") -> bool:
        return (self.min_x <= other.min_x and self.min_y <= other.min_y
                and other.max_x <= self.max_x and other.max_y <= self.max_y)

    def union(self, other: "Rect") -> "Rect":
        return Rect(min(self.min_x, other.min_x), min(self.min_y, other.min_y),
                    max(self.max_x, other.max_x), max(self.max_y, other.max_y))

    def padded(self, fraction: float) -> "Rect":
        dx = self.width * fraction or fraction
        dy = self.height * fraction or fraction
        return Rect(self.min_x - dx, self.min_y - dy, self.max_x + dx, self.max_y + dy)


@dataclass(frozen=True)
class Polygon:
    """Closed ring, counter-clockwise, first vertex not repeated at the end."""

    vertices: tuple[Point, ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise DegenerateInput("polygon needs at least 3 vertices")

    def as_array(self) -> np.ndarray:
        return np.array(self.vertices, dtype=float)


class PolygonMetrics(NamedTuple):
    area: float
    perimeter: float
    centroid: Point
    compactness: float


def distance(a: Point, b: Point) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: Iterable[Point] | np.ndarray) -> Polygon:
    """Andrew's monotone chain.

    Output starts at the lexicographically smallest vertex and runs
    counter-clockwise; collinear boundary points are dropped.
    """
    pts = sorted({(float(p[0]), float(p[1])) for p in points})
    if len(pts) < 3:
        raise DegenerateInput(f"need 3 distinct points, got {len(pts)}")

    lower: list[tuple[float, float]] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[float, float]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    ring = lower[:-1] + upper[:-1]
    if len(ring) < 3:
        raise DegenerateInput("all points are collinear")
    return Polygon(tuple(Point(*p) for p in ring))


def polygon_metrics(poly: Polygon) -> PolygonMetrics:
    v = poly.as_array()
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    signed = 0.5 * float(cross.sum())
    if signed == 0.0:
        raise DegenerateInput("polygon has zero area")
    cx = float(((x + xn) * cross).sum()) / (6.0 * signed)
    cy = float(((y + yn) * cross).sum()) / (6.0 * signed)
    area = abs(signed)
    perimeter = float(np.hypot(xn - x, yn - y).sum())
    compactness = 4.0 * math.pi * area / (perimeter * perimeter)
    return PolygonMetrics(area, perimeter, Point(cx, cy), compactness)


def point_in_convex_polygon(poly: Polygon, p: Point, tol: float = 1e-9) -> bool:
    """Closed containment test for a CCW convex ring (boundary counts)."""
    v = poly.vertices
    n = len(v)
    for i in range(n):
        a, b = v[i], v[(i + 1) % n]
        scale = max(1.0, abs(b[0] - a[0]) + abs(b[1] - a[1]))
        if _cross(a, b, p) < -tol * scale:
            return False
    return True


def rect_point_distance(r: Rect, p: Point) -> float:
    dx = max(r.min_x - p[0], 0.0, p[0] - r.max_x)
    dy = max(r.min_y - p[1], 0.0, p[1] - r.max_y)
    return math.hypot(dx, dy)


def rect_points_distance(bounds: Sequence[float], pts: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rect_point_distance`; bounds may be infinite."""
    min_x, min_y, max_x, max_y = bounds
    x, y = pts[:, 0], pts[:, 1]
    dx = np.maximum(np.maximum(min_x - x, 0.0), x - max_x)
    dy = np.maximum(np.maximum(min_y - y, 0.0), y - max_y)
    return np.hypot(dx, dy)
