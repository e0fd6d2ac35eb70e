"""Full-coverage quadtree partitioner.

The tree always spans the configured global domain, never the MBR of the
data that grew it, so a stored partitioner can route any point of any later
dataset. Only leaf paths and boundaries are persisted.

Paths are strings over ``0123`` (NW, NE, SW, SE). Cells are half-open,
``[min, max)``, except along the domain's max edges which are closed.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptySample, FormatError, OutOfDomain
from .geometry import Point, Rect, rect_points_distance

NW, NE, SW, SE = "0", "1", "2", "3"
FORMAT_VERSION = 1


def _split(bounds: tuple[float, float, float, float], quadrant: str):
    x0, y0, x1, y1 = bounds
    mx = 0.5 * (x0 + x1)
    my = 0.5 * (y0 + y1)
    if quadrant == NW:
        return (x0, my, mx, y1)
    if quadrant == NE:
        return (mx, my, x1, y1)
    if quadrant == SW:
        return (x0, y0, mx, my)
    return (mx, y0, x1, my)


def path_bounds(domain: Rect, path: str) -> tuple[float, float, float, float]:
    b = (domain.min_x, domain.min_y, domain.max_x, domain.max_y)
    for q in path:
        b = _split(b, q)
    return b


def _quadrant(bounds, x: float, y: float) -> str:
    mx = 0.5 * (bounds[0] + bounds[2])
    my = 0.5 * (bounds[1] + bounds[3])
    if y >= my:
        return NE if x >= mx else NW
    return SE if x >= mx else SW


@dataclass(frozen=True)
class PartitionBlock:
    path: str
    bbox: Rect
    block_id: int


@dataclass
class QuadtreePartitioner:
    id: str
    domain: Rect
    max_depth: int
    leaves: list[PartitionBlock]
    _compiled: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @classmethod
    def from_paths(cls, id: str, domain: Rect, max_depth: int, paths: Sequence[str]):
        ordered = sorted(paths)
        leaves = [PartitionBlock(p, Rect(*path_bounds(domain, p)), i)
                  for i, p in enumerate(ordered)]
        return cls(id, domain, max_depth, leaves)

    @property
    def n_blocks(self) -> int:
        return len(self.leaves)

    def node_table(self) -> list[str]:
        """Every node path (internal and leaf) in lexicographic order."""
        nodes = {""}
        for leaf in self.leaves:
            for k in range(1, len(leaf.path) + 1):
                nodes.add(leaf.path[:k])
        return sorted(nodes)

    # -- routing -----------------------------------------------------------

    def _compile(self):
        if self._compiled is not None:
            return self._compiled
        leaf_of = {b.path: b.block_id for b in self.leaves}
        internal = [p for p in self.node_table() if p not in leaf_of]
        index = {p: i for i, p in enumerate(internal)}
        n = max(len(internal), 1)
        child = np.zeros((n, 4), dtype=np.int64)
        mid = np.zeros((n, 2))
        for p, i in index.items():
            b = path_bounds(self.domain, p)
            mid[i] = (0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]))
            for q in range(4):
                cp = p + str(q)
                child[i, q] = index[cp] if cp in index else -(leaf_of[cp] + 1)
        boxes = np.array([b.bbox.as_list() for b in self.leaves])
        ext = boxes.copy()
        d = self.domain
        ext[boxes[:, 0] == d.min_x, 0] = -np.inf
        ext[boxes[:, 1] == d.min_y, 1] = -np.inf
        ext[boxes[:, 2] == d.max_x, 2] = np.inf
        ext[boxes[:, 3] == d.max_y, 3] = np.inf
        self._compiled = (len(internal) > 0, child, mid, boxes, ext)
        return self._compiled

    def _clamp(self, pts: np.ndarray, clamp: bool) -> np.ndarray:
        d = self.domain
        outside = ((pts[:, 0] < d.min_x) | (pts[:, 0] > d.max_x)
                   | (pts[:, 1] < d.min_y) | (pts[:, 1] > d.max_y))
        if not outside.any():
            return pts
        if not clamp:
            raise OutOfDomain(f"{int(outside.sum())} point(s) outside {d.as_list()}")
        out = pts.copy()
        out[:, 0] = np.clip(out[:, 0], d.min_x, d.max_x)
        out[:, 1] = np.clip(out[:, 1], d.min_y, d.max_y)
        return out

    def route_points(self, pts: np.ndarray, clamp: bool = True) -> np.ndarray:
        pts = self._clamp(np.asarray(pts, dtype=float).reshape(-1, 2), clamp)
        has_internal, child, mid, _, _ = self._compile()
        if not has_internal:
            return np.zeros(len(pts), dtype=np.int64)
        node = np.zeros(len(pts), dtype=np.int64)
        active = np.arange(len(pts))
        while len(active):
            nd = node[active]
            east = pts[active, 0] >= mid[nd, 0]
            south = pts[active, 1] < mid[nd, 1]
            nxt = child[nd, east.astype(np.int64) + 2 * south.astype(np.int64)]
            node[active] = nxt
            active = active[nxt >= 0]
        return -node - 1

    def route(self, pt: Point, clamp: bool = True) -> int:
        return int(self.route_points(np.array([pt], dtype=float), clamp)[0])

    def expand_points(self, pts: np.ndarray, theta: float, clamp: bool = True
                      ) -> tuple[np.ndarray, np.ndarray]:
        """(point index, block id) for every block within ``theta`` of a point.

        Edge blocks are treated as extending outward past the domain, which
        leaves in-domain distances unchanged and keeps the result consistent
        with clamped routing for outside points.
        """
        if theta < 0:
            raise ValueError("theta must be >= 0")
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        if not clamp:
            self._clamp(pts, False)
        primary = self.route_points(pts, clamp=True)
        _, _, _, _, ext = self._compile()
        own = ext[primary]
        with np.errstate(invalid="ignore"):
            margin = np.minimum.reduce([pts[:, 0] - own[:, 0], own[:, 2] - pts[:, 0],
                                        pts[:, 1] - own[:, 1], own[:, 3] - pts[:, 1]])
        near = np.flatnonzero(~(margin > theta))
        far = np.flatnonzero(margin > theta)
        pi = [far]
        bi = [primary[far]]
        step = max(1, 4_000_000 // max(len(ext), 1))
        for s in range(0, len(near), step):
            idx = near[s:s + step]
            sub = pts[idx]
            hits = np.stack([rect_points_distance(e, sub) <= theta for e in ext], axis=1)
            r, c = np.nonzero(hits)
            pi.append(idx[r])
            bi.append(c.astype(np.int64))
        return np.concatenate(pi), np.concatenate(bi)

    def route_expanded(self, pt: Point, theta: float, clamp: bool = True) -> set[int]:
        _, blocks = self.expand_points(np.array([pt], dtype=float), theta, clamp)
        return {int(b) for b in blocks}

    # -- persistence -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "id": self.id,
            "domain": self.domain.as_list(),
            "max_depth": self.max_depth,
            "leaves": [{"path": b.path, "bbox": b.bbox.as_list()} for b in self.leaves],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.dumps())
        os.replace(tmp, path)
        return path

    @classmethod
    def from_json(cls, doc) -> "QuadtreePartitioner":
        if not isinstance(doc, dict):
            raise FormatError("document", "not a JSON object")
        for key in ("id", "domain", "max_depth", "leaves"):
            if key not in doc:
                raise FormatError(key, "missing")
        try:
            domain = Rect.from_list(doc["domain"])
        except (TypeError, ValueError) as exc:
            raise FormatError("domain", str(exc)) from exc
        if not isinstance(doc["max_depth"], int) or doc["max_depth"] < 0:
            raise FormatError("max_depth", "must be a non-negative integer")
        leaves = doc["leaves"]
        if not isinstance(leaves, list) or not leaves:
            raise FormatError("leaves", "must be a non-empty list")
        paths = []
        for i, leaf in enumerate(leaves):
            try:
                p, bbox = leaf["path"], leaf["bbox"]
            except (TypeError, KeyError) as exc:
                raise FormatError(f"leaves[{i}]", "needs path and bbox") from exc
            if not isinstance(p, str) or any(ch not in "0123" for ch in p):
                raise FormatError(f"leaves[{i}].path", repr(p))
            if len(p) > doc["max_depth"]:
                raise FormatError(f"leaves[{i}].path", "deeper than max_depth")
            try:
                coords = [float(v) for v in bbox]
            except (TypeError, ValueError) as exc:
                raise FormatError(f"leaves[{i}].bbox", "not a coordinate list") from exc
            if coords != list(path_bounds(domain, p)):
                raise FormatError(f"leaves[{i}].bbox", "does not match path subdivision")
            paths.append(p)
        _check_tiling(paths)
        return cls.from_paths(str(doc["id"]), domain, doc["max_depth"], paths)

    @classmethod
    def loads(cls, text: str) -> "QuadtreePartitioner":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError("json", str(exc)) from exc
        return cls.from_json(doc)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "QuadtreePartitioner":
        return cls.loads(Path(path).read_text())

    def __eq__(self, other):
        if not isinstance(other, QuadtreePartitioner):
            return NotImplemented
        return self.to_json() == other.to_json()


def _check_tiling(paths: Sequence[str]) -> None:
    leafset = set(paths)
    if len(leafset) != len(paths):
        raise FormatError("leaves", "duplicate path")
    prefixes = {p[:k] for p in paths for k in range(len(p))}
    if leafset & prefixes:
        raise FormatError("leaves", "a leaf is also an internal node")
    for pre in prefixes:
        for q in "0123":
            c = pre + q
            if c not in leafset and c not in prefixes:
                raise FormatError("leaves", f"missing quadrant {c!r}; leaves do not tile")


class _Node:
    __slots__ = ("path", "bounds", "points", "children")

    def __init__(self, path, bounds):
        self.path = path
        self.bounds = bounds
        self.points: list[int] | None = []
        self.children: dict[str, _Node] | None = None


def tree_depth(rdd_partitions: int, user_max_depth: int) -> int:
    return max(rdd_partitions, user_max_depth)


def build(sample: np.ndarray, domain: Rect, rdd_partitions: int, user_max_depth: int,
          id: str = "partitioner", capacity: int | None = None) -> QuadtreePartitioner:
    """Grow a quadtree over ``domain`` by inserting the sample one point at a time.

    Depth limit is ``max(rdd_partitions, user_max_depth)``; node capacity
    defaults to ``ceil(len(sample) / depth)``. Points are inserted in
    (x, y, original index) order, so any permutation of the sample gives the
    same tree.
    """
    pts = np.asarray(sample, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptySample("cannot build a partitioner from an empty sample")
    if rdd_partitions < 1 or user_max_depth < 1:
        raise ValueError("depth inputs must be >= 1")
    depth = tree_depth(rdd_partitions, user_max_depth)
    cap = capacity if capacity is not None else max(1, math.ceil(len(pts) / depth))

    d = domain
    pts = np.column_stack([np.clip(pts[:, 0], d.min_x, d.max_x),
                           np.clip(pts[:, 1], d.min_y, d.max_y)])
    order = np.lexsort((np.arange(len(pts)), pts[:, 1], pts[:, 0]))
    xs = pts[:, 0].tolist()
    ys = pts[:, 1].tolist()

    root = _Node("", (d.min_x, d.min_y, d.max_x, d.max_y))
    for i in order.tolist():
        x, y = xs[i], ys[i]
        leaf = root
        while leaf.children is not None:
            leaf = leaf.children[_quadrant(leaf.bounds, x, y)]
        while len(leaf.points) > cap and len(leaf.path) < depth:
            leaf.children = {q: _Node(leaf.path + q, _split(leaf.bounds, q)) for q in "0123"}
            for j in leaf.points:
                leaf.children[_quadrant(leaf.bounds, xs[j], ys[j])].points.append(j)
            leaf.points = None
            leaf = leaf.children[_quadrant(leaf.bounds, x, y)]
        leaf.points.append(i)

    paths = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.children is None:
            paths.append(node.path)
        else:
            stack.extend(node.children.values())
    return QuadtreePartitioner.from_paths(id, domain, depth, paths)
