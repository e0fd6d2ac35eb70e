"""Sparse grid histograms and Jensen-Shannon divergence between them.

Bins are keyed ``row * W + col`` with row 0 at the top (maximum y) so a
row-major flatten reads the grid the way a map is read: north-west first.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import Dataset, PointReader
from .errors import DomainMismatch, EmptyHistogram, FormatError
from .geometry import Rect

DEFAULT_RESOLUTION = 8192


@dataclass(frozen=True)
class GridHistogram:
    domain: Rect
    resolution: int
    keys: np.ndarray      # sorted unique int64 bin keys
    counts: np.ndarray    # int64, all >= 1
    out_of_domain: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def bins(self) -> dict[tuple[int, int], int]:
        rows, cols = np.divmod(self.keys, self.resolution)
        return {(int(r), int(c)): int(n) for r, c, n in zip(rows, cols, self.counts)}

    def dense(self) -> np.ndarray:
        out = np.zeros(self.resolution * self.resolution, dtype=np.int64)
        out[self.keys] = self.counts
        return out

    def to_json(self) -> dict:
        rows, cols = np.divmod(self.keys, self.resolution)
        return {
            "domain": self.domain.as_list(),
            "resolution": self.resolution,
            "entries": [[int(r), int(c), int(n)] for r, c, n in zip(rows, cols, self.counts)],
            "total": self.total,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GridHistogram":
        try:
            res = int(doc["resolution"])
            ent = np.asarray(doc["entries"], dtype=np.int64).reshape(-1, 3)
            hist = cls(Rect.from_list(doc["domain"]), res, ent[:, 0] * res + ent[:, 1], ent[:, 2])
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError("histogram", str(exc)) from exc
        if hist.total != int(doc["total"]):
            raise FormatError("total", "does not match entries")
        return hist


@dataclass(frozen=True)
class ProbVector:
    domain: Rect
    resolution: int
    keys: np.ndarray
    probs: np.ndarray


def bin_keys(pts: np.ndarray, domain: Rect, resolution: int) -> tuple[np.ndarray, int]:
    """Bin key per point, clamping outsiders to the edge bins."""
    cw = domain.width / resolution
    ch = domain.height / resolution
    col = np.floor((pts[:, 0] - domain.min_x) / cw)
    row_from_bottom = np.floor((pts[:, 1] - domain.min_y) / ch)
    outside = ((pts[:, 0] < domain.min_x) | (pts[:, 0] > domain.max_x)
               | (pts[:, 1] < domain.min_y) | (pts[:, 1] > domain.max_y))
    col = np.clip(col, 0, resolution - 1).astype(np.int64)
    row_from_bottom = np.clip(row_from_bottom, 0, resolution - 1).astype(np.int64)
    row = resolution - 1 - row_from_bottom
    return row * resolution + col, int(outside.sum())


def histogram_from_points(pts: np.ndarray, domain: Rect, resolution: int) -> GridHistogram:
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if domain.width <= 0 or domain.height <= 0:
        raise ValueError("degenerate histogram domain")
    keys, outside = bin_keys(np.asarray(pts, dtype=float).reshape(-1, 2), domain, resolution)
    uk, uc = np.unique(keys, return_counts=True)
    return GridHistogram(domain, resolution, uk, uc.astype(np.int64), outside)


def build_histogram(source: Dataset | str | os.PathLike, domain: Rect, resolution: int,
                    reader: PointReader | None = None) -> GridHistogram:
    """One pass over the source file, merging per-chunk sparse counts."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if domain.width <= 0 or domain.height <= 0:
        raise ValueError("degenerate histogram domain")
    path = source.path if isinstance(source, Dataset) else source
    reader = reader or PointReader(path)
    keys_acc, counts_acc, outside = [], [], 0
    for chunk in reader.scan():
        k, o = bin_keys(chunk, domain, resolution)
        uk, uc = np.unique(k, return_counts=True)
        keys_acc.append(uk)
        counts_acc.append(uc)
        outside += o
    if not keys_acc:
        return GridHistogram(domain, resolution, np.empty(0, np.int64), np.empty(0, np.int64), 0)
    allk = np.concatenate(keys_acc)
    allc = np.concatenate(counts_acc)
    uk, inv = np.unique(allk, return_inverse=True)
    merged = np.bincount(inv, weights=allc).astype(np.int64)
    return GridHistogram(domain, resolution, uk, merged, outside)


def normalize(h: GridHistogram) -> ProbVector:
    total = h.total
    if total == 0:
        raise EmptyHistogram("histogram has no points")
    return ProbVector(h.domain, h.resolution, h.keys, h.counts / total)


def kld_to_mixture(p: ProbVector, q: ProbVector, base: float = 2.0) -> tuple[float, float]:
    """KL divergences of p and q from their pointwise mean M."""
    if p.resolution != q.resolution or p.domain != q.domain:
        raise DomainMismatch("histograms use different grids")
    keys = np.union1d(p.keys, q.keys)
    pv = np.zeros(len(keys))
    qv = np.zeros(len(keys))
    pv[np.searchsorted(keys, p.keys)] = p.probs
    qv[np.searchsorted(keys, q.keys)] = q.probs
    m = 0.5 * (pv + qv)
    log = math.log(base)

    def _kl(a: np.ndarray) -> float:
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz]))) / log

    return _kl(pv), _kl(qv)


def jsd(p: ProbVector, q: ProbVector, base: float = 2.0) -> float:
    """Jensen-Shannon divergence; in [0, 1] for base 2, with 0 log 0 = 0."""
    k1, k2 = kld_to_mixture(p, q, base)
    value = 0.5 * k1 + 0.5 * k2
    upper = 1.0 if base == 2.0 else math.log(2.0) / math.log(base)
    return min(max(value, 0.0), upper)


def _cache_key(ids: Sequence[str], domain: Rect, resolution: int, base: float) -> str:
    blob = json.dumps([list(ids), domain.as_list(), resolution, base])
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def ground_truth_matrix(datasets: Sequence[Dataset], domain: Rect, resolution: int,
                        cache_dir: str | os.PathLike | None = None,
                        base: float = 2.0) -> np.ndarray:
    """Symmetric pairwise JSD matrix with zero diagonal, cached as JSON."""
    if len(datasets) < 2:
        raise ValueError("need at least 2 datasets")
    ids = [d.id for d in datasets]
    cache_file = None
    if cache_dir is not None:
        cache_file = Path(cache_dir) / f"gt_{_cache_key(ids, domain, resolution, base)}.json"
        if cache_file.exists():
            doc = json.loads(cache_file.read_text())
            if doc.get("ids") == ids:
                return np.asarray(doc["matrix"], dtype=float)
    probs = [normalize(build_histogram(d, domain, resolution)) for d in datasets]
    n = len(datasets)
    mat = np.zeros((n, n))
    for i, j in combinations(range(n), 2):
        mat[i, j] = mat[j, i] = jsd(probs[i], probs[j], base)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_file.with_suffix(".tmp")
        tmp.write_text(json.dumps({"ids": ids, "domain": domain.as_list(),
                                   "resolution": resolution, "matrix": mat.tolist()}))
        os.replace(tmp, cache_file)
    return mat
