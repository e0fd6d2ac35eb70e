"""Point-dataset ingestion, metadata sidecars and synthetic workloads."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .errors import DegenerateInput, FormatError, ParseError
from .geometry import Point, Polygon, Rect, convex_hull, polygon_metrics

DEFAULT_SAMPLE_CAP = 10_000
CHUNK_ROWS = 1 << 20


def _looks_like_header(line: str) -> bool:
    parts = line.strip().split(",")
    try:
        [float(p) for p in parts]
    except ValueError:
        return True
    return False


def _locate_bad_line(path: Path, has_header: bool) -> ParseError:
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1 and has_header:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                return ParseError(lineno, f"expected 2 columns, got {len(row)}")
            try:
                x, y = float(row[0]), float(row[1])
            except ValueError:
                return ParseError(lineno, f"not numeric: {row!r}")
            if not (math.isfinite(x) and math.isfinite(y)):
                return ParseError(lineno, f"non-finite coordinate: {row!r}")
    return ParseError(0, "unparseable file")


class PointReader:
    """CSV ``x,y`` reader that counts complete passes over its file.

    A pass is counted when a scan starts; ``passes`` therefore reflects the
    number of times the data was touched, whether or not the caller drained
    the iterator.
    """

    def __init__(self, path: str | os.PathLike, chunk_rows: int = CHUNK_ROWS):
        self.path = Path(path)
        self.chunk_rows = chunk_rows
        self.passes = 0
        with open(self.path) as fh:
            first = ""
            for first in fh:
                if first.strip():
                    break
        self.has_header = bool(first.strip()) and _looks_like_header(first)

    def scan(self) -> Iterator[np.ndarray]:
        self.passes += 1
        try:
            reader = pd.read_csv(
                self.path, header=None, names=["x", "y", "_extra"],
                skiprows=1 if self.has_header else 0, dtype="float64",
                chunksize=self.chunk_rows, skip_blank_lines=True,
                engine="c", index_col=False,
            )
            for chunk in reader:
                if chunk["_extra"].notna().any():
                    raise ValueError("extra column")
                arr = chunk[["x", "y"]].to_numpy(dtype=np.float64)
                if not np.isfinite(arr).all():
                    raise ValueError("non-finite")
                yield arr
        except (ValueError, pd.errors.ParserError) as exc:
            err = _locate_bad_line(self.path, self.has_header)
            raise err from exc

    def read_all(self) -> np.ndarray:
        parts = list(self.scan())
        if not parts:
            return np.empty((0, 2))
        return np.concatenate(parts, axis=0)


def write_points(path: str | os.PathLike, pts: np.ndarray, header: bool = True) -> None:
    pd.DataFrame(np.asarray(pts, dtype=float), columns=["x", "y"]).to_csv(
        path, index=False, header=header, float_format="%.17g")


def reservoir_scan(reader: PointReader, cap: int, seed: int
                   ) -> tuple[int, np.ndarray, Rect | None]:
    """One pass: count, uniform sample without replacement, bounding box.

    Keeps the ``cap`` rows with the smallest seeded uniform keys, which is a
    uniform sample regardless of chunking. The sample is returned in file
    order.
    """
    rng = np.random.default_rng(seed)
    count = 0
    keys = np.empty(0)
    rows = np.empty(0, dtype=np.int64)
    pts = np.empty((0, 2))
    lo = np.array([np.inf, np.inf])
    hi = -lo
    for chunk in reader.scan():
        n = len(chunk)
        if n == 0:
            continue
        lo = np.minimum(lo, chunk.min(axis=0))
        hi = np.maximum(hi, chunk.max(axis=0))
        ck = rng.random(n)
        keys = np.concatenate([keys, ck])
        rows = np.concatenate([rows, np.arange(count, count + n)])
        pts = np.concatenate([pts, chunk])
        if len(keys) > cap:
            keep = np.argpartition(keys, cap - 1)[:cap]
            keys, rows, pts = keys[keep], rows[keep], pts[keep]
        count += n
    order = np.argsort(rows, kind="stable")
    bbox = Rect(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])) if count else None
    return count, pts[order], bbox


@dataclass(frozen=True)
class DatasetMetadata:
    n_points: int
    covering: Polygon
    area: float
    centroid: Point
    bbox: Rect
    compactness: float

    @classmethod
    def from_sample(cls, n_points: int, sample: np.ndarray) -> "DatasetMetadata":
        hull = convex_hull(sample)
        m = polygon_metrics(hull)
        bbox = Rect.bounding(hull.as_array())
        return cls(n_points, hull, m.area, m.centroid, bbox, m.compactness)


@dataclass(frozen=True)
class Dataset:
    id: str
    path: Path
    count: int
    metadata: DatasetMetadata
    sample: np.ndarray | None = field(default=None, compare=False, repr=False)

    def sidecar(self) -> dict:
        m = self.metadata
        return {
            "id": self.id,
            "count": self.count,
            "area": m.area,
            "centroid": [m.centroid.x, m.centroid.y],
            "bbox": m.bbox.as_list(),
            "compactness": m.compactness,
            "hull": [[v.x, v.y] for v in m.covering.vertices],
            "path": str(self.path),
        }

    def save_sidecar(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.sidecar(), indent=1))

    @classmethod
    def load_sidecar(cls, path: str | os.PathLike) -> "Dataset":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError("sidecar", str(exc)) from exc
        for key in ("id", "count", "area", "centroid", "bbox", "compactness", "hull", "path"):
            if key not in doc:
                raise FormatError(key, "missing")
        hull = Polygon(tuple(Point(float(x), float(y)) for x, y in doc["hull"]))
        meta = DatasetMetadata(
            n_points=int(doc["count"]), covering=hull, area=float(doc["area"]),
            centroid=Point(*map(float, doc["centroid"])), bbox=Rect.from_list(doc["bbox"]),
            compactness=float(doc["compactness"]),
        )
        data_path = Path(doc["path"])
        if not data_path.is_absolute():
            data_path = path.parent / data_path
        return cls(doc["id"], data_path, int(doc["count"]), meta)


def ingest(path: str | os.PathLike, id: str, sample_cap: int = DEFAULT_SAMPLE_CAP,
           seed: int = 0, reader: PointReader | None = None) -> Dataset:
    if sample_cap < 3:
        raise ValueError("sample_cap must be >= 3")
    reader = reader or PointReader(path)
    count, sample, _ = reservoir_scan(reader, sample_cap, seed)
    if count < 3:
        raise DegenerateInput(f"{id}: only {count} points")
    meta = DatasetMetadata.from_sample(count, sample)
    return Dataset(id, Path(path), count, meta, sample)


def enlarge(d: Dataset, target_count: int, resolution: int, seed: int,
            out_path: str | os.PathLike, out_id: str | None = None,
            sample_cap: int = DEFAULT_SAMPLE_CAP) -> Dataset:
    """Resample ``d`` through its own 2-D histogram up to ``target_count`` points.

    A bin is drawn proportionally to its count and the point placed uniformly
    inside it, so the output matches the source at bin granularity only.
    """
    if target_count < d.count:
        raise ValueError("target_count must be >= source count")
    pts = PointReader(d.path).read_all()
    box = Rect.bounding(pts)
    w = box.width or 1.0
    h = box.height or 1.0
    cw, ch = w / resolution, h / resolution
    col = np.clip(((pts[:, 0] - box.min_x) / cw).astype(np.int64), 0, resolution - 1)
    row = np.clip(((pts[:, 1] - box.min_y) / ch).astype(np.int64), 0, resolution - 1)
    keys, counts = np.unique(row * resolution + col, return_counts=True)

    rng = np.random.default_rng(seed)
    pick = rng.choice(len(keys), size=target_count, p=counts / counts.sum())
    r, c = np.divmod(keys[pick], resolution)
    u = rng.random((target_count, 2))
    out = np.column_stack([box.min_x + (c + u[:, 0]) * cw, box.min_y + (r + u[:, 1]) * ch])
    if box.width == 0:
        out[:, 0] = box.min_x
    if box.height == 0:
        out[:, 1] = box.min_y
    write_points(out_path, out)
    return ingest(out_path, out_id or f"{d.id}_x{target_count}", sample_cap, seed)


def gaussian_blob(n: int, center: tuple[float, float], sigma: float, seed: int,
                  domain: Rect | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = rng.normal(loc=center, scale=sigma, size=(n, 2))
    if domain is not None:
        pts[:, 0] = np.clip(pts[:, 0], domain.min_x, domain.max_x)
        pts[:, 1] = np.clip(pts[:, 1], domain.min_y, domain.max_y)
    return pts


def split_workload(datasets: Sequence, train_fraction: float, seed: int) -> tuple[list, list]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(datasets)
    if n < 2:
        raise ValueError("need at least 2 datasets to split")
    n_test = math.floor(n * (1.0 - train_fraction) + 1e-9)
    n_test = min(max(n_test, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = [d for i, d in enumerate(datasets) if i not in test_idx]
    test = [d for i, d in enumerate(datasets) if i in test_idx]
    return train, test


def pair_joins(datasets: Sequence, seed: int) -> list[tuple]:
    """Random cycle over the datasets: n pairs, every dataset on both sides once."""
    n = len(datasets)
    if n < 2:
        raise ValueError("need at least 2 datasets to pair")
    perm = np.random.default_rng(seed).permutation(n)
    return [(datasets[perm[i]], datasets[perm[(i + 1) % n]]) for i in range(n)]
