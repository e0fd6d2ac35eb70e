"""Synthetic point datasets and join workloads for tests and benchmarks."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import Dataset, ingest, write_points
from .geometry import Rect


def mixture(n: int, centers: Sequence[tuple[float, float]], sigmas: Sequence[float],
            weights: Sequence[float] | None, seed: int, domain: Rect | None = None) -> np.ndarray:
    """``n`` points from an isotropic Gaussian mixture, clamped into ``domain``."""
    rng = np.random.default_rng(seed)
    k = len(centers)
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, float) / np.sum(weights)
    comp = rng.choice(k, size=n, p=w)
    c = np.asarray(centers, dtype=float)[comp]
    s = np.asarray(sigmas, dtype=float)[comp]
    pts = c + rng.normal(size=(n, 2)) * s[:, None]
    if domain is not None:
        pts[:, 0] = np.clip(pts[:, 0], domain.min_x, domain.max_x)
        pts[:, 1] = np.clip(pts[:, 1], domain.min_y, domain.max_y)
    return pts


def region_datasets(out_dir: str | os.PathLike, regions: Sequence[tuple[float, float]],
                    per_region: int, n_points: int, spread: float, seed: int,
                    domain: Rect | None = None, sample_cap: int = 10_000,
                    ingest_seed: int = 0, prefix: str = "") -> list[Dataset]:
    """``per_region`` mixture datasets around each region center.

    Datasets of one region share the region's overall footprint but differ in
    the number, placement and width of their components, so they are similar
    to each other and dissimilar to other regions.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    out = []
    for r, (cx, cy) in enumerate(regions):
        for i in range(per_region):
            k = int(rng.integers(2, 6))
            centers = [(cx + rng.normal(0, spread), cy + rng.normal(0, spread)) for _ in range(k)]
            sigmas = rng.uniform(0.1, 0.4, k) * spread
            id = f"{prefix}r{r}d{i}"
            path = out_dir / f"{id}.csv"
            write_points(path, mixture(n_points, centers, sigmas, rng.uniform(1, 3, k),
                                       int(rng.integers(2**31)), domain))
            d = ingest(path, id, sample_cap, ingest_seed)
            d.save_sidecar(out_dir / f"{id}.meta.json")
            out.append(d)
    return out
