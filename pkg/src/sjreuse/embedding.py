"""Nine-feature dataset embedding built from covering-polygon metadata."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import DatasetMetadata

FEATURE_ORDER = (
    "log_count", "log_area", "cx", "cy", "bminx", "bminy", "bmaxx", "bmaxy", "compactness",
)
DEFAULT_COORD_SCALE = 1e6


@dataclass(frozen=True)
class DatasetEmbedding:
    v: tuple[float, ...]
    source_id: str = ""

    def __post_init__(self):
        if len(self.v) != len(FEATURE_ORDER):
            raise ValueError(f"embedding must have {len(FEATURE_ORDER)} entries")
        if not all(math.isfinite(x) for x in self.v):
            raise ValueError("embedding entries must be finite")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.v, dtype=float)


def embed(m: DatasetMetadata, coord_scale: float = DEFAULT_COORD_SCALE,
          source_id: str = "") -> DatasetEmbedding:
    # log1p keeps tiny counts/areas finite and positive
    b = m.bbox
    return DatasetEmbedding((
        math.log1p(m.n_points),
        math.log1p(m.area),
        m.centroid.x / coord_scale,
        m.centroid.y / coord_scale,
        b.min_x / coord_scale,
        b.min_y / coord_scale,
        b.max_x / coord_scale,
        b.max_y / coord_scale,
        m.compactness,
    ), source_id)
