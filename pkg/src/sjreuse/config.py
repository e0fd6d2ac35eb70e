"""Engine configuration: a dataclass plus a flat ``key = value`` file format.

Example file::

    # comments start with '#'
    global_domain = -20037508.34,-20037508.34,20037508.34,20037508.34
    workers = 4
    theta = 50
    repo_dir = repo
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .embedding import DEFAULT_COORD_SCALE
from .geometry import Rect
from .join import DEFAULT_CAPACITY_CAP

WORLD_MERCATOR = Rect(-20037508.34, -20037508.34, 20037508.34, 20037508.34)
COST_MODELS = ("wall", "work")


@dataclass
class EngineConfig:
    global_domain: Rect = WORLD_MERCATOR
    histogram_domain: Rect | None = None  # None: union of dataset bboxes, padded 1%
    histogram_resolution: int = 8192
    coord_scale: float = DEFAULT_COORD_SCALE
    workers: int = 4
    user_max_depth: int = 8
    sample_cap: int = 10_000
    capacity_cap: int = DEFAULT_CAPACITY_CAP
    node_capacity: int | None = None
    theta: float = 50.0
    # "wall" labels forest samples by measured runtimes, "work" by a
    # deterministic cost proxy (rows touched + candidate pairs)
    cost_model: str = "wall"
    seed_ingest: int = 0
    seed_train: int = 0
    seed_forest: int = 0
    seed_workload: int = 0
    n_trees: int = 100
    forest_depth: int = 5
    train_max_epochs: int = 50
    train_folds: int = 5
    train_batch_size: int = 24
    train_patience: int = 10
    repo_dir: Path = field(default_factory=lambda: Path("repo"))
    data_dir: Path = field(default_factory=lambda: Path("data"))

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.user_max_depth < 1:
            raise ValueError("user_max_depth must be >= 1")
        if self.sample_cap < 3:
            raise ValueError("sample_cap must be >= 3")
        if self.histogram_resolution < 1:
            raise ValueError("histogram_resolution must be >= 1")
        if not self.theta >= 0:
            raise ValueError("theta must be >= 0")
        if self.cost_model not in COST_MODELS:
            raise ValueError(f"cost_model must be one of {COST_MODELS}")
        self.repo_dir = Path(self.repo_dir)
        self.data_dir = Path(self.data_dir)

    @property
    def seeds(self) -> dict[str, int]:
        return {"ingest": self.seed_ingest, "train": self.seed_train,
                "forest": self.seed_forest, "workload": self.seed_workload}

    def ensure_dirs(self) -> None:
        self.repo_dir.mkdir(parents=True, exist_ok=True)
        self.data_dir.mkdir(parents=True, exist_ok=True)

    def replace(self, **changes) -> "EngineConfig":
        return dataclasses.replace(self, **changes)

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            out[f.name] = _format(v)
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat().items())

    def snapshot(self, directory: str | os.PathLike, name: str = "effective_config.txt") -> Path:
        path = Path(directory) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def _format(v) -> str:
    if isinstance(v, Rect):
        return ",".join(repr(x) for x in v.as_list())
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(name: str, raw: str, typ):
    raw = raw.strip()
    if raw.lower() in ("", "none") and name in ("histogram_domain", "node_capacity"):
        return None
    if name in ("global_domain", "histogram_domain"):
        parts = [float(x) for x in raw.split(",")]
        if len(parts) != 4:
            raise ValueError(f"{name}: need minx,miny,maxx,maxy")
        return Rect.from_list(parts)
    if name in ("repo_dir", "data_dir"):
        return Path(raw)
    if name == "cost_model":
        return raw
    if name in ("coord_scale", "theta"):
        return float(raw)
    return int(raw)


def parse_config(text: str, base: EngineConfig | None = None,
                 relative_to: str | os.PathLike | None = None) -> EngineConfig:
    """Parse flat ``key = value`` text. Unknown keys are an error."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string("[engine]\n" + text)
    known = {f.name: f.type for f in fields(EngineConfig)}
    changes = {}
    for key, raw in cp["engine"].items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        try:
            changes[key] = _parse(key, raw, known[key])
        except ValueError as exc:
            raise ValueError(f"bad value for {key}: {raw!r} ({exc})") from exc
    cfg = dataclasses.replace(base or EngineConfig(), **changes)
    if relative_to is not None:
        # relative directories, given or defaulted, live next to the config file
        for k in ("repo_dir", "data_dir"):
            v = getattr(cfg, k)
            if not v.is_absolute():
                setattr(cfg, k, Path(relative_to) / v)
    return cfg


def load_config(path: str | os.PathLike | None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    path = Path(path)
    return parse_config(path.read_text(), relative_to=path.parent)
