"""Random forest over the single best-match similarity feature.

Decides whether a matched partitioner should be reused (1) or the join
repartitioned (0). Trees are bootstrap-trained, split at midpoints between
distinct similarity values to minimise Gini impurity, and vote; a tied vote
falls back to repartitioning.
"""
from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError

REUSE = "reuse"
REPARTITION = "repartition"


@dataclass(frozen=True)
class DecisionSample:
    sim_max: float
    t1: float  # runtime reusing the matched partitioner (inf if it failed)
    t2: float  # runtime building a fresh partitioner

    @property
    def label(self) -> int:
        return 1 if self.t1 < self.t2 else 0

    def to_json(self) -> dict:
        return {"sim_max": self.sim_max, "t1": _enc(self.t1), "t2": _enc(self.t2),
                "label": self.label}

    @classmethod
    def from_json(cls, doc: dict) -> "DecisionSample":
        return cls(float(doc["sim_max"]), _dec(doc["t1"]), _dec(doc["t2"]))


def _enc(v: float):
    return "inf" if math.isinf(v) else v


def _dec(v) -> float:
    return math.inf if v == "inf" else float(v)


def _gini(pos: np.ndarray, n: np.ndarray) -> np.ndarray:
    p = np.divide(pos, n, out=np.zeros_like(pos, dtype=float), where=n > 0)
    return 1.0 - p * p - (1.0 - p) * (1.0 - p)


def _grow(x: np.ndarray, y: np.ndarray, depth: int, max_depth: int, nodes: list) -> int:
    me = len(nodes)
    nodes.append(None)
    pos = int(y.sum())
    majority = 1 if 2 * pos > len(y) else 0  # leaf ties lean to repartition
    if depth >= max_depth or pos == 0 or pos == len(y):
        nodes[me] = {"leaf_class": majority}
        return me
    vals = np.unique(x)
    if len(vals) < 2:
        nodes[me] = {"leaf_class": majority}
        return me
    thresholds = 0.5 * (vals[:-1] + vals[1:])
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n_left = np.searchsorted(xs, thresholds, side="right")
    cum = np.concatenate([[0], np.cumsum(ys)])
    pos_left = cum[n_left]
    n = len(y)
    n_right = n - n_left
    imp = (n_left * _gini(pos_left, n_left) + n_right * _gini(pos - pos_left, n_right)) / n
    best = int(np.argmin(imp))
    if imp[best] >= _gini(np.array([pos]), np.array([n]))[0]:
        nodes[me] = {"leaf_class": majority}
        return me
    thr = float(thresholds[best])
    mask = x <= thr
    left = _grow(x[mask], y[mask], depth + 1, max_depth, nodes)
    right = _grow(x[~mask], y[~mask], depth + 1, max_depth, nodes)
    nodes[me] = {"threshold": thr, "left": left, "right": right}
    return me


def _tree_predict(nodes: list, x: float) -> int:
    i = 0
    while "leaf_class" not in nodes[i]:
        node = nodes[i]
        i = node["left"] if x <= node["threshold"] else node["right"]
    return nodes[i]["leaf_class"]


@dataclass
class DecisionForest:
    trees: list[list[dict]]
    n_trees: int = 100
    max_depth: int = 5
    seed: int = 0

    def votes(self, sim_max: float) -> int:
        return sum(_tree_predict(t, float(sim_max)) for t in self.trees)

    def predict(self, sim_max: float) -> str:
        v = self.votes(sim_max)
        return REUSE if 2 * v > len(self.trees) else REPARTITION

    def accuracy(self, samples: Sequence[DecisionSample]) -> float:
        hits = [(self.predict(s.sim_max) == REUSE) == bool(s.label) for s in samples]
        return float(np.mean(hits)) if hits else float("nan")

    def to_json(self) -> dict:
        return {"n_trees": self.n_trees, "max_depth": self.max_depth,
                "trees": [{"nodes": t} for t in self.trees], "seed": self.seed}

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), separators=(",", ":")))
        os.replace(tmp, path)
        return path

    @classmethod
    def from_json(cls, doc: dict) -> "DecisionForest":
        try:
            trees = [t["nodes"] for t in doc["trees"]]
            forest = cls(trees, int(doc["n_trees"]), int(doc["max_depth"]), int(doc["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError("forest", str(exc)) from exc
        for t in trees:
            for node in t:
                if "leaf_class" not in node and not {"threshold", "left", "right"} <= set(node):
                    raise FormatError("forest.node", repr(node))
        return forest

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DecisionForest":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError("json", str(exc)) from exc


def fit(samples: Sequence[DecisionSample], n_trees: int = 100, max_depth: int = 5,
        seed: int = 0) -> DecisionForest:
    x = np.array([s.sim_max for s in samples], dtype=float)
    y = np.array([s.label for s in samples], dtype=np.int64)
    if len(samples) < 2 or y.min(initial=1) == y.max(initial=0):
        const = int(y[0]) if len(y) else 0
        warnings.warn(f"decision forest degenerate: constant class {const} "
                      f"from {len(samples)} sample(s)", stacklevel=2)
        return DecisionForest([[{"leaf_class": const}] for _ in range(n_trees)],
                              n_trees, max_depth, seed)
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_trees):
        idx = rng.integers(0, len(x), size=len(x))
        nodes: list = []
        _grow(x[idx], y[idx], 0, max_depth, nodes)
        trees.append(nodes)
    return DecisionForest(trees, n_trees, max_depth, seed)
