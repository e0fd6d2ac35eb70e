"""Partitioned distance join over point files.

Global partitioning routes each R point to exactly one block and replicates
each S point to every block within ``theta`` of it; a qualifying pair is
then seen only in the block owning its R point, so no dedup pass is needed.
Blocks are joined independently with an x-sorted plane sweep on a thread
pool and the pair list is sorted before it is returned.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import quadtree
from .datasets import Dataset, PointReader, reservoir_scan
from .errors import CapacityError
from .geometry import Rect
from .quadtree import QuadtreePartitioner

DEFAULT_CAPACITY_CAP = 5_000_000
CANDIDATE_CHUNK = 2_000_000
PHASES = ("sample_scan", "partitioner_build", "partitioner_load", "routing", "local_join", "merge")


@dataclass
class JoinQuery:
    R: Dataset
    S: Dataset
    theta: float

    def __post_init__(self):
        if not self.theta >= 0:
            raise ValueError("theta must be >= 0")


@dataclass
class JoinStats:
    sample_scan: float = 0.0
    partitioner_build: float = 0.0
    partitioner_load: float = 0.0
    routing: float = 0.0
    local_join: float = 0.0
    merge: float = 0.0
    data_passes_R: int = 0
    data_passes_S: int = 0
    construction_passes_R: int = 0
    block_R_counts: list[int] = field(default_factory=list)
    block_S_counts: list[int] = field(default_factory=list)
    reused_partitioner: bool = False
    matched_dataset_id: str | None = None
    partitioner_id: str | None = None
    n_blocks: int = 0
    scan_rows: int = 0
    build_points: int = 0
    candidate_pairs: int = 0
    result_pairs: int = 0

    @property
    def partitioning_time(self) -> float:
        return self.sample_scan + self.partitioner_build + self.partitioner_load + self.routing

    @property
    def total_time(self) -> float:
        return self.partitioning_time + self.local_join + self.merge

    @property
    def work(self) -> int:
        """Deterministic cost proxy: rows touched plus candidate pairs checked."""
        routed = sum(self.block_R_counts) + sum(self.block_S_counts)
        return self.scan_rows + self.build_points + routed + self.candidate_pairs

    def to_json(self, timings: bool = True) -> dict:
        doc = asdict(self)
        if not timings:
            for k in PHASES:
                doc.pop(k)
        else:
            doc["partitioning_time"] = self.partitioning_time
            doc["total_time"] = self.total_time
        doc["work"] = self.work
        return doc


@dataclass
class JoinResult:
    pairs: np.ndarray  # (k, 2) int64, rows sorted by (r_index, s_index)
    stats: JoinStats

    def pair_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.pairs}

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("r_index,s_index\n")
            np.savetxt(fh, self.pairs, fmt="%d", delimiter=",")


def speedup_report(build: JoinStats, reuse: JoinStats) -> dict:
    """Ratios of build-from-scratch cost over reuse cost (>1 means reuse won)."""
    def ratio(a: float, b: float) -> float:
        if b == 0:
            return 1.0 if a == 0 else float("inf")
        return a / b

    return {
        "overall": ratio(build.total_time, reuse.total_time),
        "partitioning": ratio(build.partitioning_time, reuse.partitioning_time),
        "work": ratio(build.work, reuse.work),
    }


def _sweep_order(pts: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.lexsort((idx, pts[:, 1], pts[:, 0]))


def plane_sweep(R: np.ndarray, r_idx: np.ndarray, S: np.ndarray, s_idx: np.ndarray,
                theta: float) -> tuple[np.ndarray, int]:
    """All (r, s) with distance <= theta, via an x-window sweep over sorted S.

    Returns global index pairs (unsorted) and the number of candidates that
    went through the exact distance check.
    """
    if len(R) == 0 or len(S) == 0:
        return np.empty((0, 2), dtype=np.int64), 0
    ro = _sweep_order(R, r_idx)
    so = _sweep_order(S, s_idx)
    R, r_idx = R[ro], r_idx[ro]
    S, s_idx = S[so], s_idx[so]
    sx = S[:, 0]
    lo = np.searchsorted(sx, R[:, 0] - theta, side="left")
    hi = np.searchsorted(sx, R[:, 0] + theta, side="right")
    width = hi - lo
    total = int(width.sum())
    out = []
    theta2 = theta * theta
    cum = np.cumsum(width)
    start = 0
    while start < len(R):
        base = cum[start - 1] if start else 0
        stop = int(np.searchsorted(cum, base + CANDIDATE_CHUNK, side="right"))
        stop = max(stop, start + 1)
        w = width[start:stop]
        n = int(w.sum())
        if n:
            ri = np.repeat(np.arange(start, stop), w)
            offs = np.arange(n) - np.repeat(np.cumsum(w) - w, w)
            si = lo[ri] + offs
            d2 = (R[ri, 0] - S[si, 0]) ** 2 + (R[ri, 1] - S[si, 1]) ** 2
            ok = d2 <= theta2
            out.append(np.column_stack([r_idx[ri[ok]], s_idx[si[ok]]]))
        start = stop
    if not out:
        return np.empty((0, 2), dtype=np.int64), total
    return np.concatenate(out).astype(np.int64, copy=False), total


def _buckets(block_of: np.ndarray, n_blocks: int) -> list[np.ndarray]:
    order = np.argsort(block_of, kind="stable")
    counts = np.bincount(block_of, minlength=n_blocks)
    return np.split(order, np.cumsum(counts)[:-1])


def join_points(R: np.ndarray, S: np.ndarray, theta: float, p: QuadtreePartitioner,
                workers: int = 1, capacity_cap: int = DEFAULT_CAPACITY_CAP,
                stats: JoinStats | None = None) -> JoinResult:
    """Route, join per block on ``workers`` threads, merge. Point arrays in memory."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if theta < 0:
        raise ValueError("theta must be >= 0")
    stats = stats or JoinStats()
    R = np.asarray(R, dtype=float).reshape(-1, 2)
    S = np.asarray(S, dtype=float).reshape(-1, 2)
    nb = p.n_blocks

    t = time.perf_counter()
    r_block = p.route_points(R)
    s_pt, s_block = p.expand_points(S, theta)
    r_buckets = _buckets(r_block, nb)
    s_order = np.argsort(s_block, kind="stable")
    s_counts = np.bincount(s_block, minlength=nb)
    s_buckets = np.split(s_pt[s_order], np.cumsum(s_counts)[:-1])
    stats.routing += time.perf_counter() - t
    stats.block_R_counts = [len(b) for b in r_buckets]
    stats.block_S_counts = [int(c) for c in s_counts]
    stats.n_blocks = nb
    for b in range(nb):
        size = stats.block_R_counts[b] + stats.block_S_counts[b]
        if size > capacity_cap:
            raise CapacityError(b, size, capacity_cap)

    def work(b: int):
        ri, si = r_buckets[b], s_buckets[b]
        return plane_sweep(R[ri], ri, S[si], si, theta)

    t = time.perf_counter()
    live = [b for b in range(nb) if len(r_buckets[b]) and len(s_buckets[b])]
    if workers == 1 or len(live) <= 1:
        parts = [work(b) for b in live]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, live))
    stats.local_join += time.perf_counter() - t

    t = time.perf_counter()
    stats.candidate_pairs += sum(c for _, c in parts)
    if parts:
        pairs = np.concatenate([pp for pp, _ in parts])
    else:
        pairs = np.empty((0, 2), dtype=np.int64)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    stats.merge += time.perf_counter() - t
    stats.result_pairs = len(pairs)
    return JoinResult(pairs, stats)


def nested_loop_join(R: np.ndarray, S: np.ndarray, theta: float, chunk: int = 512) -> np.ndarray:
    """O(|R| |S|) reference join, sorted like :func:`join_points` output."""
    R = np.asarray(R, dtype=float).reshape(-1, 2)
    S = np.asarray(S, dtype=float).reshape(-1, 2)
    out = []
    for s in range(0, len(R), chunk):
        blk = R[s:s + chunk]
        d2 = ((blk[:, None, :] - S[None, :, :]) ** 2).sum(axis=2)
        r, c = np.nonzero(d2 <= theta * theta)
        out.append(np.column_stack([r + s, c]))
    if not out:
        return np.empty((0, 2), dtype=np.int64)
    pairs = np.concatenate(out).astype(np.int64)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


class JoinEngine:
    """Simulated cluster: a worker count, a global domain and partitioner settings."""

    def __init__(self, domain: Rect, workers: int = 4, user_max_depth: int = 8,
                 sample_cap: int = 10_000, capacity_cap: int = DEFAULT_CAPACITY_CAP,
                 seed: int = 0, node_capacity: int | None = None):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.domain = domain
        self.workers = workers
        self.user_max_depth = user_max_depth
        self.sample_cap = sample_cap
        self.capacity_cap = capacity_cap
        self.seed = seed
        self.node_capacity = node_capacity

    def build_or_fetch_partitioner(self, q: JoinQuery, decision: str,
                                   partitioner_path: str | Path | None = None,
                                   stats: JoinStats | None = None,
                                   reader_R: PointReader | None = None,
                                   matched_id: str | None = None
                                   ) -> tuple[QuadtreePartitioner, JoinStats]:
        stats = stats or JoinStats()
        if decision == "reuse":
            if partitioner_path is None:
                raise ValueError("reuse needs a partitioner path")
            t = time.perf_counter()
            p = QuadtreePartitioner.load(partitioner_path)
            stats.partitioner_load += time.perf_counter() - t
            stats.reused_partitioner = True
            stats.matched_dataset_id = matched_id
        else:
            reader_R = reader_R or PointReader(q.R.path)
            t = time.perf_counter()
            before = reader_R.passes
            count, sample, _ = reservoir_scan(reader_R, self.sample_cap, self.seed)
            stats.construction_passes_R += reader_R.passes - before
            stats.scan_rows += count
            stats.sample_scan += time.perf_counter() - t
            t = time.perf_counter()
            p = quadtree.build(sample, self.domain, self.workers, self.user_max_depth,
                               id=q.R.id, capacity=self.node_capacity)
            stats.build_points += len(sample)
            stats.partitioner_build += time.perf_counter() - t
            stats.reused_partitioner = False
        stats.partitioner_id = p.id
        return p, stats

    def execute(self, q: JoinQuery, p: QuadtreePartitioner, stats: JoinStats | None = None,
                reader_R: PointReader | None = None, reader_S: PointReader | None = None,
                workers: int | None = None) -> JoinResult:
        stats = stats or JoinStats()
        reader_R = reader_R or PointReader(q.R.path)
        reader_S = reader_S or PointReader(q.S.path)
        t = time.perf_counter()
        R = reader_R.read_all()
        S = reader_S.read_all()
        stats.routing += time.perf_counter() - t
        res = join_points(R, S, q.theta, p, workers or self.workers, self.capacity_cap, stats)
        stats.data_passes_R = reader_R.passes
        stats.data_passes_S = reader_S.passes
        return res

    def run(self, q: JoinQuery, decision: str = "repartition",
            partitioner_path: str | Path | None = None, matched_id: str | None = None
            ) -> tuple[JoinResult, QuadtreePartitioner]:
        """Partitioner acquisition plus execution with shared pass counters."""
        reader_R = PointReader(q.R.path)
        reader_S = PointReader(q.S.path)
        p, stats = self.build_or_fetch_partitioner(q, decision, partitioner_path,
                                                   reader_R=reader_R, matched_id=matched_id)
        res = self.execute(q, p, stats, reader_R, reader_S)
        return res, p
