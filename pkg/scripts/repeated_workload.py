#!/usr/bin/env python3
"""Matching frequency on repeated and unseen joins.

Trains on a region corpus, then runs two workloads through the online path:
joins whose datasets are all in the repository (repeated joins), and joins
over freshly generated datasets from the same regions (unseen joins). Prints
how often each workload reused a stored partitioner and whether the matched
entry was the query's own dataset.

    python scripts/repeated_workload.py --out runs/repeated
"""
import argparse
from pathlib import Path

from sjreuse import pipeline
from sjreuse.config import EngineConfig
from sjreuse.geometry import Rect
from sjreuse.join import JoinQuery
from sjreuse.repository import Repository
from sjreuse.workloads import region_datasets

DOM = Rect(0, 0, 1e6, 1e6)
REGIONS = [(200_000, 250_000), (500_000, 800_000), (800_000, 300_000)]


def run(workload, cfg, repo):
    rows = []
    for R, S in workload:
        out = pipeline.online(JoinQuery(R, S, cfg.theta), cfg, repo)
        rows.append(out.trace)
    return rows


def summary(name, rows):
    n = len(rows)
    reuse = sum(r["decision"] == "reuse" for r in rows)
    own = sum(r["matched"] in (r["R"], r["S"]) for r in rows if r["matched"])
    print(f"{name:<10} joins {n:>3}  reuse {100 * reuse / n:5.1f}%  "
          f"matched own dataset {100 * own / n:5.1f}%")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/repeated")
    ap.add_argument("--n-points", type=int, default=20_000)
    ap.add_argument("--joins", type=int, default=20)
    ap.add_argument("--theta", type=float, default=500.0)
    ap.add_argument("--cost-model", choices=("wall", "work"), default="wall")
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    out = Path(args.out).resolve()
    cfg = EngineConfig(global_domain=DOM, histogram_resolution=128, theta=args.theta,
                       cost_model=args.cost_model, repo_dir=out / "repo", data_dir=out / "data")
    cfg.ensure_dirs()
    train = region_datasets(cfg.data_dir, REGIONS, 2, args.n_points, 30_000, args.seed, DOM,
                            cfg.sample_cap, cfg.seed_ingest)
    if len(Repository(cfg.repo_dir)) == 0:
        pipeline.offline(train, None, cfg)
    repo = Repository(cfg.repo_dir)
    repeated = [(train[i % len(train)], train[(i % len(train)) ^ 1]) for i in range(args.joins)]
    unseen_ds = region_datasets(cfg.data_dir, REGIONS, 2, args.n_points, 30_000, args.seed + 1,
                                DOM, cfg.sample_cap, cfg.seed_ingest, prefix="new")
    unseen = [(unseen_ds[i % len(unseen_ds)], unseen_ds[(i % len(unseen_ds)) ^ 1])
              for i in range(args.joins)]
    summary("repeated", run(repeated, cfg, repo))
    summary("unseen", run(unseen, cfg, repo))


if __name__ == "__main__":
    main()
