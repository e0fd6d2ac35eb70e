"""Command line entry point: ``sjreuse <verb> [--config FILE] ...``.

Exit codes: 0 success, 1 user error (bad input, missing file, bad config),
2 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import EngineConfig, load_config
from .datasets import Dataset, enlarge, gaussian_blob, ingest, write_points
from .errors import (DegenerateInput, DuplicateId, EmptyRepository, FormatError, ParseError,
                     PipelineError, SJReuseError)
from .join import JoinQuery
from .repository import Repository

USER_ERRORS = (ValueError, FileNotFoundError, KeyError, ParseError, FormatError,
               DegenerateInput, DuplicateId, EmptyRepository)


class UserError(Exception):
    pass


def _cfg(args) -> EngineConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "theta", None) is not None:
        changes["theta"] = args.theta
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _sidecar(cfg: EngineConfig, id: str) -> Path:
    return cfg.data_dir / f"{id}.meta.json"


def _dataset(cfg: EngineConfig, id: str) -> Dataset:
    path = _sidecar(cfg, id)
    if not path.exists():
        cat = pipeline.load_catalog(cfg.repo_dir)
        if id not in cat:
            raise UserError(f"unknown dataset {id!r} (no {path} and not in repository catalog)")
        path = Path(cat[id])
    return Dataset.load_sidecar(path)


def _all_datasets(cfg: EngineConfig) -> list[Dataset]:
    return [Dataset.load_sidecar(p) for p in sorted(cfg.data_dir.glob("*.meta.json"))]


def _ids(text: str | None) -> list[str]:
    return [t for t in (text or "").split(",") if t]


def _pairs(text: str) -> list[tuple[str, str]]:
    out = []
    for tok in _ids(text):
        if ":" not in tok:
            raise UserError(f"join must be R:S, got {tok!r}")
        r, s = tok.split(":", 1)
        out.append((r, s))
    return out


def _save(cfg: EngineConfig, d: Dataset) -> Dataset:
    d.save_sidecar(_sidecar(cfg, d.id))
    return d


# -- verbs ----------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = _cfg(args)
    cfg.ensure_dirs()
    path = Path(args.path).resolve()
    d = ingest(path, args.id or path.stem, cfg.sample_cap, cfg.seed_ingest)
    _save(cfg, d)
    print(json.dumps({"id": d.id, "count": d.count, "bbox": d.metadata.bbox.as_list()}))
    return 0


def cmd_gen(args) -> int:
    cfg = _cfg(args)
    cfg.ensure_dirs()
    out = cfg.data_dir / f"{args.id}.csv"
    if args.kind == "enlarge":
        if not args.source:
            raise UserError("gen enlarge needs --source")
        src = _dataset(cfg, args.source)
        target = args.n if args.n is not None else src.count
        d = enlarge(src, target, args.resolution, args.seed, out.resolve(), args.id,
                    cfg.sample_cap)
    else:
        if args.n is None:
            raise UserError("--n is required")
        if args.kind == "blob":
            cx, cy = (float(v) for v in args.center.split(","))
            pts = gaussian_blob(args.n, (cx, cy), args.sigma, args.seed, cfg.global_domain)
        else:
            box = [float(v) for v in args.bbox.split(",")]
            rng = np.random.default_rng(args.seed)
            pts = np.column_stack([rng.uniform(box[0], box[2], args.n),
                                   rng.uniform(box[1], box[3], args.n)])
        write_points(out, pts)
        d = ingest(out.resolve(), args.id, cfg.sample_cap, cfg.seed_ingest)
    _save(cfg, d)
    print(json.dumps({"id": d.id, "count": d.count, "path": str(d.path)}))
    return 0


def cmd_offline(args) -> int:
    cfg = _cfg(args)
    ids = _ids(args.datasets)
    datasets = [_dataset(cfg, i) for i in ids] if ids else _all_datasets(cfg)
    joins = None
    if args.joins:
        by_id = {d.id: d for d in datasets}
        joins = [(by_id.get(r) or _dataset(cfg, r), by_id.get(s) or _dataset(cfg, s))
                 for r, s in _pairs(args.joins)]
    res = pipeline.offline(datasets, joins, cfg)
    print(json.dumps({"datasets": res.dataset_ids, "samples": len(res.samples),
                      "chosen": res.train_report["chosen"],
                      "final_val_mse": res.train_report.get("final_val_mse"),
                      "repository_entries": len(Repository(cfg.repo_dir))}))
    return 0


def cmd_join(args) -> int:
    cfg = _cfg(args)
    q = JoinQuery(_dataset(cfg, args.R), _dataset(cfg, args.S), cfg.theta)
    out = pipeline.online(q, cfg, force_repartition=args.force_repartition)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        out.result.to_csv(out_dir / "pairs.csv")
        (out_dir / "stats.json").write_text(json.dumps(out.result.stats.to_json(), indent=1) + "\n")
        (out_dir / "trace.json").write_text(json.dumps({**out.trace, "timings": out.timings},
                                                       indent=1) + "\n")
        cfg.snapshot(out_dir)
    print(json.dumps({**out.trace, "timings": out.timings}))
    return 0


def cmd_bench(args) -> int:
    cfg = _cfg(args)
    pairs = _pairs(args.joins) if args.joins else []
    if not pairs:
        raise UserError("bench needs --joins R:S[,R:S...]")
    pairs = pairs * args.repeat
    cache: dict[str, Dataset] = {}
    workload = []
    for r, s in pairs:
        for i in (r, s):
            if i not in cache:
                cache[i] = _dataset(cfg, i)
        workload.append((cache[r], cache[s]))
    res = pipeline.bench(workload, cfg, args.out)
    print(pipeline.format_bench(res["report"], res["timings"]), end="")
    return 0


def cmd_retrain(args) -> int:
    cfg = _cfg(args)
    new = [_dataset(cfg, i) for i in _ids(args.datasets)]
    print(json.dumps(pipeline.retrain(cfg, new)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sjreuse", description="Spatial distance joins with "
                                 "learned partitioner reuse.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, theta=False):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--workers", type=int)
        if theta:
            p.add_argument("--theta", type=float)
        return p

    p = common(sub.add_parser("ingest", help="register a CSV point file"))
    p.add_argument("path")
    p.add_argument("--id")
    p.set_defaults(func=cmd_ingest)

    p = common(sub.add_parser("gen", help="synthesize a dataset"))
    p.add_argument("kind", choices=("blob", "uniform", "enlarge"))
    p.add_argument("--id", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--center", default="0,0")
    p.add_argument("--sigma", type=float, default=1000.0)
    p.add_argument("--bbox", default="0,0,1000000,1000000")
    p.add_argument("--source")
    p.add_argument("--resolution", type=int, default=256)
    p.set_defaults(func=cmd_gen)

    p = common(sub.add_parser("offline", help="train model and forest, fill the repository"),
               theta=True)
    p.add_argument("--datasets", help="comma-separated ids (default: all in data_dir)")
    p.add_argument("--joins", help="comma-separated R:S pairs (default: random pairing)")
    p.set_defaults(func=cmd_offline)

    p = common(sub.add_parser("join", help="run one join through the online path"), theta=True)
    p.add_argument("R")
    p.add_argument("S")
    p.add_argument("--force-repartition", action="store_true")
    p.add_argument("--out", help="directory for pairs.csv, stats.json, trace.json")
    p.set_defaults(func=cmd_join)

    p = common(sub.add_parser("bench", help="forced repartition vs. online per join"),
               theta=True)
    p.add_argument("--joins", help="comma-separated R:S pairs")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--out", help="directory for bench.json, bench_timings.json, bench.txt")
    p.set_defaults(func=cmd_bench)

    p = common(sub.add_parser("retrain", help="refit model and forest on all known datasets"))
    p.add_argument("--datasets", help="comma-separated ids of new datasets to include")
    p.set_defaults(func=cmd_retrain)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UserError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        code = 1 if isinstance(exc.cause, USER_ERRORS) else 2
        print(f"error: {exc}", file=sys.stderr)
        return code
    except SJReuseError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
