"""Offline training, online join processing, benchmarking and retraining.

The repository directory holds everything the online phase needs: the
manifest of stored partitioners, the similarity model, the decision forest,
a catalog of known datasets (sidecar paths) and the decision log.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from filelock import FileLock

from . import forest as forest_mod
from . import siamese
from .config import EngineConfig
from .datasets import Dataset, pair_joins
from .embedding import DatasetEmbedding, embed
from .errors import CapacityError, DuplicateId, FormatError, PipelineError, SJReuseError
from .forest import REPARTITION, REUSE, DecisionForest, DecisionSample
from .geometry import Rect
from .histogram import ground_truth_matrix
from .join import JoinEngine, JoinQuery, JoinResult, JoinStats, speedup_report
from .repository import Repository

log = logging.getLogger(__name__)

CATALOG = "catalog.json"
OFFLINE_STATE = "models/offline.json"
PERCENTILES = (("best", None), ("p25", 25), ("median", 50), ("p75", 75), ("worst", None))


# -- helpers --------------------------------------------------------------------

def make_engine(cfg: EngineConfig) -> JoinEngine:
    return JoinEngine(cfg.global_domain, workers=cfg.workers, user_max_depth=cfg.user_max_depth,
                      sample_cap=cfg.sample_cap, capacity_cap=cfg.capacity_cap,
                      seed=cfg.seed_ingest, node_capacity=cfg.node_capacity)


def cost(stats: JoinStats, cost_model: str) -> float:
    return stats.total_time if cost_model == "wall" else float(stats.work)


def histogram_domain(datasets: Sequence[Dataset], cfg: EngineConfig) -> Rect:
    if cfg.histogram_domain is not None:
        return cfg.histogram_domain
    box = datasets[0].metadata.bbox
    for d in datasets[1:]:
        box = box.union(d.metadata.bbox)
    return box.padded(0.01)


def _atomic_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def pipeline_lock(cfg: EngineConfig) -> FileLock:
    """One pipeline command per repository directory at a time."""
    cfg.repo_dir.mkdir(parents=True, exist_ok=True)
    return FileLock(str(cfg.repo_dir / ".pipeline.lock"))


def load_catalog(repo_dir: Path) -> dict[str, str]:
    path = Path(repo_dir) / CATALOG
    return json.loads(path.read_text()) if path.exists() else {}


def register(repo_dir: Path, datasets: Sequence[Dataset]) -> dict[str, str]:
    """Remember where each dataset's sidecar lives so retraining can find it."""
    cat = load_catalog(repo_dir)
    changed = False
    for d in datasets:
        side = sidecar_path(d)
        if not side.exists():
            d.save_sidecar(side)
        if cat.get(d.id) != str(side):
            cat[d.id] = str(side)
            changed = True
    if changed:
        _atomic_json(Path(repo_dir) / CATALOG, dict(sorted(cat.items())))
    return cat


def sidecar_path(d: Dataset) -> Path:
    return Path(d.path).with_name(Path(d.path).stem + ".meta.json")


def embedding_of(d: Dataset, cfg: EngineConfig) -> DatasetEmbedding:
    return embed(d.metadata, cfg.coord_scale, d.id)


def train_pairs(datasets: Sequence[Dataset], gt: np.ndarray, cfg: EngineConfig) -> list[tuple]:
    """All unordered pairs with their JSD target, plus self-pairs at 0."""
    embs = [embedding_of(d, cfg) for d in datasets]
    pairs = [(e, e, 0.0) for e in embs]
    for i in range(len(embs)):
        for j in range(i + 1, len(embs)):
            pairs.append((embs[i], embs[j], float(gt[i, j])))
    return pairs


def train_config(cfg: EngineConfig) -> siamese.TrainConfig:
    return siamese.TrainConfig(batch_size=cfg.train_batch_size, max_epochs=cfg.train_max_epochs,
                               patience=cfg.train_patience, folds=cfg.train_folds,
                               seed=cfg.seed_train)


def _percentiles(values: Sequence[float]) -> dict[str, float]:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=float)
    if len(v) == 0:
        return {name: float("nan") for name, _ in PERCENTILES}
    out = {}
    for name, q in PERCENTILES:
        if name == "best":
            out[name] = float(v.max())
        elif name == "worst":
            out[name] = float(v.min())
        else:
            out[name] = float(np.percentile(v, q, method="inverted_cdf"))
    return out


def _next_version(models_dir: Path) -> int:
    versions = [int(p.stem.split("-")[1]) for p in models_dir.glob("siamese-*.json")
                if p.stem.split("-")[1].isdigit()]
    return max(versions, default=-1) + 1


# -- offline --------------------------------------------------------------------

@dataclass
class OfflineResult:
    model: siamese.SiameseModel
    forest: DecisionForest
    samples: list[DecisionSample]
    train_report: dict
    gt: np.ndarray
    dataset_ids: list[str]


def _reuse_sample(engine: JoinEngine, repo: Repository, model, q: JoinQuery,
                  cfg: EngineConfig, build: JoinResult, exclude: Sequence[str]) -> dict:
    """Reuse the best match among non-excluded entries and label against ``build``."""
    m = repo.best_match(embedding_of(q.R, cfg), embedding_of(q.S, cfg), model, exclude)
    t2 = cost(build.stats, cfg.cost_model)
    try:
        reuse, _ = engine.run(q, REUSE, repo.resolve(m.entry.partitioner_path),
                              matched_id=m.entry.dataset_id)
        t1 = cost(reuse.stats, cfg.cost_model)
        if not np.array_equal(reuse.pairs, build.pairs):
            raise AssertionError("reuse and build results differ")
    except CapacityError:
        t1 = math.inf
    s = DecisionSample(m.sim_max, t1, t2)
    return {"R": q.R.id, "S": q.S.id, "matched": m.entry.dataset_id, **s.to_json()}


def collect_labels(training_joins: Sequence[tuple], engine: JoinEngine, repo: Repository,
                   model, cfg: EngineConfig, store: bool = True) -> list[dict]:
    """Decision-forest training records, one or two per training join.

    Every join is built from scratch once (t2) and its left dataset's
    partitioner stored in the repository when ``store`` is set. It is then
    rerun reusing (a) the best match among entries other than the join's
    own datasets, when any exist, and (b) the left dataset's own entry, when
    present. A reuse that overflows a block records t1 = inf, i.e. label 0.
    Records are dicts carrying ``sim_max``, ``t1``, ``t2``, ``label`` and ids.
    """
    records = []
    for R, S in training_joins:
        q = JoinQuery(R, S, cfg.theta)
        build, p = engine.run(q, REPARTITION)
        if store and R.id not in repo:
            repo.add_partitioner(R.id, embedding_of(R, cfg), p)
        ids = [e.dataset_id for e in repo.entries]
        if set(ids) - {R.id, S.id}:
            records.append(_reuse_sample(engine, repo, model, q, cfg, build,
                                         exclude=(R.id, S.id)))
        if R.id in ids:
            records.append(_reuse_sample(engine, repo, model, q, cfg, build,
                                         exclude=[i for i in ids if i != R.id]))
    return records


def offline(train_datasets: Sequence[Dataset], train_joins: Sequence[tuple] | None,
            cfg: EngineConfig) -> OfflineResult:
    """Embed, learn similarity, collect reuse samples, fit the decision forest.

    Each training join's left dataset gets a fresh partitioner stored in the
    repository. Decision samples come from two runs per join: reusing the
    best match among entries other than the join's own datasets, and
    reusing the left dataset's own partitioner (similarity 1).
    """
    if len(train_datasets) < 2:
        raise PipelineError("offline", ValueError("need at least 2 training datasets"))
    cfg.ensure_dirs()
    with pipeline_lock(cfg):
        repo = Repository(cfg.repo_dir)
        engine = make_engine(cfg)
        joins = list(train_joins) if train_joins is not None else pair_joins(
            list(train_datasets), cfg.seed_workload)
        try:
            register(cfg.repo_dir, train_datasets)
            gt = ground_truth_matrix(train_datasets, histogram_domain(train_datasets, cfg),
                                     cfg.histogram_resolution, cfg.repo_dir / "cache")
        except (SJReuseError, OSError) as exc:
            raise PipelineError("ground_truth", exc) from exc
        try:
            pairs = train_pairs(train_datasets, gt, cfg)
            model, report = siamese.train(pairs, train_config(cfg), cfg.coord_scale)
        except (SJReuseError, ValueError) as exc:
            raise PipelineError("siamese", exc) from exc

        try:
            records = collect_labels(joins, engine, repo, model, cfg)
        except (SJReuseError, OSError, AssertionError) as exc:
            raise PipelineError("decision_samples", exc) from exc

        samples = [DecisionSample.from_json(r) for r in records]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            forest = forest_mod.fit(samples, cfg.n_trees, cfg.forest_depth, cfg.seed_forest)
        for w in caught:
            warnings.warn(w.message, w.category, stacklevel=2)

        state = {
            "dataset_ids": [d.id for d in train_datasets],
            "joins": [[R.id, S.id] for R, S in joins],
            "samples": records,
            "seeds": cfg.seeds,
            "cost_model": cfg.cost_model,
        }
        _install_models(repo, cfg, model, forest, report, state)
    return OfflineResult(model, forest, samples, report, gt, [d.id for d in train_datasets])


def _install_models(repo: Repository, cfg: EngineConfig, model, forest, report: dict,
                    state: dict, fault: Callable[[str], None] | None = None) -> None:
    """Write versioned checkpoints, then swap the manifest references atomically."""
    models = cfg.repo_dir / "models"
    models.mkdir(parents=True, exist_ok=True)
    v = _next_version(models)
    model_path = models / f"siamese-{v:04d}.json"
    forest_path = models / f"forest-{v:04d}.json"
    model.save(model_path)
    if fault:
        fault("after_model")
    forest.save(forest_path)
    _atomic_json(models / f"train-report-{v:04d}.json", report)
    _atomic_json(cfg.repo_dir / OFFLINE_STATE, state)
    if fault:
        fault("before_swap")
    repo.set_models(str(model_path.relative_to(cfg.repo_dir)),
                    str(forest_path.relative_to(cfg.repo_dir)))
    repo.invalidate()
    cfg.snapshot(models)


def load_models(repo: Repository):
    """Active (model, forest) or (None, None) when offline has not run."""
    m = repo.manifest
    if not m.model_ref or not m.forest_ref:
        return None, None
    return (siamese.SiameseModel.load(repo.resolve(m.model_ref)),
            DecisionForest.load(repo.resolve(m.forest_ref)))


# -- online ---------------------------------------------------------------------

@dataclass
class OnlineOutcome:
    result: JoinResult
    trace: dict
    timings: dict = field(default_factory=dict)


def online(q: JoinQuery, cfg: EngineConfig, repo: Repository | None = None,
           engine: JoinEngine | None = None, force_repartition: bool = False,
           models=None, extra: dict | None = None) -> OnlineOutcome:
    """Match, decide, execute; append one decision trace to the repository log."""
    repo = repo or Repository(cfg.repo_dir)
    engine = engine or make_engine(cfg)
    model, forest = models if models is not None else load_models(repo)
    trace = {"R": q.R.id, "S": q.S.id, "theta": q.theta, "sim_max": None,
             "sim_R": None, "sim_S": None, "matched": None, "side": None,
             "votes": None, "decision": REPARTITION, "executed": REPARTITION,
             "reason": None, "fallback": None, "added": False}
    timings = {"match_ms": 0.0, "decision_ms": 0.0}

    if force_repartition:
        trace["reason"] = "forced"
    elif model is None or forest is None:
        warnings.warn("no offline artifacts in repository; repartitioning", stacklevel=2)
        trace["reason"] = "no_models"
    elif len(repo) == 0:
        trace["reason"] = "empty_repository"
    else:
        t = time.perf_counter()
        m = repo.best_match(embedding_of(q.R, cfg), embedding_of(q.S, cfg), model)
        timings["match_ms"] = 1e3 * (time.perf_counter() - t)
        t = time.perf_counter()
        votes = forest.votes(m.sim_max)
        decision = REUSE if 2 * votes > len(forest.trees) else REPARTITION
        timings["decision_ms"] = 1e3 * (time.perf_counter() - t)
        trace.update(sim_max=m.sim_max, sim_R=m.sim_R, sim_S=m.sim_S,
                     matched=m.entry.dataset_id, side=m.side, votes=votes, decision=decision)

    result = None
    if trace["decision"] == REUSE:
        try:
            result, _ = engine.run(q, REUSE, repo.resolve(repo.get(trace["matched"]).partitioner_path),
                                   matched_id=trace["matched"])
            trace["executed"] = REUSE
        except (CapacityError, FormatError, OSError) as exc:
            trace["fallback"] = f"{type(exc).__name__}: {exc}"
            log.warning("reuse failed (%s); repartitioning", trace["fallback"])
    if result is None:
        result, p = engine.run(q, REPARTITION)
        if not force_repartition and q.R.id not in repo:
            try:
                repo.add_partitioner(q.R.id, embedding_of(q.R, cfg), p)
                register(cfg.repo_dir, [q.R])
                trace["added"] = True
            except DuplicateId:
                pass
    trace["result_pairs"] = int(len(result.pairs))
    trace["work"] = result.stats.work
    if extra:
        trace.update(extra)
    timings.update({k: getattr(result.stats, k) for k in
                    ("sample_scan", "partitioner_build", "partitioner_load", "routing",
                     "local_join", "merge")})
    timings["partitioning_time"] = result.stats.partitioning_time
    timings["total_time"] = result.stats.total_time
    if not force_repartition:
        repo.append_trace({**trace, "timings": timings})
    return OnlineOutcome(result, trace, timings)


# -- bench ----------------------------------------------------------------------

def bench(workload: Sequence[tuple], cfg: EngineConfig, out_dir: str | os.PathLike | None = None,
          repo: Repository | None = None) -> dict:
    """Forced repartition vs. the online path for every join of the workload.

    Returns ``{"report": ..., "timings": ...}``: the report holds only
    seed-determined content (decisions, similarities, work ratios), the
    timings part holds wall-clock ratios and overheads.
    """
    repo = repo or Repository(cfg.repo_dir)
    engine = make_engine(cfg)
    models = load_models(repo)
    rows, trows = [], []
    for i, (R, S) in enumerate(workload):
        q = JoinQuery(R, S, cfg.theta)
        row = {"join": i, "R": R.id, "S": S.id}
        try:
            forced, _ = engine.run(q, REPARTITION)
            t2 = cost(forced.stats, cfg.cost_model)
            out = online(q, cfg, repo, engine, models=models)
            ok = bool(np.array_equal(out.result.pairs, forced.pairs))
            if out.trace["executed"] == REUSE:
                t1 = cost(out.result.stats, cfg.cost_model)
                _amend_last_trace(repo, {"t1": t1, "t2": t2, "label": int(t1 < t2)})
            r = speedup_report(forced.stats, out.result.stats)
            row.update(decision=out.trace["decision"], executed=out.trace["executed"],
                       matched=out.trace["matched"], sim_max=out.trace["sim_max"],
                       fallback=out.trace["fallback"], result_pairs=len(forced.pairs),
                       results_equal=ok, work_ratio=r["work"],
                       construction_passes_forced=forced.stats.construction_passes_R,
                       construction_passes_online=out.result.stats.construction_passes_R)
            trows.append({"join": i, "overall": r["overall"], "partitioning": r["partitioning"],
                          "match_ms": out.timings["match_ms"],
                          "decision_ms": out.timings["decision_ms"],
                          "forced": forced.stats.to_json(), "online": out.result.stats.to_json()})
        except (SJReuseError, OSError, ValueError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            trows.append({"join": i, "error": row["error"]})
        rows.append(row)

    done = [r for r in rows if "error" not in r]
    n_reuse = sum(r["decision"] == REUSE for r in done)
    report = {
        "comparator": "engine forced-repartition path",
        "config": cfg.to_flat(),
        "joins": rows,
        "n_joins": len(rows),
        "n_failed": len(rows) - len(done),
        "reuse_frequency": n_reuse / len(rows) if rows else float("nan"),
        "all_results_equal": all(r["results_equal"] for r in done),
        "work_ratio": _percentiles([r["work_ratio"] for r in done]),
    }
    ok_t = [t for t in trows if "error" not in t]
    timings = {
        "joins": trows,
        "overall": _percentiles([t["overall"] for t in ok_t]),
        "partitioning": _percentiles([t["partitioning"] for t in ok_t]),
        "match_ms": _percentiles([t["match_ms"] for t in ok_t]),
        "decision_ms": _percentiles([t["decision_ms"] for t in ok_t]),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "bench.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        (out_dir / "bench_timings.json").write_text(json.dumps(timings, indent=1, sort_keys=True) + "\n")
        (out_dir / "bench.txt").write_text(format_bench(report, timings))
        cfg.snapshot(out_dir)
    return {"report": report, "timings": timings}


def _amend_last_trace(repo: Repository, fields_: dict) -> None:
    """Attach the forced-repartition cost to the trace just written."""
    path = repo.decisions_path
    with repo.lock:
        lines = path.read_text().splitlines()
        last = json.loads(lines[-1])
        last.update(fields_)
        lines[-1] = json.dumps(last, sort_keys=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        os.replace(tmp, path)


def format_bench(report: dict, timings: dict) -> str:
    lines = [f"joins: {report['n_joins']}  failed: {report['n_failed']}  "
             f"reuse frequency: {100 * report['reuse_frequency']:.1f}%  "
             f"results equal: {report['all_results_equal']}",
             f"comparator: {report['comparator']}", ""]
    head = f"{'metric':<22}" + "".join(f"{n:>10}" for n, _ in PERCENTILES)
    lines.append(head)
    for label, stats in (("overall speed-up", timings["overall"]),
                         ("partitioning speed-up", timings["partitioning"]),
                         ("work ratio", report["work_ratio"]),
                         ("match ms", timings["match_ms"]),
                         ("decision ms", timings["decision_ms"])):
        lines.append(f"{label:<22}" + "".join(f"{stats[n]:>10.3f}" for n, _ in PERCENTILES))
    lines.append("")
    lines.append(f"{'join':>4} {'R':>12} {'S':>12} {'decision':>12} {'sim_max':>8} "
                 f"{'overall':>8} {'part.':>8}")
    by_join = {t["join"]: t for t in timings["joins"]}
    for r in report["joins"]:
        t = by_join.get(r["join"], {})
        if "error" in r:
            lines.append(f"{r['join']:>4} {r['R']:>12} {r['S']:>12}  error: {r['error']}")
            continue
        sim = "-" if r["sim_max"] is None else f"{r['sim_max']:.4f}"
        lines.append(f"{r['join']:>4} {r['R']:>12} {r['S']:>12} {r['executed']:>12} {sim:>8} "
                     f"{t['overall']:>8.3f} {t['partitioning']:>8.3f}")
    return "\n".join(lines) + "\n"


# -- retrain --------------------------------------------------------------------

def logged_samples(repo: Repository) -> list[dict]:
    """Decision traces that carry both costs, usable as forest samples."""
    out = []
    for tr in repo.traces():
        if tr.get("sim_max") is not None and "t1" in tr and "t2" in tr:
            out.append({"R": tr["R"], "S": tr["S"], "matched": tr["matched"],
                        "sim_max": tr["sim_max"], "t1": tr["t1"], "t2": tr["t2"]})
    return out


def retrain(cfg: EngineConfig, new_datasets: Sequence[Dataset] = (),
            fault: Callable[[str], None] | None = None) -> dict:
    """Refit model and forest on every known dataset and swap checkpoints.

    ``fault`` is called at checkpoints named "after_model" and "before_swap"
    so tests can interrupt the swap; the previous checkpoints stay active
    unless the manifest swap completes.
    """
    with pipeline_lock(cfg):
        repo = Repository(cfg.repo_dir)
        if len(repo) == 0:
            raise PipelineError("retrain", ValueError("repository is empty"))
        register(cfg.repo_dir, new_datasets)
        cat = load_catalog(cfg.repo_dir)
        datasets = [Dataset.load_sidecar(p) for _, p in sorted(cat.items())]
        if len(datasets) < 2:
            raise PipelineError("retrain", ValueError("need at least 2 known datasets"))
        state_path = cfg.repo_dir / OFFLINE_STATE
        prev = json.loads(state_path.read_text()) if state_path.exists() else {}
        gt = ground_truth_matrix(datasets, histogram_domain(datasets, cfg),
                                 cfg.histogram_resolution, cfg.repo_dir / "cache")
        pairs = train_pairs(datasets, gt, cfg)
        model, report = siamese.train(pairs, train_config(cfg), cfg.coord_scale)
        records = list(prev.get("samples", [])) + logged_samples(repo)
        samples = [DecisionSample.from_json(r) for r in records]
        forest = forest_mod.fit(samples, cfg.n_trees, cfg.forest_depth, cfg.seed_forest)
        state = {**prev, "dataset_ids": [d.id for d in datasets], "samples": records,
                 "seeds": cfg.seeds, "cost_model": cfg.cost_model}
        _install_models(repo, cfg, model, forest, report, state, fault)
        return {"n_datasets": len(datasets), "n_pairs": len(pairs), "n_samples": len(samples),
                "final_val_mse": report.get("final_val_mse"), "model_ref": repo.manifest.model_ref}
