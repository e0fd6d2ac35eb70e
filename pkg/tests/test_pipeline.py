import json
import math

import numpy as np
import pytest

from sjreuse import forest as forest_mod
from sjreuse import pipeline
from sjreuse.config import EngineConfig
from sjreuse.datasets import gaussian_blob, ingest, write_points
from sjreuse.errors import CapacityError, PipelineError
from sjreuse.forest import DecisionSample
from sjreuse.geometry import Rect
from sjreuse.join import JoinQuery, nested_loop_join
from sjreuse.quadtree import QuadtreePartitioner
from sjreuse.repository import Repository

DOM = Rect(0, 0, 1e6, 1e6)

pytestmark = pytest.mark.filterwarnings("ignore:decision forest degenerate")


def _cfg(root, **kw):
    base = dict(global_domain=DOM, histogram_resolution=64, theta=2000.0, workers=2,
                user_max_depth=4, sample_cap=500, train_max_epochs=8, train_folds=2,
                cost_model="work", repo_dir=root / "repo", data_dir=root / "data")
    base.update(kw)
    cfg = EngineConfig(**base)
    cfg.ensure_dirs()
    return cfg


def _blob(cfg, id, center, n=2000, sigma=20_000, seed=0):
    path = cfg.data_dir / f"{id}.csv"
    write_points(path, gaussian_blob(n, center, sigma, seed, DOM))
    d = ingest(path, id, cfg.sample_cap, cfg.seed_ingest)
    d.save_sidecar(cfg.data_dir / f"{id}.meta.json")
    return d


def _corpus(cfg):
    west = [_blob(cfg, f"w{i}", (200_000 + 10_000 * i, 300_000), seed=i) for i in range(3)]
    east = [_blob(cfg, f"e{i}", (800_000, 700_000 + 10_000 * i), seed=10 + i) for i in range(3)]
    return west + east


def _points(d):
    return np.loadtxt(d.path, delimiter=",", skiprows=1)


def test_smallest_pipeline(tmp_path):
    cfg = _cfg(tmp_path)
    a = _blob(cfg, "a", (500_000, 500_000), seed=1)
    path_b = cfg.data_dir / "b.csv"
    path_b.write_bytes(a.path.read_bytes())
    b = ingest(path_b, "b", cfg.sample_cap)
    with pytest.warns(UserWarning, match="degenerate"):
        res = pipeline.offline([a, b], [(a, b)], cfg)
    assert res.train_report["final_train_mse"] <= 1e-6
    assert res.model.loss(pipeline.embedding_of(a, cfg), pipeline.embedding_of(a, cfg), 0.0) <= 1e-6
    repo = Repository(cfg.repo_dir)
    assert [e.dataset_id for e in repo.entries] == ["a"]
    assert repo.manifest.model_ref and repo.manifest.forest_ref
    assert (cfg.repo_dir / "models" / "effective_config.txt").exists()


def test_offline_needs_two_datasets(tmp_path):
    cfg = _cfg(tmp_path)
    with pytest.raises(PipelineError):
        pipeline.offline([_blob(cfg, "a", (1e5, 1e5))], None, cfg)


def test_offline_is_reproducible(tmp_path):
    outs = []
    for run in ("one", "two"):
        root = tmp_path / run
        cfg = _cfg(root)
        ds = _corpus(cfg)
        pipeline.offline(ds, None, cfg)
        models = cfg.repo_dir / "models"
        outs.append({p.name: p.read_bytes() for p in sorted(models.glob("*-0000.json"))}
                    | {"manifest": (cfg.repo_dir / "manifest.json").read_bytes()})
    assert outs[0] == outs[1]


def test_partial_failure_keeps_repository_valid(tmp_path):
    cfg = _cfg(tmp_path)
    ds = _corpus(cfg)
    ds[2].path.write_text("x,y\n1,2\nnot,a number\n")
    with pytest.raises(PipelineError) as ei:
        pipeline.offline(ds, None, cfg)
    assert ei.value.phase == "ground_truth"
    Repository(cfg.repo_dir)  # still parses


@pytest.fixture
def trained(tmp_path):
    cfg = _cfg(tmp_path)
    ds = _corpus(cfg)
    res = pipeline.offline(ds, None, cfg)
    return cfg, ds, res


def test_online_repeated_join_reuses(trained):
    cfg, ds, res = trained
    assert any(s.label == 1 and s.sim_max == 1.0 for s in res.samples)
    repo = Repository(cfg.repo_dir)
    R = next(d for d in ds if d.id in repo)
    S = ds[0] if R is not ds[0] else ds[1]
    out = pipeline.online(JoinQuery(R, S, cfg.theta), cfg)
    assert out.trace["sim_max"] == 1.0 and out.trace["matched"] == R.id
    assert out.trace["decision"] == "reuse" and out.trace["executed"] == "reuse"
    assert out.result.stats.construction_passes_R == 0
    assert out.result.pairs.tobytes() == nested_loop_join(_points(R), _points(S), cfg.theta).tobytes()
    last = repo.traces()[-1]
    assert last["decision"] == "reuse" and "timings" in last


def test_online_empty_repository_repartitions(tmp_path):
    cfg = _cfg(tmp_path)
    a, b = _blob(cfg, "a", (3e5, 3e5)), _blob(cfg, "b", (3e5, 3.1e5), seed=1)
    with pytest.warns(UserWarning, match="no offline"):
        out = pipeline.online(JoinQuery(a, b, cfg.theta), cfg)
    assert out.trace["executed"] == "repartition" and out.trace["added"]
    assert len(Repository(cfg.repo_dir)) == 1
    assert "a" in pipeline.load_catalog(cfg.repo_dir)


def _strict_forest():
    # reuse only for near-identical matches, as a forest trained where only
    # repeated joins paid off would learn
    rng = np.random.default_rng(0)
    sims = np.concatenate([rng.uniform(0, 0.99, 150), rng.uniform(0.995, 1.0, 50)])
    return forest_mod.fit([DecisionSample(float(v), 1.0 if v > 0.99 else 2.0, 1.5) for v in sims])


def test_online_far_dataset_repartitions(trained):
    cfg, ds, res = trained
    far = _blob(cfg, "far", (50_000, 950_000), n=3000, sigma=5_000, seed=99)
    near = _blob(cfg, "far2", (52_000, 948_000), n=3000, sigma=5_000, seed=98)
    repo = Repository(cfg.repo_dir)
    model, _ = pipeline.load_models(repo)
    forest = _strict_forest()
    n_before = len(repo)
    out = pipeline.online(JoinQuery(far, near, cfg.theta), cfg, models=(model, forest))
    assert out.trace["sim_max"] < 0.99
    assert out.trace["decision"] == "repartition" and out.trace["added"]
    assert len(Repository(cfg.repo_dir)) == n_before + 1
    assert out.result.pairs.tobytes() == nested_loop_join(
        _points(far), _points(near), cfg.theta).tobytes()
    # the same forest reuses for a repeated join
    R = next(d for d in ds if d.id in repo)
    again = pipeline.online(JoinQuery(R, far, cfg.theta), cfg, models=(model, forest))
    assert again.trace["executed"] == "reuse"


def test_online_falls_back_when_partitioner_is_broken(trained):
    cfg, ds, _ = trained
    repo = Repository(cfg.repo_dir)
    R = next(d for d in ds if d.id in repo)
    repo.resolve(repo.get(R.id).partitioner_path).write_text("{broken")
    out = pipeline.online(JoinQuery(R, ds[0], cfg.theta), cfg)
    assert out.trace["decision"] == "reuse" and out.trace["executed"] == "repartition"
    assert out.trace["fallback"].startswith("FormatError")


def test_online_capacity_failure_falls_back(trained):
    cfg, ds, _ = trained
    repo = Repository(cfg.repo_dir)
    R = next(d for d in ds if d.id in repo)
    # a single-block partitioner stored under R's id overflows any cap below |R| + |S|
    QuadtreePartitioner.from_paths(R.id, DOM, 0, [""]).save(
        repo.resolve(repo.get(R.id).partitioner_path))
    fine = cfg.replace(user_max_depth=8)
    fresh, _ = pipeline.make_engine(fine).run(JoinQuery(R, R, cfg.theta))
    cap = max(r + s for r, s in zip(fresh.stats.block_R_counts, fresh.stats.block_S_counts))
    assert cap < 2 * R.count
    tight = fine.replace(capacity_cap=cap)
    out = pipeline.online(JoinQuery(R, R, cfg.theta), tight)
    assert out.trace["decision"] == "reuse" and out.trace["executed"] == "repartition"
    assert out.trace["fallback"].startswith("CapacityError")
    assert out.result.pairs.tobytes() == fresh.pairs.tobytes()
    with pytest.raises(CapacityError):
        pipeline.online(JoinQuery(R, R, cfg.theta), tight.replace(capacity_cap=10))


def test_bench_repeated_workload(trained, tmp_path):
    cfg, ds, _ = trained
    repo = Repository(cfg.repo_dir)
    stored = [d for d in ds if d.id in repo]
    workload = [(stored[i % len(stored)], ds[i % len(ds)]) for i in range(4)]
    res = pipeline.bench(workload, cfg, tmp_path / "out")
    rep = res["report"]
    assert rep["reuse_frequency"] == 1.0 and rep["n_failed"] == 0 and rep["all_results_equal"]
    assert all(r["construction_passes_online"] == 0 for r in rep["joins"])
    for key in ("bench.json", "bench_timings.json", "bench.txt", "effective_config.txt"):
        assert (tmp_path / "out" / key).exists()
    ratios = sorted(t["partitioning"] for t in res["timings"]["joins"])
    pct = res["timings"]["partitioning"]
    assert pct["best"] == ratios[-1] and pct["worst"] == ratios[0]
    assert pct["median"] in ratios
    labelled = pipeline.logged_samples(repo)
    assert len(labelled) >= 4


def test_bench_empty_repository(tmp_path):
    cfg = _cfg(tmp_path)
    a, b = _blob(cfg, "a", (3e5, 3e5)), _blob(cfg, "b", (3e5, 3.1e5), seed=1)
    with pytest.warns(UserWarning):
        rep = pipeline.bench([(a, b), (b, a)], cfg)["report"]
    assert rep["reuse_frequency"] == 0.0


def test_percentiles_are_order_statistics():
    rng = np.random.default_rng(0)
    v = rng.uniform(0.5, 3, 10)
    p = pipeline._percentiles(v)
    s = np.sort(v)
    assert p["best"] == s[-1] and p["worst"] == s[0]
    # inverted CDF: smallest value whose empirical CDF reaches q
    assert p["p25"] == s[math.ceil(0.25 * 10) - 1]
    assert p["median"] == s[math.ceil(0.5 * 10) - 1]
    assert p["p75"] == s[math.ceil(0.75 * 10) - 1]


def test_bench_report_is_deterministic(tmp_path):
    docs = []
    for run in ("one", "two"):
        cfg = _cfg(tmp_path / run)
        ds = _corpus(cfg)
        pipeline.offline(ds, None, cfg)
        pipeline.bench([(ds[0], ds[1]), (ds[3], ds[4]), (ds[0], ds[1])], cfg, tmp_path / run / "out")
        text = (tmp_path / run / "out" / "bench.json").read_text()
        docs.append(text.replace(str(tmp_path / run), "<root>"))
    assert docs[0] == docs[1]


def test_retrain_without_new_data_is_stable(trained):
    cfg, ds, res = trained
    before = res.train_report["final_val_mse"]
    out = pipeline.retrain(cfg)
    assert out["n_datasets"] == 6
    assert out["final_val_mse"] <= before * 1.1 + 1e-12
    assert out["model_ref"] == "models/siamese-0001.json"


def test_retrain_with_new_datasets(trained):
    cfg, ds, res = trained
    new = [_blob(cfg, "n0", (500_000, 500_000), seed=40), _blob(cfg, "n1", (510_000, 500_000), seed=41)]
    out = pipeline.retrain(cfg, new)
    assert out["n_datasets"] == 8
    assert out["n_pairs"] == 8 + 8 * 7 // 2


@pytest.mark.parametrize("where", ["after_model", "before_swap"])
def test_retrain_kill_switch_keeps_previous_models(trained, where):
    cfg, ds, _ = trained
    before = (cfg.repo_dir / "manifest.json").read_bytes()

    def fault(point):
        if point == where:
            raise RuntimeError("killed")

    with pytest.raises(RuntimeError):
        pipeline.retrain(cfg, fault=fault)
    assert (cfg.repo_dir / "manifest.json").read_bytes() == before
    model, forest = pipeline.load_models(Repository(cfg.repo_dir))
    assert model is not None and forest is not None


def test_retrain_requires_repository(tmp_path):
    with pytest.raises(PipelineError):
        pipeline.retrain(_cfg(tmp_path))
