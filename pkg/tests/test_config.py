from pathlib import Path

import pytest

from sjreuse.config import WORLD_MERCATOR, EngineConfig, load_config, parse_config
from sjreuse.geometry import Rect


def test_defaults():
    cfg = EngineConfig()
    assert cfg.global_domain == WORLD_MERCATOR
    assert cfg.coord_scale == 1e6 and cfg.n_trees == 100 and cfg.forest_depth == 5
    assert cfg.seeds == {"ingest": 0, "train": 0, "forest": 0, "workload": 0}


def test_parse_and_roundtrip():
    cfg = parse_config("# comment\nglobal_domain = 0,0,10,10\ntheta = 2.5\nworkers=3\n"
                       "histogram_domain = none\ncost_model = work\n")
    assert cfg.global_domain == Rect(0, 0, 10, 10)
    assert cfg.theta == 2.5 and cfg.workers == 3 and cfg.cost_model == "work"
    assert cfg.histogram_domain is None
    assert parse_config(cfg.dumps()) == cfg


@pytest.mark.parametrize("text", ["nope = 1", "workers = x", "workers = 0", "theta = -1",
                                  "global_domain = 1,2,3", "cost_model = money"])
def test_rejects_bad_config(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_paths_relative_to_file(tmp_path):
    f = tmp_path / "sub" / "cfg.txt"
    f.parent.mkdir()
    f.write_text("repo_dir = r\ndata_dir = /abs/d\n")
    cfg = load_config(f)
    assert cfg.repo_dir == tmp_path / "sub" / "r"
    assert cfg.data_dir == Path("/abs/d")
    assert load_config(None) == EngineConfig()


def test_snapshot(tmp_path):
    cfg = EngineConfig(theta=7.0)
    path = cfg.snapshot(tmp_path)
    assert "theta = 7.0" in path.read_text()
    assert "seed_workload = 0" in path.read_text()
