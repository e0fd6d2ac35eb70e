import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sjreuse import forest
from sjreuse.forest import REPARTITION, REUSE, DecisionForest, DecisionSample


def _separable(n=200, seed=0, cut=0.7):
    rng = np.random.default_rng(seed)
    sims = rng.uniform(0, 1, n)
    return [DecisionSample(float(s), 1.0 if s > cut else 2.0, 1.5) for s in sims]


def test_label_rule():
    assert DecisionSample(0.5, 1.0, 2.0).label == 1
    assert DecisionSample(0.5, 2.0, 2.0).label == 0  # strict inequality
    assert DecisionSample(0.5, math.inf, 2.0).label == 0


def test_sample_json_with_failed_reuse():
    s = DecisionSample(0.3, math.inf, 1.0)
    doc = json.loads(json.dumps(s.to_json()))
    assert doc["t1"] == "inf" and DecisionSample.from_json(doc) == s


def test_separable_accuracy_and_extremes():
    samples = _separable()
    f = forest.fit(samples, seed=1)
    assert len(f.trees) == 100
    assert f.accuracy(samples) >= 0.95
    assert f.predict(1.0) == REUSE
    assert f.predict(0.0) == REPARTITION


def test_monotone_sweep():
    f = forest.fit(_separable(seed=3), seed=3)
    preds = [f.predict(s) == REUSE for s in np.linspace(0, 1, 1001)]
    assert preds == sorted(preds)


def test_max_depth_respected():
    f = forest.fit(_separable(seed=4), max_depth=5, seed=4)

    def depth(nodes, i=0):
        n = nodes[i]
        return 0 if "leaf_class" in n else 1 + max(depth(nodes, n["left"]), depth(nodes, n["right"]))

    assert max(depth(t) for t in f.trees) <= 5


def test_constant_class_warns():
    samples = [DecisionSample(s, 1.0, 2.0) for s in (0.1, 0.5, 0.9)]
    with pytest.warns(UserWarning, match="degenerate"):
        f = forest.fit(samples)
    assert all(f.predict(s) == REUSE for s in (0.0, 0.5, 1.0))


def test_deterministic():
    samples = _separable(seed=5)
    assert forest.fit(samples, seed=9).to_json() == forest.fit(samples, seed=9).to_json()


def test_tie_goes_to_repartition():
    f = DecisionForest([[{"leaf_class": 1}], [{"leaf_class": 0}]], n_trees=2)
    assert f.votes(0.5) == 1 and f.predict(0.5) == REPARTITION


@given(st.floats(0, 1))
def test_predict_total(s):
    f = forest.fit(_separable(n=50, seed=6), n_trees=10, seed=6)
    assert f.predict(s) in (REUSE, REPARTITION)


def test_save_load(tmp_path):
    f = forest.fit(_separable(seed=7), seed=7)
    f.save(tmp_path / "f.json")
    g = DecisionForest.load(tmp_path / "f.json")
    assert g == f
    doc = json.loads((tmp_path / "f.json").read_text())
    assert set(doc) == {"n_trees", "max_depth", "trees", "seed"}
