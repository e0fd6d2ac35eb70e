import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sjreuse import siamese
from sjreuse.datasets import DatasetMetadata
from sjreuse.embedding import embed
from sjreuse.errors import ShapeMismatch
from sjreuse.geometry import Point, Polygon, Rect
from sjreuse.siamese import SiameseModel, TrainConfig


def _rand_emb(rng, n=None):
    shape = (9,) if n is None else (n, 9)
    return rng.normal(0, 1, shape)


def _reference_features(m: SiameseModel, x: np.ndarray) -> np.ndarray:
    # straight-line re-implementation with explicit loops
    p = m.params

    def relu(v):
        return [max(0.0, t) for t in v]

    def affine(W, b, v):
        return [sum(W[i, j] * v[j] for j in range(len(v))) + b[i] for i in range(len(b))]

    def branch(name, v):
        h = relu(affine(p[f"{name}.W1"], p[f"{name}.b1"], v))
        return relu(affine(p[f"{name}.W2"], p[f"{name}.b2"], h))

    comb = (branch("count", x[0:1]) + branch("area", x[1:2]) + branch("centroid", x[2:4])
            + branch("bbox", x[4:8]) + branch("compactness", x[8:9]))
    assert len(comb) == 36
    h = relu(affine(p["fusion.W1"], p["fusion.b1"], comb))
    return np.array(relu(affine(p["fusion.W2"], p["fusion.b2"], h)))


def _with_biases(seed):
    m = SiameseModel.init(seed)
    rng = np.random.default_rng(seed + 100)
    for k, v in m.params.items():
        if v.ndim == 1:
            v[:] = rng.uniform(-0.1, 0.3, v.shape)
    return m


def test_zero_model_outputs_zero():
    m = SiameseModel.zeros()
    x = _rand_emb(np.random.default_rng(0), 5)
    assert np.array_equal(m.features(x), np.zeros((5, 8)))


def test_init_deterministic():
    x = _rand_emb(np.random.default_rng(1), 4)
    a, b = SiameseModel.init(7), SiameseModel.init(7)
    assert a.features(x).tobytes() == b.features(x).tobytes()
    assert a.fingerprint == b.fingerprint != SiameseModel.init(8).fingerprint


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_reference(seed):
    m = _with_biases(seed)
    rng = np.random.default_rng(seed)
    for x in _rand_emb(rng, 5):
        np.testing.assert_allclose(m.features(x)[0], _reference_features(m, x), rtol=0, atol=1e-9)
    assert np.all(m.features(_rand_emb(rng, 20)) >= 0)


def test_batch_invariance():
    m = _with_biases(3)
    X = _rand_emb(np.random.default_rng(3), 50)
    full = m.features(X)
    for i in (0, 17, 49):
        assert m.features(X[i]).tobytes() == full[i:i + 1].tobytes()


def test_identity_is_exact_zero():
    m = _with_biases(1)
    for e in _rand_emb(np.random.default_rng(2), 20) * 5:
        assert m.predict_distance(e, e) == 0.0


def test_unit_feature_distance_clamps_to_half():
    m = SiameseModel.zeros()
    # only the compactness branch passes its input through to fusion unit 0
    m.params["compactness.W1"][0, 0] = 1.0
    m.params["compactness.W2"][0, 0] = 1.0
    m.params["fusion.W1"][0, 32] = 1.0
    m.params["fusion.W2"][0, 0] = 1.0
    a = np.zeros(9)
    b = np.zeros(9)
    b[8] = 1.0
    assert m.predict_distance(a, b) == 0.5


def test_predict_distance_formula():
    m = _with_biases(4)
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = _rand_emb(rng), _rand_emb(rng)
        d = np.linalg.norm(_reference_features(m, a) - _reference_features(m, b))
        assert m.predict_distance(a, b) == pytest.approx(d / (1 + d), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_metric_properties(seed):
    m = _with_biases(seed % 7)
    rng = np.random.default_rng(seed)
    a, b, c = _rand_emb(rng) * 3, _rand_emb(rng) * 3, _rand_emb(rng) * 3
    dab = m.predict_distance(a, b)
    assert dab == m.predict_distance(b, a)
    assert 0.0 <= dab < 1.0
    F = m.features(np.stack([a, b, c]))
    d = lambda i, j: np.sqrt(((F[i] - F[j]) ** 2).sum())
    assert d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12


def test_loss_examples():
    m = SiameseModel.zeros()
    e = np.ones(9)
    assert m.loss(e, e, 0.0) == 0.0
    assert m.loss(e, e, 0.0154) == pytest.approx(2.3716e-4, rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_matches_finite_differences(seed):
    m = _with_biases(seed)
    rng = np.random.default_rng(seed + 10)
    X1, X2 = _rand_emb(rng, 6), _rand_emb(rng, 6)
    X2[0] = X1[0]  # an exact self-pair takes the zero-gradient branch
    y = rng.uniform(0, 1, 6)
    _, grads = m.loss_and_grad(X1, X2, y)
    h = 1e-5
    worst = 0.0
    for name, P in m.params.items():
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            up = m.loss_and_grad(X1, X2, y)[0]
            P[idx] = old - h
            down = m.loss_and_grad(X1, X2, y)[0]
            P[idx] = old
            num = (up - down) / (2 * h)
            ana = grads[name][idx]
            scale = max(abs(num), abs(ana))
            if scale > 1e-7:
                worst = max(worst, abs(num - ana) / scale)
            else:
                assert abs(num - ana) <= 1e-9, (name, idx)
    assert worst <= 1e-4


def _cluster_embeddings(rng, n_per=5):
    a = rng.normal(0, 0.05, (n_per, 9)) + np.array([10, 8, 0.1, 0.1, 0, 0, 0.2, 0.2, 0.8])
    b = rng.normal(0, 0.05, (n_per, 9)) + np.array([14, 12, 3.0, 3.0, 2.8, 2.8, 3.2, 3.2, 0.5])
    return a, b


def test_train_self_pairs_reach_zero():
    rng = np.random.default_rng(0)
    pairs = [(e, e, 0.0) for e in _rand_emb(rng, 20)]
    model, report = siamese.train(pairs, TrainConfig(max_epochs=5))
    assert report["final_train_mse"] <= 1e-6


def _cluster_pairs(rng):
    a, b = _cluster_embeddings(rng)
    embs = [(e, 0) for e in a] + [(e, 1) for e in b]
    pairs = []
    for i in range(len(embs)):
        for j in range(i, len(embs)):
            pairs.append((embs[i][0], embs[j][0], 0.0 if embs[i][1] == embs[j][1] else 0.9))
    return embs, pairs


def test_train_separates_clusters():
    embs, pairs = _cluster_pairs(np.random.default_rng(1))
    model, report = siamese.train(pairs, TrainConfig(max_epochs=40))
    within, across = [], []
    for i in range(len(embs)):
        for j in range(i + 1, len(embs)):
            d = model.predict_distance(embs[i][0], embs[j][0])
            (within if embs[i][1] == embs[j][1] else across).append(d)
    assert np.mean(within) < np.mean(across)
    assert {"lr", "weight_decay", "cv_mse"} <= set(report["chosen"])
    assert len(report["grid"]) == 10
    assert all("train_mse" in r for r in report["epochs"])


def test_train_deterministic():
    _, pairs = _cluster_pairs(np.random.default_rng(2))
    cfg = TrainConfig(max_epochs=5, lrs=(0.001, 0.01), weight_decays=(0.0,))
    a, ra = siamese.train(pairs, cfg)
    b, rb = siamese.train(pairs, cfg)
    assert a.fingerprint == b.fingerprint
    assert json.dumps(ra) == json.dumps(rb)


def test_train_rejects_bad_targets():
    e = np.zeros(9)
    with pytest.raises(ValueError):
        siamese.train([(e, e, 1.5)])
    with pytest.raises(ValueError):
        siamese.train([])


def test_save_load_roundtrip(tmp_path):
    m = _with_biases(5)
    m.save(tmp_path / "m.json")
    q = SiameseModel.load(tmp_path / "m.json")
    rng = np.random.default_rng(5)
    A, B = _rand_emb(rng, 100), _rand_emb(rng, 100)
    np.testing.assert_allclose(q.predict_distance(A, B), m.predict_distance(A, B), rtol=0, atol=1e-12)
    assert q.fingerprint == m.fingerprint


def test_load_rejects_35_wide_fusion(tmp_path):
    doc = _with_biases(0).to_json()
    W = np.asarray(doc["layers"]["fusion.W1"]["values"]).reshape(16, 36)[:, :35]
    doc["layers"]["fusion.W1"] = {"shape": [16, 35], "values": W.ravel().tolist()}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ShapeMismatch):
        SiameseModel.load(tmp_path / "m.json")


def test_edited_coord_scale_is_honored(tmp_path):
    m = _with_biases(0)
    doc = m.to_json()
    doc["coord_scale"] = 1.0
    (tmp_path / "m.json").write_text(json.dumps(doc))
    q = SiameseModel.load(tmp_path / "m.json")
    poly = Polygon(((0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)))
    meta = DatasetMetadata(100, poly, 100.0, Point(5.0, 5.0), Rect(0, 0, 10, 10), 0.785)
    assert q.coord_scale == 1.0
    assert q.embed(meta) == embed(meta, 1.0)
    assert q.embed(meta).v[2] == 5.0
