"""Twin-branch MLP that maps dataset embeddings to an 8-d feature space.

Distance between two datasets is ``d / (1 + d)`` where ``d`` is the
Euclidean distance of their features; the network is trained so this
matches the histogram JSD. Everything is float64 numpy with a hand-written
backward pass.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import DEFAULT_COORD_SCALE, FEATURE_ORDER, embed
from .errors import FormatError, NonFiniteLoss, ShapeMismatch

# (name, input slice, hidden, out)
BRANCHES = (
    ("count", slice(0, 1), 8, 4),
    ("area", slice(1, 2), 8, 4),
    ("centroid", slice(2, 4), 16, 8),
    ("bbox", slice(4, 8), 32, 16),
    ("compactness", slice(8, 9), 8, 4),
)
FUSION_IN = sum(b[3] for b in BRANCHES)  # 36
FUSION_HIDDEN = 16
FEATURE_DIM = 8

LR_GRID = (0.0001, 0.0003, 0.001, 0.003, 0.01)
WEIGHT_DECAY_GRID = (0.0, 0.0001)


def _layer_shapes() -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, sl, hid, out in BRANCHES:
        n_in = sl.stop - sl.start
        shapes[f"{name}.W1"] = (hid, n_in)
        shapes[f"{name}.b1"] = (hid,)
        shapes[f"{name}.W2"] = (out, hid)
        shapes[f"{name}.b2"] = (out,)
    shapes["fusion.W1"] = (FUSION_HIDDEN, FUSION_IN)
    shapes["fusion.b1"] = (FUSION_HIDDEN,)
    shapes["fusion.W2"] = (FEATURE_DIM, FUSION_HIDDEN)
    shapes["fusion.b2"] = (FEATURE_DIM,)
    return shapes


LAYER_SHAPES = _layer_shapes()


def _affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Broadcast-and-reduce instead of matmul: each row is reduced the same
    # way whatever the batch size, so a dataset's features are bit-identical
    # whether it is embedded alone or inside a repository batch.
    return (x[:, None, :] * W[None, :, :]).sum(axis=2) + b


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class SiameseModel:
    params: dict[str, np.ndarray]
    coord_scale: float = DEFAULT_COORD_SCALE
    seed: int = 0

    @classmethod
    def init(cls, seed: int = 0, coord_scale: float = DEFAULT_COORD_SCALE) -> "SiameseModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in LAYER_SHAPES.items():
            if len(shape) == 2:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-limit, limit, size=shape)
            else:
                params[name] = np.zeros(shape)
        return cls(params, coord_scale, seed)

    @classmethod
    def zeros(cls, coord_scale: float = DEFAULT_COORD_SCALE) -> "SiameseModel":
        return cls({k: np.zeros(s) for k, s in LAYER_SHAPES.items()}, coord_scale)

    def copy(self) -> "SiameseModel":
        return SiameseModel({k: v.copy() for k, v in self.params.items()},
                            self.coord_scale, self.seed)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in LAYER_SHAPES:
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        h.update(repr(self.coord_scale).encode())
        return h.hexdigest()[:16]

    # -- forward / backward -----------------------------------------------

    def _forward(self, X: np.ndarray):
        p = self.params
        cache = {}
        outs = []
        for name, sl, _, _ in BRANCHES:
            x = X[:, sl]
            z1 = _affine(x, p[f"{name}.W1"], p[f"{name}.b1"])
            h1 = _relu(z1)
            z2 = _affine(h1, p[f"{name}.W2"], p[f"{name}.b2"])
            o = _relu(z2)
            cache[name] = (x, z1, h1, z2)
            outs.append(o)
        comb = np.concatenate(outs, axis=1)
        z1 = _affine(comb, p["fusion.W1"], p["fusion.b1"])
        h1 = _relu(z1)
        z2 = _affine(h1, p["fusion.W2"], p["fusion.b2"])
        cache["fusion"] = (comb, z1, h1, z2)
        return _relu(z2), cache

    def features(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._forward(X)[0]

    def _backward(self, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        g: dict[str, np.ndarray] = {}
        comb, z1, h1, z2 = cache["fusion"]
        dz2 = dout * (z2 > 0)
        g["fusion.W2"] = dz2.T @ h1
        g["fusion.b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ p["fusion.W2"]) * (z1 > 0)
        g["fusion.W1"] = dz1.T @ comb
        g["fusion.b1"] = dz1.sum(axis=0)
        dcomb = dz1 @ p["fusion.W1"]
        start = 0
        for name, _, _, out in BRANCHES:
            do = dcomb[:, start:start + out]
            start += out
            x, bz1, bh1, bz2 = cache[name]
            dbz2 = do * (bz2 > 0)
            g[f"{name}.W2"] = dbz2.T @ bh1
            g[f"{name}.b2"] = dbz2.sum(axis=0)
            dbz1 = (dbz2 @ p[f"{name}.W2"]) * (bz1 > 0)
            g[f"{name}.W1"] = dbz1.T @ x
            g[f"{name}.b1"] = dbz1.sum(axis=0)
        return g

    def embed(self, metadata, source_id: str = ""):
        """Embed dataset metadata with this model's coordinate scale."""
        return embed(metadata, self.coord_scale, source_id)

    def predict_distance(self, e1, e2) -> np.ndarray | float:
        """Clamped feature distance ``d / (1 + d)``; a float for a single pair."""
        a = np.asarray(_vec(e1), dtype=float)
        b = np.asarray(_vec(e2), dtype=float)
        d = np.sqrt(((self.features(a) - self.features(b)) ** 2).sum(axis=1))
        out = d / (1.0 + d)
        return float(out[0]) if a.ndim == 1 and b.ndim == 1 else out

    def loss_and_grad(self, X1: np.ndarray, X2: np.ndarray, y: np.ndarray
                      ) -> tuple[float, dict[str, np.ndarray]]:
        """Mean squared error between clamped distance and target, with gradients."""
        X1 = np.atleast_2d(X1)
        X2 = np.atleast_2d(X2)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        B = len(y)
        F, cache = self._forward(np.concatenate([X1, X2], axis=0))
        diff = F[:B] - F[B:]
        d = np.sqrt((diff ** 2).sum(axis=1))
        dhat = d / (1.0 + d)
        err = dhat - y
        loss = float(np.mean(err ** 2))
        # d(loss)/d(d) = 2 err / B * 1/(1+d)^2; pairs with d == 0 get zero
        # gradient since the direction of F1 - F2 is undefined there.
        coef = 2.0 * err / B / (1.0 + d) ** 2
        safe = np.where(d > 0, d, 1.0)
        dF1 = np.where((d > 0)[:, None], (coef / safe)[:, None] * diff, 0.0)
        grads = self._backward(cache, np.concatenate([dF1, -dF1], axis=0))
        return loss, grads

    def loss(self, e1, e2, d_jsd) -> float:
        dh = np.atleast_1d(self.predict_distance(e1, e2))
        return float(np.mean((dh - np.atleast_1d(np.asarray(d_jsd, dtype=float))) ** 2))

    # -- persistence -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "kind": "siamese",
            "feature_order": list(FEATURE_ORDER),
            "coord_scale": self.coord_scale,
            "seed": self.seed,
            "layers": {k: {"shape": list(self.params[k].shape),
                           "values": self.params[k].ravel().tolist()} for k in LAYER_SHAPES},
        }

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), separators=(",", ":")))
        os.replace(tmp, path)
        return path

    @classmethod
    def from_json(cls, doc: dict) -> "SiameseModel":
        if doc.get("feature_order") != list(FEATURE_ORDER):
            raise ShapeMismatch(f"feature order {doc.get('feature_order')} != {list(FEATURE_ORDER)}")
        layers = doc.get("layers")
        if not isinstance(layers, dict):
            raise FormatError("layers", "missing")
        params = {}
        for name, shape in LAYER_SHAPES.items():
            if name not in layers:
                raise ShapeMismatch(f"missing layer {name}")
            got = tuple(layers[name]["shape"])
            vals = np.asarray(layers[name]["values"], dtype=float)
            if got != shape or vals.size != int(np.prod(shape)):
                raise ShapeMismatch(f"{name}: expected {shape}, got {got}")
            params[name] = vals.reshape(shape)
        extra = set(layers) - set(LAYER_SHAPES)
        if extra:
            raise ShapeMismatch(f"unexpected layers {sorted(extra)}")
        return cls(params, float(doc.get("coord_scale", DEFAULT_COORD_SCALE)), int(doc.get("seed", 0)))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SiameseModel":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError("json", str(exc)) from exc
        return cls.from_json(doc)


def _vec(e):
    return e.v if hasattr(e, "v") else e


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    lrs: tuple[float, ...] = LR_GRID
    weight_decays: tuple[float, ...] = WEIGHT_DECAY_GRID
    batch_size: int = 24
    max_epochs: int = 50
    patience: int = 10
    folds: int = 5
    seed: int = 0
    val_fraction: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in LAYER_SHAPES:
            g = grads[k] + self.wd * params[k] if self.wd else grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _mse(model: SiameseModel, X1, X2, y) -> float:
    if len(y) == 0:
        return float("nan")
    F1, F2 = model.features(X1), model.features(X2)
    d = np.sqrt(((F1 - F2) ** 2).sum(axis=1))
    return float(np.mean((d / (1.0 + d) - y) ** 2))


def fit(X1, X2, y, lr: float, weight_decay: float, cfg: TrainConfig,
        val: tuple | None = None, init_seed: int | None = None):
    """Mini-batch Adam. With ``val`` given, early-stops and restores the best epoch."""
    model = SiameseModel.init(cfg.seed if init_seed is None else init_seed)
    opt = Adam(model.params, lr, weight_decay, cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    best, best_val, stale = model.copy(), np.inf, 0
    n = len(y)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        for bi, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            loss, grads = model.loss_and_grad(X1[idx], X2[idx], y[idx])
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise NonFiniteLoss(bi, epoch)
            opt.step(model.params, grads)
        rec = {"epoch": epoch + 1, "train_mse": _mse(model, X1, X2, y)}
        if val is not None:
            v = _mse(model, *val)
            rec["val_mse"] = v
            if v <= best_val:  # ties keep the later epoch
                best, best_val, stale = model.copy(), v, 0
            else:
                stale += 1
        history.append(rec)
        if val is not None and stale >= cfg.patience:
            break
    if val is not None:
        model = best
    return model, history


def _pairs_to_arrays(pairs: Sequence):
    X1 = np.array([np.asarray(_vec(a), dtype=float) for a, _, _ in pairs])
    X2 = np.array([np.asarray(_vec(b), dtype=float) for _, b, _ in pairs])
    y = np.array([float(t) for _, _, t in pairs])
    return X1, X2, y


def train(pairs: Sequence, cfg: TrainConfig | None = None, coord_scale: float = DEFAULT_COORD_SCALE):
    """Grid-search (lr, weight decay) by k-fold CV, then refit on everything.

    Returns the final model and a JSON-serialisable training report.
    """
    cfg = cfg or TrainConfig()
    if len(pairs) < 1:
        raise ValueError("need at least 1 training pair")
    X1, X2, y = _pairs_to_arrays(pairs)
    if np.any((y < 0) | (y > 1)) or not np.isfinite(y).all():
        raise ValueError("targets must lie in [0, 1]")
    n = len(y)

    k = min(cfg.folds, n)
    grid = []
    if k >= 2:
        perm = np.random.default_rng(cfg.seed).permutation(n)
        folds = np.array_split(perm, k)
        for lr in cfg.lrs:
            for wd in cfg.weight_decays:
                scores = []
                for f in range(k):
                    va = folds[f]
                    tr = np.concatenate([folds[j] for j in range(k) if j != f])
                    m, _ = fit(X1[tr], X2[tr], y[tr], lr, wd, cfg)
                    scores.append(_mse(m, X1[va], X2[va], y[va]))
                grid.append({"lr": lr, "weight_decay": wd, "cv_mse": float(np.mean(scores))})
        chosen = min(grid, key=lambda g: g["cv_mse"])
    else:
        # a single pair cannot be cross-validated; use the middle of the grid
        chosen = {"lr": cfg.lrs[len(cfg.lrs) // 2], "weight_decay": cfg.weight_decays[0],
                  "cv_mse": None}

    perm = np.random.default_rng(cfg.seed + 2).permutation(n)
    n_val = max(1, int(round(n * cfg.val_fraction))) if n >= 2 else 0
    tr, va = perm[:n - n_val], perm[n - n_val:]
    model, history = fit(X1[tr], X2[tr], y[tr], chosen["lr"], chosen["weight_decay"], cfg,
                         val=(X1[va], X2[va], y[va]) if n_val else None)
    model.coord_scale = coord_scale
    report = {
        "config": {k_: (list(v) if isinstance(v, tuple) else v) for k_, v in asdict(cfg).items()},
        "grid": grid,
        "chosen": chosen,
        "epochs": history,
        "n_pairs": n,
        "final_train_mse": _mse(model, X1, X2, y),
        "final_val_mse": _mse(model, X1[va], X2[va], y[va]) if len(va) else None,
    }
    return model, report
