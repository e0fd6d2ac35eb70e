"""On-disk store of dataset embeddings, their partitioners and model checkpoints.

Layout under the repository root::

    manifest.json              entries + model/forest references
    partitioners/<id>.json     one quadtree partitioner per entry
    models/                    siamese and forest checkpoints
    decisions.log              online decision traces (JSON lines)

Writes go through a single-writer file lock and replace the manifest
atomically, so readers never see a half-written file.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Collection, Sequence

import numpy as np
from filelock import FileLock

from .embedding import FEATURE_ORDER, DatasetEmbedding
from .errors import DuplicateId, EmptyRepository, FormatError
from .quadtree import QuadtreePartitioner

MANIFEST = "manifest.json"
FORMAT = "sjreuse-repo/1"


@dataclass(frozen=True)
class RepoEntry:
    dataset_id: str
    embedding: tuple[float, ...]
    partitioner_path: str  # relative to the repository root
    created_at: int  # logical sequence number, keeps manifests reproducible

    def to_json(self) -> dict:
        return {"dataset_id": self.dataset_id, "embedding": list(self.embedding),
                "partitioner_path": self.partitioner_path, "created_at": self.created_at}

    @classmethod
    def from_json(cls, doc: dict) -> "RepoEntry":
        try:
            emb = tuple(float(v) for v in doc["embedding"])
            entry = cls(str(doc["dataset_id"]), emb, str(doc["partitioner_path"]),
                        int(doc["created_at"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError("manifest.entry", str(exc)) from exc
        if len(emb) != len(FEATURE_ORDER):
            raise FormatError("manifest.entry.embedding", f"dimension {len(emb)}")
        return entry


@dataclass
class RepositoryManifest:
    entries: list[RepoEntry]
    model_ref: str | None = None
    forest_ref: str | None = None

    def to_json(self) -> dict:
        return {"format": FORMAT, "entries": [e.to_json() for e in self.entries],
                "model_ref": self.model_ref, "forest_ref": self.forest_ref}

    @classmethod
    def from_json(cls, doc: dict) -> "RepositoryManifest":
        if not isinstance(doc, dict) or doc.get("format") != FORMAT:
            raise FormatError("manifest.format", repr(doc.get("format") if isinstance(doc, dict) else doc))
        entries = [RepoEntry.from_json(e) for e in doc.get("entries", [])]
        ids = [e.dataset_id for e in entries]
        if len(set(ids)) != len(ids):
            raise FormatError("manifest.entries", "duplicate dataset_id")
        return cls(entries, doc.get("model_ref"), doc.get("forest_ref"))


@dataclass(frozen=True)
class Match:
    sim_max: float
    entry: RepoEntry
    side: str  # "R" or "S": which query dataset produced the maximum
    sim_R: float
    sim_S: float


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _emb(e) -> np.ndarray:
    v = e.as_array() if isinstance(e, DatasetEmbedding) else np.asarray(e, dtype=float)
    if v.shape != (len(FEATURE_ORDER),):
        raise ValueError(f"embedding must have shape ({len(FEATURE_ORDER)},)")
    return v


class Repository:
    def __init__(self, root: str | os.PathLike, create: bool = True):
        self.root = Path(root).resolve()
        if create:
            (self.root / "partitioners").mkdir(parents=True, exist_ok=True)
            (self.root / "models").mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.root / ".manifest.lock"))
        self._features: tuple | None = None  # (fingerprint, ids, F)
        self.manifest = self._read()

    # -- manifest ----------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    def _read(self) -> RepositoryManifest:
        if not self.manifest_path.exists():
            return RepositoryManifest([])
        try:
            doc = json.loads(self.manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError("manifest", str(exc)) from exc
        return RepositoryManifest.from_json(doc)

    def reload(self) -> None:
        self.manifest = self._read()
        self._features = None

    def _write(self, manifest: RepositoryManifest) -> None:
        _atomic_write(self.manifest_path, json.dumps(manifest.to_json(), indent=1) + "\n")
        self.manifest = manifest

    @property
    def entries(self) -> list[RepoEntry]:
        return list(self.manifest.entries)

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def __contains__(self, dataset_id: str) -> bool:
        return any(e.dataset_id == dataset_id for e in self.manifest.entries)

    def get(self, dataset_id: str) -> RepoEntry:
        for e in self.manifest.entries:
            if e.dataset_id == dataset_id:
                return e
        raise KeyError(dataset_id)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    # -- writes ------------------------------------------------------------

    def add(self, dataset_id: str, embedding, partitioner_path: str | os.PathLike
            ) -> RepositoryManifest:
        """Append an entry for an already-saved partitioner file."""
        emb = tuple(float(v) for v in _emb(embedding))
        with self.lock:
            current = self._read()
            if any(e.dataset_id == dataset_id for e in current.entries):
                raise DuplicateId(dataset_id)
            full = self.resolve(str(partitioner_path))
            if not full.exists():
                raise FileNotFoundError(full)
            QuadtreePartitioner.load(full)  # every referenced partitioner must load
            try:
                rel = str(full.relative_to(self.root))
            except ValueError:
                rel = str(full)
            seq = max((e.created_at for e in current.entries), default=-1) + 1
            entry = RepoEntry(dataset_id, emb, rel, seq)
            self._write(RepositoryManifest(current.entries + [entry],
                                           current.model_ref, current.forest_ref))
        return self.manifest

    def add_partitioner(self, dataset_id: str, embedding, p: QuadtreePartitioner
                        ) -> RepositoryManifest:
        if dataset_id in self:
            raise DuplicateId(dataset_id)
        path = self.root / "partitioners" / f"{dataset_id}.json"
        p.save(path)
        return self.add(dataset_id, embedding, path)

    def set_models(self, model_ref: str | None, forest_ref: str | None) -> None:
        with self.lock:
            current = self._read()
            self._write(RepositoryManifest(current.entries, model_ref, forest_ref))
        self._features = None

    def load_partitioner(self, entry: RepoEntry) -> QuadtreePartitioner:
        return QuadtreePartitioner.load(self.resolve(entry.partitioner_path))

    # -- lookup ------------------------------------------------------------

    def invalidate(self) -> None:
        self._features = None

    def entry_features(self, model) -> np.ndarray:
        ids = tuple(e.dataset_id for e in self.manifest.entries)
        fp = model.fingerprint
        if self._features is not None and self._features[0] == fp and self._features[1] == ids:
            return self._features[2]
        E = np.array([e.embedding for e in self.manifest.entries], dtype=float)
        F = model.features(E)
        self._features = (fp, ids, F)
        return F

    def scores(self, emb, model) -> np.ndarray:
        """Similarity ``1 - d/(1+d)`` of one query embedding to every entry."""
        F = self.entry_features(model)
        q = model.features(_emb(emb)[None, :])
        d = np.sqrt(((F - q) ** 2).sum(axis=1))
        return 1.0 - d / (1.0 + d)

    def best_match(self, R_emb, S_emb, model, exclude: Collection[str] = ()) -> Match:
        """Entry with the highest similarity to either join input.

        Ties go to the higher similarity, then to the left (R) side, then to
        the lexicographically smallest dataset id. Entries named in
        ``exclude`` are skipped.
        """
        ids = [e.dataset_id for e in self.manifest.entries]
        if not set(ids) - set(exclude):
            raise EmptyRepository("repository has no eligible entries")
        F = self.entry_features(model)
        Q = model.features(np.stack([_emb(R_emb), _emb(S_emb)]))
        d = np.sqrt(((F[None, :, :] - Q[:, None, :]) ** 2).sum(axis=2))
        sims = 1.0 - d / (1.0 + d)
        if exclude:
            sims[:, [i for i, x in enumerate(ids) if x in set(exclude)]] = -np.inf
        best = float(sims.max())
        s, _, j = min((int(s), ids[j], int(j)) for s, j in zip(*np.nonzero(sims == best)))
        return Match(best, self.manifest.entries[j], "RS"[s],
                     float(sims[0].max()), float(sims[1].max()))

    # -- decision log ------------------------------------------------------

    @property
    def decisions_path(self) -> Path:
        return self.root / "decisions.log"

    def append_trace(self, record: dict) -> None:
        with self.lock:
            with open(self.decisions_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def traces(self) -> list[dict]:
        if not self.decisions_path.exists():
            return []
        out = []
        for line in self.decisions_path.read_text().splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out


def loop_best_match(entries: Sequence[RepoEntry], R_emb, S_emb, model) -> tuple[float, str]:
    """Unbatched reference for :meth:`Repository.best_match` (tests and audits)."""
    best = None
    for side, q in enumerate((R_emb, S_emb)):
        for e in entries:
            sim = 1.0 - model.predict_distance(_emb(q), np.asarray(e.embedding))
            key = (-sim, side, e.dataset_id)
            if best is None or key < best:
                best = key
    return -best[0], best[2]
