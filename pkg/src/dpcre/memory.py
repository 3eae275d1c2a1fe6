"""Representative-sample memory: k-means selection, weighted prototypes,
and nearest-class-mean prediction.

Memory stores raw feature vectors, never embeddings; prototypes and cached
embeddings are recomputed through the current encoder after every task, so
prediction always sees the live feature space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .data import Sample
from .mathcore import Array, RngState


@dataclass
class ClusterAssignment:
    centroids: Array
    assignment: Array
    sizes: Array
    objective_history: list[float]


def _nearest(points: Array, centroids: Array) -> Array:
    """Index of the nearest centroid per point; ties go to the lowest index."""
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _objective(points: Array, centroids: Array, assignment: Array) -> float:
    return float(((points - centroids[assignment]) ** 2).sum())


def _fix_empty(points: Array, centroids: Array, assignment: Array) -> tuple[Array, Array]:
    """Reseed empty clusters with the point farthest from its own centroid."""
    k = centroids.shape[0]
    for _ in range(k + 1):
        sizes = np.bincount(assignment, minlength=k)
        empties = np.flatnonzero(sizes == 0)
        if empties.size == 0:
            break
        dists = ((points - centroids[assignment]) ** 2).sum(axis=1)
        cand = int(dists.argmax())
        if dists[cand] == 0.0:
            break  # all points sit on centroids; cluster stays empty
        centroids = centroids.copy()
        centroids[empties[0]] = points[cand]
        assignment = _nearest(points, centroids)
    return centroids, assignment


def _seed_centroids(points: Array, k: int, rng: RngState) -> Array:
    """k-means++ seeding; stops early when remaining points coincide with
    chosen centroids (duplicate-heavy data)."""
    n = points.shape[0]
    first = rng.integers(0, n)
    centroids = [points[first]]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    while len(centroids) < k:
        total = d2.sum()
        if total <= 0.0:
            break
        idx = rng.choice_weighted(n, d2 / total)
        centroids.append(points[idx])
        d2 = np.minimum(d2, ((points - centroids[-1]) ** 2).sum(axis=1))
    return np.asarray(centroids)


def kmeans(points, k: int, rng: RngState, max_iters: int = 100) -> ClusterAssignment:
    """Lloyd iterations from k-means++ seeding, deterministic given rng.

    k is lowered to the number of points (and further to the number of
    distinct points, which only matters for duplicate-degenerate inputs).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if n == 0:
        raise ValueError("kmeans needs at least one point")
    if k < 1:
        raise ValueError(f"kmeans needs k >= 1, got {k}")
    n_distinct = len({p.tobytes() for p in points})
    k = min(k, n, n_distinct)

    centroids = _seed_centroids(points, k, rng)
    assignment = _nearest(points, centroids)
    centroids, assignment = _fix_empty(points, centroids, assignment)
    history = [_objective(points, centroids, assignment)]
    for _ in range(max_iters):
        k_eff = centroids.shape[0]
        new_centroids = centroids.copy()
        for c in range(k_eff):
            members = assignment == c
            if members.any():
                new_centroids[c] = points[members].mean(axis=0)
        new_assignment = _nearest(points, new_centroids)
        new_centroids, new_assignment = _fix_empty(points, new_centroids, new_assignment)
        history.append(_objective(points, new_centroids, new_assignment))
        centroids = new_centroids
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    sizes = np.bincount(assignment, minlength=centroids.shape[0])
    return ClusterAssignment(centroids, assignment, sizes, history)


@dataclass
class MemorySample:
    sample: Sample
    weight: float


class MemoryStore:
    """Per-relation retained samples with weights, prototypes, and cached
    current-model embeddings (keyed by dense relation id)."""

    def __init__(self):
        self.samples: dict[int, list[MemorySample]] = {}
        self.prototypes: dict[int, Array] = {}
        self.embeddings: dict[int, Array] = {}

    def relations(self) -> list[int]:
        return sorted(self.samples)

    def add_relation(self, rel_id: int, selected: list[MemorySample]) -> None:
        if rel_id in self.samples:
            raise ValueError(f"relation {rel_id} already has memory")
        if not selected:
            raise ValueError(f"relation {rel_id}: empty memory selection")
        self.samples[rel_id] = selected

    def total_samples(self) -> int:
        return sum(len(v) for v in self.samples.values())

    def __len__(self) -> int:
        return len(self.samples)


def select_memory(
    m: mdl.ModelState,
    relation_data: list[Sample],
    budget: int,
    rng: RngState,
    max_iters: int = 100,
) -> list[MemorySample]:
    """Pick up to ``budget`` typical samples of one relation.

    Samples are embedded with the current model and clustered; each cluster
    contributes the member nearest its centroid (ties to the lowest sample
    index) with weight = cluster size / total. When the relation has at most
    ``budget`` samples, every sample is kept with uniform weight.
    """
    if budget < 1:
        raise ValueError(f"memory budget must be >= 1, got {budget}")
    if not relation_data:
        raise ValueError("select_memory needs at least one sample")
    if len({s.label for s in relation_data}) != 1:
        raise ValueError("select_memory expects samples of a single relation")
    n = len(relation_data)
    if n <= budget:
        return [MemorySample(s, 1.0 / n) for s in relation_data]

    X = np.asarray([s.features for s in relation_data], dtype=np.float64)
    Z, _ = mdl.encoder_forward(m.encoder, X)
    clusters = kmeans(Z, budget, rng, max_iters)
    selected: list[MemorySample] = []
    for c in range(clusters.centroids.shape[0]):
        members = np.flatnonzero(clusters.assignment == c)
        if members.size == 0:
            continue
        d2 = ((Z[members] - clusters.centroids[c]) ** 2).sum(axis=1)
        pick = int(members[int(d2.argmin())])
        selected.append(MemorySample(relation_data[pick], clusters.sizes[c] / n))
    return selected


def compute_prototypes(m: mdl.ModelState, store: MemoryStore) -> MemoryStore:
    """Recompute every relation's weighted prototype and embedding cache
    through the current model."""
    if not store.samples:
        raise ValueError("compute_prototypes on an empty store")
    for rel in store.relations():
        mem = store.samples[rel]
        X = np.asarray([ms.sample.features for ms in mem], dtype=np.float64)
        weights = np.asarray([ms.weight for ms in mem], dtype=np.float64)
        Z, _ = mdl.encoder_forward(m.encoder, X)
        store.embeddings[rel] = Z
        store.prototypes[rel] = weights @ Z
    return store


def ncm_predict(z: Array, store: MemoryStore) -> int:
    """Label of the nearest prototype; ties go to the lowest relation id."""
    return int(predict_batch(np.asarray(z, dtype=np.float64)[None, :], store, "ncm")[0])


def double_ncm_predict(z: Array, store: MemoryStore) -> int:
    """Label minimizing distance-to-prototype plus distance-to-nearest-memory."""
    return int(
        predict_batch(np.asarray(z, dtype=np.float64)[None, :], store, "double_ncm")[0]
    )


def predict_batch(Z: Array, store: MemoryStore, rule: str = "double_ncm") -> Array:
    """Vectorized prediction over rows of Z. ``rule`` is ncm or double_ncm."""
    rels = store.relations()
    if not rels or not store.prototypes:
        raise ValueError("prediction requires a store with prototypes")
    protos = np.asarray([store.prototypes[r] for r in rels])
    scores = np.sqrt(((Z[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2))
    if rule == "double_ncm":
        for col, r in enumerate(rels):
            emb = store.embeddings.get(r)
            if emb is None or emb.shape[0] == 0:
                raise ValueError(f"relation {r} has no cached memory embeddings")
            d2 = ((Z[:, None, :] - emb[None, :, :]) ** 2).sum(axis=2)
            scores[:, col] += np.sqrt(d2.min(axis=1))
    elif rule != "ncm":
        raise ValueError(f"unknown prediction rule: {rule}")
    winners = scores.argmin(axis=1)
    return np.asarray([rels[w] for w in winners], dtype=np.int64)


def dump_memory(store: MemoryStore, path) -> None:
    """Audit dump: per relation, sample ids, weights, and prototype."""
    doc = {}
    for rel in store.relations():
        doc[str(rel)] = {
            "samples": [
                {"id": ms.sample.id, "weight": ms.weight} for ms in store.samples[rel]
            ],
            "prototype": list(store.prototypes.get(rel, [])),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
