"""Dataset ingestion, synthetic benchmark generation, and task sequences.

Datasets are JSON Lines files, one object per sample:
``{"id": str, "label": str, "features": [floats...]}`` with a constant
feature dimension. Text encoding is out of scope; any upstream encoder can
export this format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mathcore import Array, RngState


@dataclass(frozen=True)
class Sample:
    id: str
    label: str
    features: Array


@dataclass
class TaskSpec:
    relations: list[str]
    train: list[Sample]
    test: list[Sample]

    def __post_init__(self):
        rel = set(self.relations)
        for s in self.train + self.test:
            if s.label not in rel:
                raise ValueError(f"sample {s.id} has label {s.label} outside the task")
        overlap = {s.id for s in self.train} & {s.id for s in self.test}
        if overlap:
            raise ValueError(f"train/test share sample ids: {sorted(overlap)[:3]}")


@dataclass
class SequenceSpec:
    tasks: list[TaskSpec]
    seed: int = 0

    def __post_init__(self):
        seen: set[str] = set()
        for t in self.tasks:
            dup = seen & set(t.relations)
            if dup:
                raise ValueError(f"relation sets overlap across tasks: {sorted(dup)}")
            seen |= set(t.relations)


def load_dataset(path) -> tuple[list[Sample], dict[str, int]]:
    """Parse a JSONL dataset; label table is ordered by first appearance."""
    samples: list[Sample] = []
    labels: dict[str, int] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                sid, label = obj["id"], obj["label"]
                feats = np.asarray(obj["features"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed sample on line {lineno}: {exc}") from exc
            if feats.ndim != 1 or feats.size == 0:
                raise ValueError(f"{path}: line {lineno}: features must be a flat list")
            if dim is None:
                dim = feats.size
            elif feats.size != dim:
                raise ValueError(
                    f"{path}: line {lineno}: feature dim {feats.size} differs from {dim}"
                )
            if label not in labels:
                labels[label] = len(labels)
            samples.append(Sample(str(sid), str(label), feats))
    if not samples:
        raise ValueError(f"{path}: no samples")
    return samples, labels


def write_dataset(path, samples: list[Sample]) -> None:
    """Canonical writer; load -> write round-trips byte-identically."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {"id": s.id, "label": s.label, "features": list(s.features)},
                    separators=(",", ":"),
                )
            )
            fh.write("\n")


def generate_synthetic(
    num_relations: int,
    samples_per_relation: int,
    feature_dim: int,
    class_separation: float,
    noise_sigma: float,
    seed: int,
    samples_range: tuple[int, int] | None = None,
) -> list[Sample]:
    """Gaussian blobs with means uniform on a sphere of the given radius.

    ``samples_range`` optionally draws an uneven per-relation sample count,
    emulating class imbalance; otherwise every relation gets exactly
    ``samples_per_relation`` samples. Deterministic per seed; each relation
    uses its own substream.
    """
    if num_relations <= 0 or samples_per_relation <= 0 or feature_dim <= 0:
        raise ValueError("counts and dims must be positive")
    if class_separation <= 0:
        raise ValueError(f"class_separation must be positive, got {class_separation}")
    root = RngState(seed)
    samples: list[Sample] = []
    for r in range(num_relations):
        rel_rng = root.substream("relation", r)
        direction = rel_rng.normal(feature_dim)
        norm = np.linalg.norm(direction)
        while norm < 1e-12:  # essentially impossible, but stay total
            direction = rel_rng.normal(feature_dim)
            norm = np.linalg.norm(direction)
        mean = class_separation * direction / norm
        count = samples_per_relation
        if samples_range is not None:
            lo, hi = samples_range
            count = rel_rng.integers(lo, hi + 1)
        noise = rel_rng.normal(count * feature_dim).reshape(count, feature_dim)
        label = f"rel{r:03d}"
        for i in range(count):
            samples.append(
                Sample(f"{label}_s{i:04d}", label, mean + noise_sigma * noise[i])
            )
    return samples


def split_sequence(
    samples: list[Sample],
    num_tasks: int,
    train_fraction: float,
    seed: int,
) -> SequenceSpec:
    """Shuffle relations by seed, partition into tasks, split train/test.

    Remainder relations go to the earliest tasks. Per relation, samples are
    shuffled with a per-relation substream and split by ``train_fraction``
    with both sides kept non-empty.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_relation: dict[str, list[Sample]] = {}
    for s in samples:
        by_relation.setdefault(s.label, []).append(s)
    relations = list(by_relation)
    if len(relations) < num_tasks:
        raise ValueError(
            f"cannot split {len(relations)} relations into {num_tasks} tasks"
        )
    rng = RngState(seed)
    order = rng.substream("relation-order").permutation(len(relations))
    shuffled = [relations[i] for i in order]

    base, extra = divmod(len(relations), num_tasks)
    tasks: list[TaskSpec] = []
    pos = 0
    for t in range(num_tasks):
        size = base + (1 if t < extra else 0)
        rels = shuffled[pos : pos + size]
        pos += size
        train: list[Sample] = []
        test: list[Sample] = []
        for rel in rels:
            pool = by_relation[rel]
            if len(pool) < 2:
                raise ValueError(f"relation {rel} needs at least 2 samples to split")
            perm = rng.substream("split", rel).permutation(len(pool))
            n_train = int(round(len(pool) * train_fraction))
            n_train = min(max(n_train, 1), len(pool) - 1)
            train.extend(pool[i] for i in perm[:n_train])
            test.extend(pool[i] for i in perm[n_train:])
        tasks.append(TaskSpec(rels, train, test))
    return SequenceSpec(tasks, seed)
