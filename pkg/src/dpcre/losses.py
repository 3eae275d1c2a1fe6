"""Training losses with exact hand-derived gradients.

Four losses: cross-entropy over the classification head, supervised
contrastive over the projection head, its decoupled variant in which memory
samples contribute only to denominators, and the change-amount penalty that
keeps same-label memory projections moving in lockstep between the pre-task
snapshot and the live model.

Every loss is a pure function of (model, batch, rng): the rng argument is
only used through stateless keyed derivation, so batch order never perturbs
positive sampling and repeated calls are bit-identical.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .mathcore import Array, RngState, stable_key


class Origin(enum.Enum):
    NEW = "new"
    MEMORY = "memory"


@dataclass(frozen=True)
class BatchItem:
    features: Array
    label: int
    origin: Origin = Origin.NEW


@dataclass
class Batch:
    items: list[BatchItem]
    _X: Array = field(init=False, repr=False)

    def __post_init__(self):
        if not self.items:
            raise ValueError("batch must contain at least one sample")
        dims = {np.asarray(it.features).shape for it in self.items}
        if len(dims) != 1:
            raise ValueError(f"batch has inconsistent feature dims: {sorted(dims)}")
        self._X = np.asarray([it.features for it in self.items], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def features(self) -> Array:
        return self._X

    @property
    def labels(self) -> Array:
        return np.asarray([it.label for it in self.items], dtype=np.int64)

    @property
    def origins(self) -> list[Origin]:
        return [it.origin for it in self.items]

    def memory_part(self) -> "Batch | None":
        mem = [it for it in self.items if it.origin is Origin.MEMORY]
        return Batch(mem) if mem else None


@dataclass(frozen=True)
class LossValue:
    value: float
    grad: Array

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FloatingPointError(f"loss value is not finite: {self.value}")

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(self.value + other.value, self.grad + other.grad)

    def scaled(self, factor: float) -> "LossValue":
        return LossValue(self.value * factor, self.grad * factor)


def zero_loss(m: mdl.ModelState) -> LossValue:
    return LossValue(0.0, np.zeros(mdl.param_count(m)))


def _anchor_key(item: BatchItem) -> int:
    """Stable identity of a sample: hash of label and feature bytes."""
    feats = np.ascontiguousarray(item.features, dtype=np.float64)
    return stable_key(int(item.label), feats.tobytes())


def ce_loss(m: mdl.ModelState, batch: Batch) -> LossValue:
    """Mean softmax log-loss over all batch samples, memory included."""
    labels = batch.labels
    if labels.min() < 0 or labels.max() >= m.num_classes:
        bad = labels[(labels < 0) | (labels >= m.num_classes)][0]
        raise ValueError(f"label {bad} outside the {m.num_classes} known classes")
    Z, enc_cache = mdl.encoder_forward(m.encoder, batch.features)
    logits = mdl.cls_forward(m.cls_head, Z)
    n = len(batch)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    value = float(np.mean(lse - shifted[np.arange(n), labels]))

    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    dlogits = probs / n
    cls_grads, dZ = mdl.cls_backward(m.cls_head, Z, dlogits)
    enc_grads = mdl.encoder_backward(m.encoder, enc_cache, dZ)
    return LossValue(value, mdl.flatten_grads(m, enc_grads, cls_grads, None))


def _contrastive(
    m: mdl.ModelState,
    batch: Batch,
    tau: float,
    rng: RngState,
    decoupled: bool,
    normalize: bool,
    include_self: bool,
) -> LossValue:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = len(batch)
    labels = batch.labels
    origins = batch.origins
    keys = np.asarray([_anchor_key(it) for it in batch.items], dtype=np.uint64)

    eligible = np.ones(n, dtype=bool)
    if decoupled:
        eligible = np.asarray([o is Origin.NEW for o in origins])

    # one positive per anchor, chosen among eligible same-label mates via a
    # per-anchor keyed substream; anchors with no mate are skipped
    anchors: list[int] = []
    positives: list[int] = []
    for i in range(n):
        if not eligible[i]:
            continue
        mates = np.flatnonzero(eligible & (labels == labels[i]))
        mates = mates[mates != i]
        if mates.size == 0:
            continue
        order = np.argsort(keys[mates], kind="stable")
        pick = rng.keyed_index(mates.size, int(keys[i]), "positive")
        anchors.append(i)
        positives.append(int(mates[order[pick]]))
    if not anchors:
        return zero_loss(m)

    Z, enc_cache = mdl.encoder_forward(m.encoder, batch.features)
    H, con_cache = mdl.con_forward(m.con_head, Z, normalize)
    sims = (H @ H.T) / tau

    a_idx = np.asarray(anchors)
    p_idx = np.asarray(positives)
    rows = sims[a_idx]
    allowed = np.ones((len(anchors), n), dtype=bool)
    if not include_self:
        allowed[np.arange(len(anchors)), a_idx] = False
    masked = np.where(allowed, rows, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    expd = np.where(allowed, np.exp(masked - row_max), 0.0)
    lse = np.log(expd.sum(axis=1)) + row_max[:, 0]
    value = float(np.mean(lse - rows[np.arange(len(anchors)), p_idx]))

    n_anchors = len(anchors)
    drows = expd / expd.sum(axis=1, keepdims=True) / n_anchors
    drows[np.arange(n_anchors), p_idx] -= 1.0 / n_anchors
    dsims = np.zeros((n, n))
    np.add.at(dsims, a_idx, drows)
    dH = (dsims @ H + dsims.T @ H) / tau

    con_grads, dZ = mdl.con_backward(m.con_head, con_cache, dH)
    enc_grads = mdl.encoder_backward(m.encoder, enc_cache, dZ)
    return LossValue(value, mdl.flatten_grads(m, enc_grads, None, con_grads))


def supcon_loss(
    m: mdl.ModelState,
    batch: Batch,
    tau: float,
    rng: RngState,
    normalize: bool = True,
    include_self: bool = False,
) -> LossValue:
    """Supervised contrastive loss; every sample is a candidate anchor."""
    return _contrastive(m, batch, tau, rng, False, normalize, include_self)


def dpcon_loss(
    m: mdl.ModelState,
    batch: Batch,
    tau: float,
    rng: RngState,
    normalize: bool = True,
    include_self: bool = False,
) -> LossValue:
    """Decoupled contrastive loss: anchors and positives are new-task samples
    only, memory samples appear only in denominators."""
    return _contrastive(m, batch, tau, rng, True, normalize, include_self)


def change_penalty(deltas: Array, labels: Array) -> tuple[float, Array]:
    """Mean over ordered same-label pairs of the change-difference norm.

    ``deltas`` are per-sample projection changes; returns the loss value and
    its gradient with respect to deltas. Coincident pairs contribute zero
    with zero (sub)gradient. Normalization is 1/len(deltas).
    """
    n = deltas.shape[0]
    value = 0.0
    ddeltas = np.zeros_like(deltas)
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        for a in range(idx.size):
            for b in range(a + 1, idx.size):
                i, j = idx[a], idx[b]
                diff = deltas[i] - deltas[j]
                norm = float(np.linalg.norm(diff))
                if norm == 0.0:
                    continue
                value += 2.0 * norm  # both (i, j) and (j, i)
                g = (2.0 / norm) * diff
                ddeltas[i] += g
                ddeltas[j] -= g
    return value / n, ddeltas / n


def ca_loss(
    m: mdl.ModelState,
    prev: mdl.FrozenSnapshot,
    memory_batch: Batch | None,
    normalize: bool = True,
) -> LossValue:
    """Change-amount limitation over the memory samples of a batch.

    Gradient flows only through the live model; the snapshot side is a
    constant reference. An empty (None) memory batch yields zero loss and
    zero gradient.
    """
    if memory_batch is None:
        return zero_loss(m)
    if any(it.origin is not Origin.MEMORY for it in memory_batch.items):
        raise ValueError("ca_loss expects a batch of memory samples only")
    Z, enc_cache = mdl.encoder_forward(m.encoder, memory_batch.features)
    H, con_cache = mdl.con_forward(m.con_head, Z, normalize)
    Z_prev, _ = mdl.encoder_forward(prev.encoder, memory_batch.features)
    H_prev, _ = mdl.con_forward(prev.con_head, Z_prev, normalize)

    value, ddeltas = change_penalty(H - H_prev, memory_batch.labels)
    con_grads, dZ = mdl.con_backward(m.con_head, con_cache, ddeltas)
    enc_grads = mdl.encoder_backward(m.encoder, enc_cache, dZ)
    return LossValue(value, mdl.flatten_grads(m, enc_grads, None, con_grads))
