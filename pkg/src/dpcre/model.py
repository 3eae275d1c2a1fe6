"""Shared encoder and the two classifier-layer heads.

The encoder is a pluggable multilayer perceptron over precomputed feature
vectors: affine layers with ReLU activations in between and a linear final
layer. On top of its embedding sit a classification head (single affine map
to logits) and a contrastive head (two affine maps around a ReLU, optionally
unit-normalized). All gradients are hand-derived; there is no autodiff.

Flattened parameter layout, used by ``flatten``/``unflatten``/``sgd_step``
and by every gradient vector: encoder layers in order (each weight matrix
row-major, then its bias), then the classification head (W1 row-major, b1),
then the contrastive head (W2, b2, W3, b3).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mathcore import Array, RngState

NORM_EPS = 1e-12


def _ro(a: Array) -> Array:
    """Own a read-only float64 copy; model values are immutable."""
    out = np.array(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class EncoderParams:
    layers: tuple[tuple[Array, Array], ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        layers = tuple((_ro(W), _ro(b)) for W, b in self.layers)
        for i, (W, b) in enumerate(layers):
            if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
                raise ValueError(f"encoder layer {i} has inconsistent shapes")
            if i > 0 and layers[i - 1][0].shape[0] != W.shape[1]:
                raise ValueError(
                    f"encoder layer {i} input dim {W.shape[1]} does not chain with "
                    f"previous output dim {layers[i - 1][0].shape[0]}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.layers[-1][0].shape[0]


@dataclass(frozen=True)
class ClassifierHead:
    W1: Array
    b1: Array

    def __post_init__(self):
        object.__setattr__(self, "W1", _ro(self.W1))
        object.__setattr__(self, "b1", _ro(self.b1))
        if self.W1.shape[0] != self.b1.shape[0]:
            raise ValueError("classifier head weight/bias row mismatch")

    @property
    def num_classes(self) -> int:
        return self.W1.shape[0]


@dataclass(frozen=True)
class ContrastiveHead:
    W2: Array
    b2: Array
    W3: Array
    b3: Array

    def __post_init__(self):
        for name in ("W2", "b2", "W3", "b3"):
            object.__setattr__(self, name, _ro(getattr(self, name)))
        if self.W2.shape[0] != self.b2.shape[0] or self.W3.shape[0] != self.b3.shape[0]:
            raise ValueError("contrastive head weight/bias row mismatch")
        if self.W3.shape[1] != self.W2.shape[0]:
            raise ValueError(
                f"contrastive head stages do not chain: {self.W3.shape[1]} vs {self.W2.shape[0]}"
            )

    @property
    def proj_dim(self) -> int:
        return self.W3.shape[0]


@dataclass(frozen=True)
class ModelState:
    encoder: EncoderParams
    cls_head: ClassifierHead
    con_head: ContrastiveHead

    def __post_init__(self):
        if self.cls_head.W1.shape[1] != self.encoder.embed_dim:
            raise ValueError("classifier head does not match encoder embed dim")
        if self.con_head.W2.shape[1] != self.encoder.embed_dim:
            raise ValueError("contrastive head does not match encoder embed dim")

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    @property
    def embed_dim(self) -> int:
        return self.encoder.embed_dim

    @property
    def num_classes(self) -> int:
        return self.cls_head.num_classes

    def snapshot(self) -> "ModelState":
        """Immutable copy taken before a task begins; safe to hold forever."""
        return unflatten(self, flatten(self))


# A snapshot is just a ModelState that the trainer promises never to replace.
FrozenSnapshot = ModelState


def init_model(
    input_dim: int,
    hidden_dims: tuple[int, ...],
    embed_dim: int,
    proj_dim: int,
    num_classes: int,
    rng: RngState,
) -> ModelState:
    """Seeded initialization: weights gaussian / sqrt(fan_in), biases zero."""
    dims = [input_dim, *hidden_dims, embed_dim]
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        W = rng.substream("enc", i).normal(fan_out * fan_in).reshape(fan_out, fan_in)
        layers.append((W / np.sqrt(fan_in), np.zeros(fan_out)))
    encoder = EncoderParams(tuple(layers))
    W1 = rng.substream("cls").normal(num_classes * embed_dim).reshape(num_classes, embed_dim)
    cls = ClassifierHead(W1 / np.sqrt(embed_dim), np.zeros(num_classes))
    W2 = rng.substream("con", 0).normal(embed_dim * embed_dim).reshape(embed_dim, embed_dim)
    W3 = rng.substream("con", 1).normal(proj_dim * embed_dim).reshape(proj_dim, embed_dim)
    con = ContrastiveHead(
        W2 / np.sqrt(embed_dim), np.zeros(embed_dim), W3 / np.sqrt(embed_dim), np.zeros(proj_dim)
    )
    return ModelState(encoder, cls, con)


def grow_classifier(m: ModelState, num_new: int, rng: RngState) -> ModelState:
    """Append freshly initialized rows for new relations; old rows untouched."""
    if num_new <= 0:
        raise ValueError(f"grow_classifier needs num_new > 0, got {num_new}")
    embed = m.embed_dim
    new_W = rng.substream("grow", m.num_classes).normal(num_new * embed).reshape(num_new, embed)
    W1 = np.vstack([m.cls_head.W1, new_W / np.sqrt(embed)])
    b1 = np.concatenate([m.cls_head.b1, np.zeros(num_new)])
    return ModelState(m.encoder, ClassifierHead(W1, b1), m.con_head)


# ---------------------------------------------------------------------------
# forward passes (batched; X is samples-by-dim)


def encoder_forward(enc: EncoderParams, X: Array) -> tuple[Array, list]:
    """Returns (Z, cache); cache holds per-layer inputs and pre-activations."""
    if X.shape[1] != enc.input_dim:
        raise ValueError(
            f"encode: input dim {X.shape[1]} does not match encoder input {enc.input_dim}"
        )
    cache = []
    cur = X
    last = len(enc.layers) - 1
    for i, (W, b) in enumerate(enc.layers):
        pre = cur @ W.T + b
        cache.append((cur, pre))
        cur = pre if i == last else np.maximum(pre, 0.0)
    return cur, cache


def encoder_backward(enc: EncoderParams, cache: list, dZ: Array) -> list[tuple[Array, Array]]:
    """Parameter gradients for each layer given dLoss/dZ."""
    grads: list[tuple[Array, Array]] = [None] * len(enc.layers)  # type: ignore[list-item]
    last = len(enc.layers) - 1
    dcur = dZ
    for i in range(last, -1, -1):
        W, _ = enc.layers[i]
        inp, pre = cache[i]
        dpre = dcur if i == last else dcur * (pre > 0.0)
        grads[i] = (dpre.T @ inp, dpre.sum(axis=0))
        if i > 0:
            dcur = dpre @ W
    return grads


def cls_forward(head: ClassifierHead, Z: Array) -> Array:
    if Z.shape[1] != head.W1.shape[1]:
        raise ValueError(
            f"classify: embedding dim {Z.shape[1]} does not match head dim {head.W1.shape[1]}"
        )
    return Z @ head.W1.T + head.b1


def cls_backward(head: ClassifierHead, Z: Array, dlogits: Array):
    """Returns ((dW1, db1), dZ)."""
    return (dlogits.T @ Z, dlogits.sum(axis=0)), dlogits @ head.W1


def con_forward(head: ContrastiveHead, Z: Array, normalize: bool = True):
    """Returns (H, cache) for the projection head.

    Raw output is W3 ReLU(W2 z + b2) + b3; when ``normalize`` the rows are
    scaled to unit Euclidean norm, except rows with norm below 1e-12 which
    pass through unchanged.
    """
    if Z.shape[1] != head.W2.shape[1]:
        raise ValueError(
            f"project: embedding dim {Z.shape[1]} does not match head dim {head.W2.shape[1]}"
        )
    pre = Z @ head.W2.T + head.b2
    act = np.maximum(pre, 0.0)
    raw = act @ head.W3.T + head.b3
    if not normalize:
        return raw, (Z, pre, act, raw, None)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    safe = norms >= NORM_EPS
    H = np.where(safe, raw / np.where(safe, norms, 1.0), raw)
    return H, (Z, pre, act, raw, (norms, safe))


def con_backward(head: ContrastiveHead, cache, dH: Array):
    """Returns ((dW2, db2, dW3, db3), dZ)."""
    Z, pre, act, raw, norm_info = cache
    if norm_info is None:
        draw = dH
    else:
        norms, safe = norm_info
        unit = raw / np.where(safe, norms, 1.0)
        # d(u/|u|) pushes dH through (I - h h^T)/|u|; degenerate rows pass through
        proj = (dH * unit).sum(axis=1, keepdims=True)
        draw = np.where(safe, (dH - proj * unit) / np.where(safe, norms, 1.0), dH)
    dW3 = draw.T @ act
    db3 = draw.sum(axis=0)
    dact = draw @ head.W3
    dpre = dact * (pre > 0.0)
    dW2 = dpre.T @ Z
    db2 = dpre.sum(axis=0)
    return (dW2, db2, dW3, db3), dpre @ head.W2


def encode(m: ModelState, x: Array) -> Array:
    """Embedding of a single feature vector."""
    z, _ = encoder_forward(m.encoder, np.asarray(x, dtype=np.float64)[None, :])
    return z[0]


def classify(m: ModelState, z: Array) -> Array:
    """Logits for a single embedding."""
    return cls_forward(m.cls_head, np.asarray(z, dtype=np.float64)[None, :])[0]


def project(m: ModelState, z: Array, normalize: bool = True) -> Array:
    """Contrastive projection of a single embedding."""
    h, _ = con_forward(m.con_head, np.asarray(z, dtype=np.float64)[None, :], normalize)
    return h[0]


# ---------------------------------------------------------------------------
# flat parameter vector


def _param_arrays(m: ModelState) -> list[Array]:
    out = []
    for W, b in m.encoder.layers:
        out.extend((W, b))
    out.extend((m.cls_head.W1, m.cls_head.b1))
    out.extend((m.con_head.W2, m.con_head.b2, m.con_head.W3, m.con_head.b3))
    return out


def param_count(m: ModelState) -> int:
    return sum(a.size for a in _param_arrays(m))


def flatten(m: ModelState) -> Array:
    return np.concatenate([a.ravel() for a in _param_arrays(m)])


def unflatten(template: ModelState, v: Array) -> ModelState:
    v = np.asarray(v, dtype=np.float64)
    expected = param_count(template)
    if v.shape != (expected,):
        raise ValueError(f"unflatten: expected {expected} parameters, got {v.shape}")
    pos = 0

    def take(like: Array) -> Array:
        nonlocal pos
        chunk = v[pos : pos + like.size].reshape(like.shape)
        pos += like.size
        return chunk

    layers = tuple(
        (take(W), take(b)) for W, b in template.encoder.layers
    )
    cls = ClassifierHead(take(template.cls_head.W1), take(template.cls_head.b1))
    con = ContrastiveHead(
        take(template.con_head.W2),
        take(template.con_head.b2),
        take(template.con_head.W3),
        take(template.con_head.b3),
    )
    return ModelState(EncoderParams(layers), cls, con)


def flatten_grads(m: ModelState, enc_grads=None, cls_grads=None, con_grads=None) -> Array:
    """Assemble per-parameter gradients into the documented flat layout.

    Missing blocks contribute zeros, so losses that never touch a head can
    skip computing its gradient.
    """
    pieces = []
    if enc_grads is None:
        pieces.extend(np.zeros(W.size + b.size) for W, b in m.encoder.layers)
    else:
        for dW, db in enc_grads:
            pieces.append(np.concatenate([dW.ravel(), db.ravel()]))
    if cls_grads is None:
        pieces.append(np.zeros(m.cls_head.W1.size + m.cls_head.b1.size))
    else:
        dW1, db1 = cls_grads
        pieces.append(np.concatenate([dW1.ravel(), db1.ravel()]))
    if con_grads is None:
        pieces.append(
            np.zeros(
                m.con_head.W2.size + m.con_head.b2.size + m.con_head.W3.size + m.con_head.b3.size
            )
        )
    else:
        dW2, db2, dW3, db3 = con_grads
        pieces.append(
            np.concatenate([dW2.ravel(), db2.ravel(), dW3.ravel(), db3.ravel()])
        )
    return np.concatenate(pieces)


def sgd_step(m: ModelState, grad: Array, lr: float) -> ModelState:
    """Plain gradient-descent update; returns a new state."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (param_count(m),):
        raise ValueError(
            f"gradient has dim {grad.shape} but model has {param_count(m)} parameters"
        )
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("sgd_step: gradient has non-finite entries")
    return unflatten(m, flatten(m) - lr * grad)


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(m: ModelState, path, seed_provenance: str = "") -> None:
    doc = {
        "input_dim": m.input_dim,
        "embed_dim": m.embed_dim,
        "proj_dim": m.con_head.proj_dim,
        "num_classes": m.num_classes,
        "hidden_dims": [W.shape[0] for W, _ in m.encoder.layers[:-1]],
        "con_hidden": m.con_head.W2.shape[0],
        "seed_provenance": seed_provenance,
        "params": flatten(m).tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> ModelState:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    skeleton = init_model(
        doc["input_dim"],
        tuple(doc["hidden_dims"]),
        doc["embed_dim"],
        doc["proj_dim"],
        doc["num_classes"],
        RngState(0),
    )
    return unflatten(skeleton, np.asarray(doc["params"], dtype=np.float64))
