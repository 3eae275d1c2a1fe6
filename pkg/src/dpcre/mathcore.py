"""Dense numeric primitives shared by every module.

Vectors are 1-D float64 numpy arrays, matrices are 2-D float64 numpy arrays.
Randomness comes exclusively from :class:`RngState`, a Philox counter-based
stream with deterministic keyed substreams, so that identical seeds reproduce
bit-identical runs on every platform. Platform-default RNGs are not used
anywhere in the package.
"""

from __future__ import annotations

import hashlib

import numpy as np

Array = np.ndarray


def _hash_key(part) -> int:
    """Map a str/int/bytes key part to a stable non-negative integer."""
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    if isinstance(part, str):
        part = part.encode("utf-8")
    if isinstance(part, bytes):
        return int.from_bytes(hashlib.blake2b(part, digest_size=8).digest(), "big")
    raise TypeError(f"unsupported rng key part: {type(part).__name__}")


def stable_key(*parts) -> int:
    """Stable 64-bit digest of a tuple of str/int/bytes parts."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(_hash_key(part).to_bytes(8, "big"))
    return int.from_bytes(h.digest(), "big")


class RngState:
    """Seeded Philox stream plus stateless keyed derivation.

    Two usage modes:

    * stateful draws (``normal``, ``integers``, ``permutation``, ``choice``)
      advance an internal Philox generator;
    * keyed derivation (``substream``, ``keyed_index``) is a pure function of
      (seed, spawn_key, keys) and never advances anything, so callers that
      derive per-item streams are invariant to iteration order.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        self._gen: np.random.Generator | None = None

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
            self._gen = np.random.Generator(np.random.Philox(seq))
        return self._gen

    def substream(self, *keys) -> "RngState":
        """Derive an independent stream keyed by ``keys`` (str or int)."""
        return RngState(self.seed, self.spawn_key + tuple(_hash_key(k) for k in keys))

    def keyed_index(self, n: int, *keys) -> int:
        """Uniform index in [0, n) as a pure function of this state and keys."""
        if n <= 0:
            raise ValueError(f"keyed_index needs n > 0, got {n}")
        return stable_key(self.seed, *self.spawn_key, *keys) % n

    def normal(self, n: int) -> Array:
        return self.gen.standard_normal(n)

    def integers(self, low: int, high: int | None = None) -> int:
        return int(self.gen.integers(low, high))

    def permutation(self, n: int) -> Array:
        return self.gen.permutation(n)

    def choice_weighted(self, n: int, p: Array) -> int:
        return int(self.gen.choice(n, p=p))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, spawn_key={self.spawn_key})"


def seeded_gaussian(rng: RngState, n: int) -> Array:
    """n standard-normal draws, advancing ``rng`` deterministically."""
    if n <= 0:
        raise ValueError(f"seeded_gaussian needs n > 0, got {n}")
    return rng.normal(n)


def linear_apply(W: Array, b: Array, x: Array) -> Array:
    """Affine map W x + b with hard dimension checks."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"weight must be a matrix, got ndim={W.ndim}")
    if W.shape[1] != x.shape[0]:
        raise ValueError(
            f"linear_apply: matrix has {W.shape[1]} columns but input has dim {x.shape[0]}"
        )
    if b.shape[0] != W.shape[0]:
        raise ValueError(
            f"linear_apply: bias has dim {b.shape[0]} but matrix has {W.shape[0]} rows"
        )
    out = W @ x + b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("linear_apply produced non-finite values")
    return out


def softmax_logloss(logits: Array, label_index: int) -> float:
    """Negative log softmax probability of ``label_index``, max-stabilized."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label_index < logits.shape[0]:
        raise ValueError(
            f"label index {label_index} out of range for {logits.shape[0]} logits"
        )
    shifted = logits - logits.max()
    return float(np.log(np.sum(np.exp(shifted))) - shifted[label_index])


def finite_difference_gradient(f, at: Array, step: float) -> Array:
    """Central-difference gradient of scalar ``f`` at ``at``.

    This is the independent oracle the analytic gradients are validated
    against; it never shares code with the analytic path.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    at = np.asarray(at, dtype=np.float64)
    grad = np.empty_like(at)
    for i in range(at.shape[0]):
        bumped = at.copy()
        bumped[i] = at[i] + step
        f_plus = f(bumped)
        bumped[i] = at[i] - step
        f_minus = f(bumped)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(
                f"finite_difference_gradient: non-finite evaluation at coordinate {i}"
            )
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad
