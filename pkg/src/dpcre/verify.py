"""Release-gate verification.

Two independent oracles: central finite differences against every analytic
loss gradient, and a dense grid search against the closed-form balance
coefficient. The CLI exposes both as the gradcheck command; the acceptance
tests call them directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .balance import compute_gamma
from .losses import Batch, BatchItem, Origin, ca_loss, ce_loss, dpcon_loss, supcon_loss
from .mathcore import RngState, finite_difference_gradient


@dataclass
class VerifyInstance:
    model: mdl.ModelState
    prev: mdl.ModelState
    batch: Batch
    mem_batch: Batch
    tau: float
    rng: RngState


def make_instance(
    rng: RngState,
    input_dim: int = 8,
    hidden: int = 16,
    embed: int = 8,
    proj: int = 4,
    num_classes: int = 5,
    batch_size: int = 8,
) -> VerifyInstance:
    """Seeded random model/snapshot/batch triple for gradient checking.

    All parameters, biases included, are drawn at generic positions: the
    projection head is non-differentiable exactly where a raw projection
    sits on the zero-norm guard, and zero biases would park dead-ReLU rows
    right on that point.
    """
    skeleton = mdl.init_model(input_dim, (hidden,), embed, proj, num_classes, rng.substream("m"))
    n_params = mdl.param_count(skeleton)
    m = mdl.unflatten(skeleton, 0.4 * rng.substream("mv").normal(n_params))
    prev = mdl.unflatten(skeleton, 0.4 * rng.substream("pv").normal(n_params))
    feat_rng = rng.substream("x")
    lab_rng = rng.substream("y")

    items = []
    for i in range(batch_size):
        label = lab_rng.integers(0, num_classes)
        origin = Origin.MEMORY if (i >= 2 and lab_rng.integers(0, 2) == 1) else Origin.NEW
        items.append(BatchItem(feat_rng.normal(input_dim), label, origin))
    # guarantee a same-label NEW pair so every loss has at least one anchor
    items[1] = BatchItem(items[1].features, items[0].label, Origin.NEW)

    mem_items = []
    for i in range(6):
        label = lab_rng.integers(0, 3)
        mem_items.append(BatchItem(feat_rng.normal(input_dim), label, Origin.MEMORY))
    mem_items[1] = BatchItem(mem_items[1].features, mem_items[0].label, Origin.MEMORY)

    return VerifyInstance(m, prev, Batch(items), Batch(mem_items), 0.1, rng.substream("pos"))


def default_loss_adapters() -> dict:
    """Map loss name to a callable(model, instance) -> LossValue."""
    return {
        "ce": lambda m, inst: ce_loss(m, inst.batch),
        "supcon": lambda m, inst: supcon_loss(m, inst.batch, inst.tau, inst.rng),
        "dpcon": lambda m, inst: dpcon_loss(m, inst.batch, inst.tau, inst.rng),
        "ca": lambda m, inst: ca_loss(m, inst.prev, inst.mem_batch),
    }


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    threshold: float

    @property
    def passed(self) -> bool:
        return all(v < self.threshold for v in self.max_rel_err.values())

    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_err.items() if v >= self.threshold]


def run_gradcheck(
    seed: int,
    adapters: dict | None = None,
    instances: int = 20,
    step: float = 1e-5,
    threshold: float = 1e-5,
) -> GradCheckReport:
    """Compare each loss gradient against central finite differences.

    The per-instance error is the normwise relative error
    |analytic - fd| / max(|analytic|, |fd|); the report keeps the max over
    instances per loss.
    """
    adapters = adapters if adapters is not None else default_loss_adapters()
    root = RngState(seed)
    max_err: dict[str, float] = {}
    for name, adapter in adapters.items():
        worst = 0.0
        for i in range(instances):
            inst = make_instance(root.substream(name, i))
            analytic = adapter(inst.model, inst).grad

            def f(v, inst=inst, adapter=adapter):
                return adapter(mdl.unflatten(inst.model, v), inst).value

            fd = finite_difference_gradient(f, mdl.flatten(inst.model), step)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-300)
            worst = max(worst, float(np.linalg.norm(analytic - fd) / scale))
        max_err[name] = worst
    return GradCheckReport(max_err, threshold)


@dataclass
class GammaCheckReport:
    pairs: int
    max_delta_gamma: float
    delta_tolerance: float
    min_norm_violations: int
    descent_violations: int

    @property
    def passed(self) -> bool:
        return (
            self.max_delta_gamma <= self.delta_tolerance
            and self.min_norm_violations == 0
            and self.descent_violations == 0
        )


def run_gamma_check(
    seed: int,
    n_pairs: int = 1000,
    dims: tuple[int, ...] = (2, 10, 1000),
    grid_points: int = 100001,
    delta_tolerance: float = 1e-4,
) -> GammaCheckReport:
    """Check the closed-form coefficient against a dense grid search.

    Every third pair is constructed to force a clip (gamma exactly 1 or 0);
    the rest are independent gaussian pairs. On non-clipped pairs the
    min-norm and two-sided descent properties are checked as well.
    """
    root = RngState(seed)
    grid = np.linspace(0.0, 1.0, grid_points)
    max_delta = 0.0
    min_norm_bad = 0
    descent_bad = 0
    for i in range(n_pairs):
        rng = root.substream("pair", i)
        dim = dims[i % len(dims)]
        learn = rng.normal(dim)
        kind = i % 6
        if kind == 0:  # forced clip high: gamma must be exactly 1
            keep = (1.0 + rng.integers(1, 100) / 50.0) * learn
        elif kind == 3:  # forced clip low: gamma must be exactly 0
            keep = (rng.integers(1, 100) / 101.0) * learn
        else:
            keep = rng.normal(dim)

        res = compute_gamma(learn, keep)
        ll, lk, kk = res.dot_ll, res.dot_lk, res.dot_kk
        norms = grid**2 * ll + 2 * grid * (1 - grid) * lk + (1 - grid) ** 2 * kk
        best = int(norms.argmin())
        max_delta = max(max_delta, abs(res.gamma - float(grid[best])))

        combined_sq = float(res.combined @ res.combined)
        if combined_sq > float(norms.min()) + 1e-9:
            min_norm_bad += 1
        if 0.0 < res.gamma < 1.0:
            if float(res.combined @ learn) < combined_sq - 1e-9:
                descent_bad += 1
            if float(res.combined @ keep) < combined_sq - 1e-9:
                descent_bad += 1
    return GammaCheckReport(n_pairs, max_delta, delta_tolerance, min_norm_bad, descent_bad)
