"""Per-task training pipeline and multi-task sequence runner.

One task round: snapshot the live model, grow the classifier head for the
new relations, run initial learning on the new data alone, run replay
learning over new data mixed with memory (balancing the learn and keep
gradients), select representative memory for the new relations, recompute
all prototypes, and evaluate on the union of every test set seen so far.

Everything is a pure function of (config, seed, data); repeated runs are
bit-identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import model as mdl
from .balance import replay_gradient, scale_keep
from .data import Sample, SequenceSpec, TaskSpec, split_sequence
from .losses import (
    Batch,
    BatchItem,
    Origin,
    ca_loss,
    ce_loss,
    dpcon_loss,
    supcon_loss,
    zero_loss,
)
from .mathcore import RngState, stable_key
from .memory import MemorySample, MemoryStore, compute_prototypes, predict_batch, select_memory


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epoch1: int = 10
    epoch2: int = 10
    lr: float = 0.05
    batch_size: int = 32
    tau: float = 0.1
    lam: float = 0.5
    memory_budget: int = 10
    seed: int = 0
    hidden_dims: tuple[int, ...] = (32,)
    embed_dim: int = 16
    proj_dim: int = 8
    use_initial: bool = True
    use_decoupled: bool = True
    use_ca: bool = True
    use_balance: bool = True
    use_double_ncm: bool = True
    normalize_projections: bool = True
    ca_full_memory: bool = False
    denominator_includes_self: bool = False
    gamma_granularity: str = "step"
    replay_memory: bool = True

    def __post_init__(self):
        if self.epoch1 < 0 or self.epoch2 < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr <= 0 or self.tau <= 0:
            raise ValueError("lr and tau must be positive")
        if self.batch_size < 1 or self.memory_budget < 1:
            raise ValueError("batch_size and memory_budget must be >= 1")
        if self.gamma_granularity not in ("step", "epoch"):
            raise ValueError(f"unknown gamma_granularity: {self.gamma_granularity}")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            name = "lam" if key == "lambda" else key
            if name not in known:
                raise ValueError(f"unknown training config key: {key}")
            if name == "hidden_dims":
                value = tuple(value)
            kwargs[name] = value
        return cls(**kwargs)

    def to_dict(self) -> dict:
        doc = {}
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            value = getattr(self, f.name)
            doc[key] = list(value) if isinstance(value, tuple) else value
        return doc


@dataclass
class RoundReport:
    round_k: int
    overall: float
    per_task: list[float]
    test_counts: list[int]
    old_accuracy: float | None
    new_accuracy: float
    mean_gamma: float | None
    timings: dict[str, float] = field(default_factory=dict)
    warnings: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "round": self.round_k,
            "overall": self.overall,
            "per_task": self.per_task,
            "test_counts": self.test_counts,
            "old_accuracy": self.old_accuracy,
            "new_accuracy": self.new_accuracy,
            "mean_gamma": self.mean_gamma,
            "timings": self.timings,
            "warnings": self.warnings,
        }


@dataclass
class AccuracyMatrix:
    rounds: list[RoundReport]

    def final_accuracy(self) -> float:
        return self.rounds[-1].overall

    def cell(self, round_index: int, task_index: int) -> float:
        return self.rounds[round_index].per_task[task_index]


def _epoch_batches(n: int, batch_size: int, rng: RngState) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _contrastive_fn(cfg: TrainConfig, decoupled_phase: bool):
    if decoupled_phase and cfg.use_decoupled:
        return dpcon_loss
    return supcon_loss


def initial_learning(
    m: mdl.ModelState, items: list[BatchItem], cfg: TrainConfig, rng: RngState
) -> mdl.ModelState:
    """New-knowledge acquisition on the new task data alone."""
    for epoch in range(cfg.epoch1):
        batches = _epoch_batches(len(items), cfg.batch_size, rng.substream("shuffle", epoch))
        for step, idx in enumerate(batches):
            batch = Batch([items[i] for i in idx])
            step_rng = rng.substream("pos", epoch, step)
            try:
                loss = ce_loss(m, batch) + supcon_loss(
                    m,
                    batch,
                    cfg.tau,
                    step_rng,
                    cfg.normalize_projections,
                    cfg.denominator_includes_self,
                )
                m = mdl.sgd_step(m, loss.grad, cfg.lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"initial learning diverged at epoch {epoch} step {step}: {exc}"
                ) from exc
    return m


@dataclass
class ReplayStats:
    mean_gamma: float | None
    warnings: dict[str, int]


def replay_learning(
    m: mdl.ModelState,
    prev: mdl.FrozenSnapshot,
    new_items: list[BatchItem],
    memory_items: list[BatchItem],
    round_k: int,
    cfg: TrainConfig,
    rng: RngState,
) -> tuple[mdl.ModelState, ReplayStats]:
    """Replay phase over new data mixed with memory.

    Per step the learn side is cross-entropy plus the (decoupled)
    contrastive loss; the keep side is the round-scaled change-amount loss.
    When the keep gradient vanishes (no memory in the batch, or nothing has
    moved yet) the step falls back to the learn gradient alone and a warning
    counter is incremented: mixing a zero keep gradient through the balance
    formula would stall the step entirely.
    """
    mixed = list(new_items) + list(memory_items)
    con_fn = _contrastive_fn(cfg, decoupled_phase=True)
    full_memory = Batch(memory_items) if (cfg.ca_full_memory and memory_items) else None
    gammas: list[float] = []
    warnings = {"keep_grad_zero": 0}
    for epoch in range(cfg.epoch2):
        epoch_gamma: float | None = None
        batches = _epoch_batches(len(mixed), cfg.batch_size, rng.substream("shuffle", epoch))
        for step, idx in enumerate(batches):
            batch = Batch([mixed[i] for i in idx])
            step_rng = rng.substream("pos", epoch, step)
            try:
                learn = ce_loss(m, batch) + con_fn(
                    m,
                    batch,
                    cfg.tau,
                    step_rng,
                    cfg.normalize_projections,
                    cfg.denominator_includes_self,
                )
                if cfg.use_ca:
                    mem_part = full_memory if cfg.ca_full_memory else batch.memory_part()
                    keep = scale_keep(
                        ca_loss(m, prev, mem_part, cfg.normalize_projections),
                        round_k,
                        cfg.lam,
                    )
                else:
                    keep = zero_loss(m)

                if not keep.grad.any():
                    gamma, combined = 1.0, learn.grad
                    if cfg.use_ca:
                        warnings["keep_grad_zero"] += 1
                elif not cfg.use_balance:
                    gamma = 0.5
                    combined = 0.5 * learn.grad + 0.5 * keep.grad
                elif cfg.gamma_granularity == "epoch" and epoch_gamma is not None:
                    gamma = epoch_gamma
                    combined = gamma * learn.grad + (1.0 - gamma) * keep.grad
                else:
                    res = replay_gradient(learn, keep)
                    gamma, combined = res.gamma, res.combined
                    if cfg.gamma_granularity == "epoch":
                        epoch_gamma = gamma
                gammas.append(gamma)
                m = mdl.sgd_step(m, combined, cfg.lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"replay learning diverged at round {round_k} epoch {epoch} "
                    f"step {step}: {exc}"
                ) from exc
    mean_gamma = float(np.mean(gammas)) if gammas else None
    return m, ReplayStats(mean_gamma, warnings)


class ContinualTrainer:
    """Owns the live model, label table, memory store, and seen test sets."""

    def __init__(self, cfg: TrainConfig, rng: RngState | None = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else RngState(cfg.seed)
        self.model: mdl.ModelState | None = None
        self.store = MemoryStore()
        self.label_map: dict[str, int] = {}
        self.test_sets: list[list[Sample]] = []
        self.round = 0

    def _items(self, samples: list[Sample], origin: Origin) -> list[BatchItem]:
        return [BatchItem(s.features, self.label_map[s.label], origin) for s in samples]

    def _memory_items(self) -> list[BatchItem]:
        items = []
        for rel in self.store.relations():
            for ms in self.store.samples[rel]:
                items.append(BatchItem(ms.sample.features, rel, Origin.MEMORY))
        return items

    def run_task(self, task: TaskSpec) -> RoundReport:
        cfg = self.cfg
        collisions = [r for r in task.relations if r in self.label_map]
        if collisions:
            raise ValueError(f"relations already seen in an earlier task: {collisions}")
        if not task.train:
            raise ValueError("task has no training data")
        self.round += 1
        k = self.round
        rng = self.rng.substream("task", k)
        for r in task.relations:
            self.label_map[r] = len(self.label_map)

        if self.model is None:
            self.model = mdl.init_model(
                task.train[0].features.shape[0],
                cfg.hidden_dims,
                cfg.embed_dim,
                cfg.proj_dim,
                len(self.label_map),
                rng.substream("init"),
            )
            prev = self.model.snapshot()
        else:
            prev = self.model.snapshot()
            self.model = mdl.grow_classifier(
                self.model, len(task.relations), rng.substream("grow")
            )

        new_items = self._items(task.train, Origin.NEW)
        timings: dict[str, float] = {}

        t0 = time.perf_counter()
        if cfg.use_initial:
            self.model = initial_learning(self.model, new_items, cfg, rng.substream("initial"))
        timings["initial"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        memory_items = self._memory_items() if cfg.replay_memory else []
        self.model, stats = replay_learning(
            self.model, prev, new_items, memory_items, k, cfg, rng.substream("replay")
        )
        timings["replay"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        for r in task.relations:
            rel_data = [s for s in task.train if s.label == r]
            selected = select_memory(
                self.model,
                rel_data,
                cfg.memory_budget,
                rng.substream("memory", self.label_map[r]),
            )
            self.store.add_relation(self.label_map[r], selected)
        compute_prototypes(self.model, self.store)
        timings["memory"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        self.test_sets.append(task.test)
        report = self._evaluate(k, stats, timings)
        timings["eval"] = time.perf_counter() - t0
        return report

    def _evaluate(self, k: int, stats: ReplayStats, timings: dict) -> RoundReport:
        rule = "double_ncm" if self.cfg.use_double_ncm else "ncm"
        per_task: list[float] = []
        counts: list[int] = []
        for tests in self.test_sets:
            X = np.asarray([s.features for s in tests], dtype=np.float64)
            Z, _ = mdl.encoder_forward(self.model.encoder, X)
            preds = predict_batch(Z, self.store, rule)
            truth = np.asarray([self.label_map[s.label] for s in tests])
            per_task.append(float((preds == truth).mean()))
            counts.append(len(tests))
        total = sum(counts)
        overall = float(sum(a * c for a, c in zip(per_task, counts)) / total)
        old_total = sum(counts[:-1])
        old = (
            float(sum(a * c for a, c in zip(per_task[:-1], counts[:-1])) / old_total)
            if old_total
            else None
        )
        return RoundReport(
            round_k=k,
            overall=overall,
            per_task=per_task,
            test_counts=counts,
            old_accuracy=old,
            new_accuracy=per_task[-1],
            mean_gamma=stats.mean_gamma,
            timings=timings,
            warnings=dict(stats.warnings),
        )


def run_sequence(seq: SequenceSpec, cfg: TrainConfig) -> AccuracyMatrix:
    """Fold the per-task pipeline over one task sequence."""
    trainer = ContinualTrainer(cfg, RngState(cfg.seed).substream("sequence", seq.seed))
    return AccuracyMatrix([trainer.run_task(task) for task in seq.tasks])


def joint_baseline(seq: SequenceSpec, cfg: TrainConfig) -> AccuracyMatrix:
    """All-data-available oracle: at each round a fresh model is trained on
    every task seen so far, with prototypes from the full training data."""
    root = RngState(cfg.seed).substream("joint", seq.seed)
    rounds: list[RoundReport] = []
    for k in range(1, len(seq.tasks) + 1):
        rng = root.substream("round", k)
        tasks = seq.tasks[:k]
        label_map: dict[str, int] = {}
        for t in tasks:
            for r in t.relations:
                label_map[r] = len(label_map)
        train = [s for t in tasks for s in t.train]
        items = [BatchItem(s.features, label_map[s.label], Origin.NEW) for s in train]

        t0 = time.perf_counter()
        model = mdl.init_model(
            train[0].features.shape[0],
            cfg.hidden_dims,
            cfg.embed_dim,
            cfg.proj_dim,
            len(label_map),
            rng.substream("init"),
        )
        joint_cfg = replace(cfg, epoch1=cfg.epoch1 + cfg.epoch2)
        model = initial_learning(model, items, joint_cfg, rng.substream("train"))
        train_time = time.perf_counter() - t0

        store = MemoryStore()
        by_label: dict[int, list[Sample]] = {}
        for s in train:
            by_label.setdefault(label_map[s.label], []).append(s)
        for rel, rel_samples in by_label.items():
            w = 1.0 / len(rel_samples)
            store.add_relation(rel, [MemorySample(s, w) for s in rel_samples])
        compute_prototypes(model, store)

        rule = "double_ncm" if cfg.use_double_ncm else "ncm"
        per_task: list[float] = []
        counts: list[int] = []
        for t in tasks:
            X = np.asarray([s.features for s in t.test], dtype=np.float64)
            Z, _ = mdl.encoder_forward(model.encoder, X)
            preds = predict_batch(Z, store, rule)
            truth = np.asarray([label_map[s.label] for s in t.test])
            per_task.append(float((preds == truth).mean()))
            counts.append(len(t.test))
        total = sum(counts)
        overall = float(sum(a * c for a, c in zip(per_task, counts)) / total)
        old_total = sum(counts[:-1])
        old = (
            float(sum(a * c for a, c in zip(per_task[:-1], counts[:-1])) / old_total)
            if old_total
            else None
        )
        rounds.append(
            RoundReport(
                round_k=k,
                overall=overall,
                per_task=per_task,
                test_counts=counts,
                old_accuracy=old,
                new_accuracy=per_task[-1],
                mean_gamma=None,
                timings={"train": train_time},
                warnings={},
            )
        )
    return AccuracyMatrix(rounds)


def sequence_seed(master_seed: int, index: int) -> int:
    """Seed of the index-th task sequence of a benchmark run."""
    return stable_key(master_seed, "sequence", index)


def no_replay_config(cfg: TrainConfig) -> TrainConfig:
    """Sequential fine-tuning control: no memory in replay batches, no
    change-amount loss; memory selection still runs so prediction works."""
    return replace(cfg, replay_memory=False, use_ca=False)


def run_benchmark(
    samples: list[Sample],
    cfg: TrainConfig,
    num_sequences: int = 5,
    num_tasks: int = 10,
    train_fraction: float = 0.65,
    mode: str = "dpcre",
) -> list[AccuracyMatrix]:
    """Run ``num_sequences`` seeded task sequences over one dataset.

    ``mode`` selects the system under test: dpcre, joint (oracle baseline),
    or no-replay (sequential fine-tuning control).
    """
    if mode == "no-replay":
        cfg = no_replay_config(cfg)
    matrices = []
    for i in range(num_sequences):
        seq = split_sequence(samples, num_tasks, train_fraction, sequence_seed(cfg.seed, i))
        runner = joint_baseline if mode == "joint" else run_sequence
        matrices.append(runner(seq, cfg))
    return matrices


def mean_per_task(matrices: list[AccuracyMatrix]) -> list[list[float]]:
    """Across sequences, mean accuracy per (round, task slot)."""
    num_rounds = len(matrices[0].rounds)
    rows = []
    for r in range(num_rounds):
        cells = []
        for t in range(r + 1):
            cells.append(float(np.mean([m.rounds[r].per_task[t] for m in matrices])))
        rows.append(cells)
    return rows


def mean_overall(matrices: list[AccuracyMatrix], round_index: int = -1) -> float:
    return float(np.mean([m.rounds[round_index].overall for m in matrices]))
