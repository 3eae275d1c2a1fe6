"""Shared fixtures: the standard synthetic benchmark and its heavyweight
runs, computed once per session and reused across test modules."""

from __future__ import annotations

import pytest

from dpcre import TrainConfig, generate_synthetic, joint_baseline, run_sequence, split_sequence
from dpcre.trainer import no_replay_config, sequence_seed

# The standard benchmark: 40 relations over 16-dim features, 10 tasks,
# 5 seeded sequences, with separation/noise and training knobs calibrated
# so the task sequence is learnable but forgettable.
BENCH_GENERATOR = dict(
    num_relations=40,
    samples_per_relation=32,
    feature_dim=16,
    class_separation=1.0,
    noise_sigma=0.22,
    seed=11,
)
BENCH_TRAIN = dict(seed=5, lr=0.3, epoch1=15, epoch2=15, tau=0.2, lam=1.0)
NUM_TASKS = 10
TRAIN_FRACTION = 0.625
NUM_SEQUENCES = 5


def run_bench(samples, cfg, joint=False, n=NUM_SEQUENCES):
    matrices = []
    for i in range(n):
        seq = split_sequence(samples, NUM_TASKS, TRAIN_FRACTION, sequence_seed(cfg.seed, i))
        matrices.append((joint_baseline if joint else run_sequence)(seq, cfg))
    return matrices


@pytest.fixture(scope="session")
def bench_samples():
    return generate_synthetic(**BENCH_GENERATOR)


@pytest.fixture(scope="session")
def bench_cfg():
    return TrainConfig(**BENCH_TRAIN)


@pytest.fixture(scope="session")
def bench_full(bench_samples, bench_cfg):
    return run_bench(bench_samples, bench_cfg)


@pytest.fixture(scope="session")
def bench_norep(bench_samples, bench_cfg):
    return run_bench(bench_samples, no_replay_config(bench_cfg))


@pytest.fixture(scope="session")
def bench_joint(bench_samples, bench_cfg):
    return run_bench(bench_samples, bench_cfg, joint=True)
