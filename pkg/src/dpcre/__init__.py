"""Decoupled contrastive replay engine for class-incremental learning.

A small continual-learning system over fixed-dimension feature vectors:
a pluggable MLP encoder with classification and contrastive heads, replay
training that decouples new-knowledge acquisition from prior-information
preservation, closed-form two-task gradient balancing, weighted-prototype
memory, and nearest-class-mean prediction, plus a reproducible experiment
harness.
"""

from .balance import BalanceResult, compute_gamma, replay_gradient, scale_keep
from .data import (
    Sample,
    SequenceSpec,
    TaskSpec,
    generate_synthetic,
    load_dataset,
    split_sequence,
    write_dataset,
)
from .losses import Batch, BatchItem, LossValue, Origin, ca_loss, ce_loss, dpcon_loss, supcon_loss
from .mathcore import RngState, finite_difference_gradient, linear_apply, seeded_gaussian, softmax_logloss
from .memory import (
    ClusterAssignment,
    MemorySample,
    MemoryStore,
    compute_prototypes,
    double_ncm_predict,
    dump_memory,
    kmeans,
    ncm_predict,
    select_memory,
)
from .model import (
    ClassifierHead,
    ContrastiveHead,
    EncoderParams,
    FrozenSnapshot,
    ModelState,
    classify,
    encode,
    flatten,
    grow_classifier,
    init_model,
    load_checkpoint,
    project,
    save_checkpoint,
    sgd_step,
    unflatten,
)
from .trainer import (
    AccuracyMatrix,
    ContinualTrainer,
    RoundReport,
    TrainConfig,
    TrainingDiverged,
    initial_learning,
    joint_baseline,
    no_replay_config,
    replay_learning,
    run_benchmark,
    run_sequence,
)

__version__ = "0.1.0"
