"""Batch front door: generate benchmarks, run sequences, sweep memory
sizes, and run the verification suite, writing machine-readable outputs.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
divergence, 4 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .data import Sample, generate_synthetic, load_dataset, split_sequence, write_dataset
from .trainer import (
    AccuracyMatrix,
    TrainConfig,
    TrainingDiverged,
    joint_baseline,
    mean_per_task,
    no_replay_config,
    run_sequence,
    sequence_seed,
)
from .verify import run_gamma_check, run_gradcheck

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4

ABLATIONS = {
    "IN": "use_initial",
    "DP": "use_decoupled",
    "CA": "use_ca",
    "BA": "use_balance",
    "D-NCM": "use_double_ncm",
}

GENERATOR_KEYS = (
    "num_relations",
    "samples_per_relation",
    "feature_dim",
    "class_separation",
    "noise_sigma",
    "seed",
)


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _apply_overrides(doc: dict, sets: list[str]) -> dict:
    """Apply --set dotted.path=value overrides; values parse as JSON with a
    bare-string fallback."""
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects path=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {dotted!r} crosses a non-object value")
        node[parts[-1]] = value
    return doc


def _generator_params(block: dict) -> dict:
    missing = [k for k in GENERATOR_KEYS if k not in block]
    if missing:
        raise ConfigError(f"generator config missing required key: {missing[0]}")
    params = {k: block[k] for k in GENERATOR_KEYS}
    if "samples_range" in block and block["samples_range"] is not None:
        params["samples_range"] = tuple(block["samples_range"])
    return params


def _resolve_dataset(doc: dict, out_dir: Path) -> tuple[list[Sample], dict]:
    """Load or generate samples; returns (samples, manifest dataset block)."""
    data_block = doc.get("data", {})
    if "path" in data_block:
        path = Path(data_block["path"])
        samples, labels = load_dataset(path)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        source = str(path)
    elif "generator" in data_block:
        samples = generate_synthetic(**_generator_params(data_block["generator"]))
        labels = {s.label: None for s in samples}
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "dataset.jsonl"
        write_dataset(path, samples)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        source = f"generated -> {path}"
    else:
        raise ConfigError("config needs data.path or data.generator")
    return samples, {
        "source": source,
        "sha256": digest,
        "num_samples": len(samples),
        "num_relations": len(labels),
        "feature_dim": int(samples[0].features.shape[0]),
    }


def _run_one(payload) -> AccuracyMatrix:
    samples, cfg, num_tasks, train_fraction, seq_seed, mode = payload
    seq = split_sequence(samples, num_tasks, train_fraction, seq_seed)
    if mode == "joint":
        return joint_baseline(seq, cfg)
    return run_sequence(seq, cfg)


def _run_sequences(samples, cfg, seq_block, mode, workers) -> list[AccuracyMatrix]:
    num_tasks = seq_block.get("num_tasks", 10)
    train_fraction = seq_block.get("train_fraction", 0.65)
    count = seq_block.get("sequences", 5)
    payloads = [
        (samples, cfg, num_tasks, train_fraction, sequence_seed(cfg.seed, i), mode)
        for i in range(count)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, payloads))
    return [_run_one(p) for p in payloads]


def _write_rounds_jsonl(path: Path, matrix: AccuracyMatrix) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for report in matrix.rounds:
            fh.write(json.dumps(report.to_dict()) + "\n")


def _write_accuracy_csv(path: Path, matrices: list[AccuracyMatrix]) -> None:
    import numpy as np

    rows = mean_per_task(matrices)
    num_rounds = len(rows)
    lines = ["round," + ",".join(f"T_{i + 1}" for i in range(num_rounds)) + ",mean"]
    for r, cells in enumerate(rows):
        overall = float(np.mean([m.rounds[r].overall for m in matrices]))
        padded = [f"{c:.6f}" for c in cells] + [""] * (num_rounds - len(cells))
        lines.append(f"{r + 1}," + ",".join(padded) + f",{overall:.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _train_config(doc: dict, args) -> TrainConfig:
    train_block = dict(doc.get("train", {}))
    if args.seed is not None:
        train_block["seed"] = args.seed
    try:
        return TrainConfig.from_dict(train_block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def cmd_gen_data(args) -> int:
    doc = _apply_overrides(_load_config(args.config), args.set)
    block = doc.get("data", {}).get("generator", doc.get("generator", doc))
    samples = generate_synthetic(**_generator_params(block))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, samples)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    doc = _apply_overrides(_load_config(args.config), args.set)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(doc, args)
    seq_block = dict(doc.get("sequence", {}))
    if args.sequences is not None:
        seq_block["sequences"] = args.sequences
    workers = int(doc.get("workers", 1))
    samples, dataset_info = _resolve_dataset(doc, out_dir)

    mode = args.baseline
    run_plan: list[tuple[str, TrainConfig, str]] = []
    if args.ablate:
        for name in args.ablate.split(","):
            name = name.strip()
            if name not in ABLATIONS:
                raise ConfigError(
                    f"unknown ablation {name!r}; known: {', '.join(ABLATIONS)}"
                )
            run_plan.append((f"-wo-{name}", replace(cfg, **{ABLATIONS[name]: False}), mode))
    else:
        suffix = "" if mode == "none" else f"-{mode}"
        run_plan.append((suffix, cfg, mode))

    count = seq_block.get("sequences", 5)
    manifest = {
        "command": "run",
        "package_version": __version__,
        "config": {
            "data": doc.get("data", {}),
            "sequence": seq_block,
            "train": cfg.to_dict(),
            "workers": workers,
        },
        "baseline": mode,
        "ablations": [s for s, _, _ in run_plan if s.startswith("-wo-")],
        "dataset": dataset_info,
        "sequence_seeds": [sequence_seed(cfg.seed, i) for i in range(count)],
        "outputs": {
            "accuracy_csv": [f"accuracy{s}.csv" for s, _, _ in run_plan],
            "rounds_jsonl": [
                f"rounds{s}-{i}.jsonl" for s, _, _ in run_plan for i in range(count)
            ],
        },
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    for suffix, run_cfg, run_mode in run_plan:
        if run_mode == "no-replay":
            run_cfg = no_replay_config(run_cfg)
        try:
            matrices = _run_sequences(
                samples, run_cfg, seq_block, "joint" if run_mode == "joint" else "dpcre", workers
            )
        except TrainingDiverged as exc:
            (out_dir / f"FAILED{suffix}").write_text(str(exc) + "\n", encoding="utf-8")
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        for i, matrix in enumerate(matrices):
            _write_rounds_jsonl(out_dir / f"rounds{suffix}-{i}.jsonl", matrix)
        _write_accuracy_csv(out_dir / f"accuracy{suffix}.csv", matrices)
        final = sum(m.final_accuracy() for m in matrices) / len(matrices)
        print(f"run{suffix or ' (base)'}: final mean accuracy {final:.4f}")
    return EXIT_OK


def cmd_sweep_memory(args) -> int:
    doc = _apply_overrides(_load_config(args.config), args.set)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(doc, args)
    seq_block = dict(doc.get("sequence", {}))
    if args.sequences is not None:
        seq_block["sequences"] = args.sequences
    workers = int(doc.get("workers", 1))
    samples, _ = _resolve_dataset(doc, out_dir)

    sizes = [int(s) for s in args.sizes.split(",")]
    if any(s < 1 for s in sizes):
        raise ConfigError(f"memory sizes must be positive: {sizes}")
    lines = []
    means = []
    count = seq_block.get("sequences", 5)
    for size in sizes:
        run_cfg = replace(cfg, memory_budget=size)
        try:
            matrices = _run_sequences(samples, run_cfg, seq_block, "dpcre", workers)
        except TrainingDiverged as exc:
            (out_dir / "FAILED").write_text(str(exc) + "\n", encoding="utf-8")
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        finals = [m.final_accuracy() for m in matrices]
        mean = sum(finals) / len(finals)
        means.append(mean)
        lines.append(f"{size}," + ",".join(f"{a:.6f}" for a in finals) + f",{mean:.6f}")
        print(f"budget {size}: final mean accuracy {mean:.4f}")
    header = "budget," + ",".join(f"seq_{i}" for i in range(count)) + ",mean"
    (out_dir / "sweep.csv").write_text(header + "\n" + "\n".join(lines) + "\n", "utf-8")
    for a, b in zip(means, means[1:]):
        if b < a:
            print(f"note: mean accuracy decreased between budgets ({a:.4f} -> {b:.4f})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    grad = run_gradcheck(seed=args.seed)
    for name, err in sorted(grad.max_rel_err.items()):
        status = "ok" if err < grad.threshold else "FAIL"
        print(f"gradcheck {name}: max relative error {err:.3e} [{status}]")
    gamma = run_gamma_check(seed=args.seed)
    print(
        f"gamma grid: max |dgamma| {gamma.max_delta_gamma:.3e} over {gamma.pairs} pairs, "
        f"min-norm violations {gamma.min_norm_violations}, "
        f"descent violations {gamma.descent_violations} "
        f"[{'ok' if gamma.passed else 'FAIL'}]"
    )
    if not grad.passed:
        print(f"verification failed for: {', '.join(grad.failures())}", file=sys.stderr)
        return EXIT_VERIFY
    if not gamma.passed:
        print("verification failed for: gamma balance", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpcre", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    gen.set_defaults(func=cmd_gen_data)

    run = sub.add_parser("run", help="run seeded task sequences")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default="out-run")
    run.add_argument("--seed", type=int)
    run.add_argument("--sequences", type=int)
    run.add_argument("--ablate", metavar="NAME[,NAME...]")
    run.add_argument("--baseline", choices=["none", "joint", "no-replay"], default="none")
    run.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep-memory", help="rerun with several memory budgets")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--out", default="out-sweep")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--sequences", type=int)
    sweep.add_argument("--sizes", default="5,10,15")
    sweep.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    sweep.set_defaults(func=cmd_sweep_memory)

    check = sub.add_parser("gradcheck", help="finite-difference and balance verification")
    check.add_argument("--seed", type=int, default=2024)
    check.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
