"""Command-line entry point: data generation, training, evaluation, ablation.

Commands: ``gen-data``, ``pretrain``, ``finetune``, ``eval``, ``ablate``.
Configuration comes from flat ``key = value`` files with an explicit
``schema_version``; command-line flags override file keys. Every training
command writes a JSON run manifest (command, resolved config, seed, input
hashes) before the first step, sufficient to replay the run.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .data import (
    bone_view,
    generate_synthetic,
    load_dataset,
    motion_view,
    save_dataset,
    spec_from_file,
)
from .downstream import MotionTask, fuse_scores, top1_accuracy, write_report
from .encoder import ModelConfig
from .trainer import (
    CheckpointError,
    IncompatibleCheckpointError,
    TrainConfig,
    config_hash,
    evaluate_checkpoint,
    finetune,
    finetuned_checkpoint,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

CONFIG_SCHEMA_VERSION = 1

MODEL_KEYS = (
    "layers_per_level",
    "heads",
    "d_k",
    "dim_f",
    "dim_c",
    "dim_v",
    "window",
    "stride",
    "max_frames",
    "max_joints",
    "max_clips",
    "ffn_expansion",
)
TRAIN_KEYS = (
    "lr",
    "batch_size",
    "steps",
    "seed",
    "label_fraction",
    "levels",
    "temperature",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "cell_type",
    "stratified",
    "stop_gradient_targets",
    "normalize_similarity",
)
DATA_KEYS = (
    "dataset",
    "eval_dataset",
    "resample_to",
    "observe_frames",
    "predict_frames",
    "task",
    "stream",
    "checkpoint_every",
    "finetune_lr",
    "finetune_steps",
    "ablate_levels",
)
ALL_KEYS = ("schema_version",) + MODEL_KEYS + TRAIN_KEYS + DATA_KEYS

STREAM_VIEWS = {"joint": lambda s: s, "bone": bone_view, "motion": motion_view}


class ConfigError(ValueError):
    """Bad configuration file, flag value, or command usage."""


def parse_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in ALL_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    version = out.get("schema_version")
    if version != str(CONFIG_SCHEMA_VERSION):
        raise ConfigError(
            f"{path}: schema_version must be {CONFIG_SCHEMA_VERSION}, got {version!r}"
        )
    return out


def _coerce(key: str, value: str):
    bools = {"true": True, "false": False}
    try:
        if key in ("lr", "label_fraction", "temperature", "weight_decay", "beta1",
                   "beta2", "eps", "finetune_lr"):
            return float(value)
        if key in ("batch_size", "steps", "seed", "resample_to", "observe_frames",
                   "predict_frames", "checkpoint_every", "finetune_steps") + MODEL_KEYS:
            return int(value)
        if key in ("stratified", "stop_gradient_targets", "normalize_similarity"):
            return bools[value.lower()]
        return value
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"config key {key!r}: bad value {value!r}") from exc


def parse_levels(text: str) -> tuple[str, ...]:
    """Parse a level combination like ``F+C+V`` (``-`` means none)."""
    text = text.strip()
    if text in ("-", ""):
        return ()
    parts = [p for chunk in text.split(",") for p in chunk.split("+")]
    levels = tuple(p.strip().upper() for p in parts if p.strip())
    for level in levels:
        if level not in ("F", "C", "V"):
            raise ConfigError(f"unknown pretext level {level!r} in {text!r}")
    if len(set(levels)) != len(levels):
        raise ConfigError(f"duplicate level in {text!r}")
    return levels


def resolve(config_file: str | None, overrides: dict) -> dict:
    """Merge file keys and flag overrides into one typed config dict."""
    raw = parse_config_file(config_file) if config_file else {}
    merged = {k: _coerce(k, v) for k, v in raw.items() if k != "schema_version"}
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def model_config_from(cfg: dict) -> ModelConfig:
    kwargs = {k: cfg[k] for k in MODEL_KEYS if k in cfg}
    if "d_k" in kwargs:
        kwargs["d_k"] = int(kwargs["d_k"])
    return ModelConfig(**kwargs)


def train_config_from(cfg: dict, default_lr: float) -> TrainConfig:
    levels = cfg.get("levels", "F+C+V")
    if isinstance(levels, str):
        levels = parse_levels(levels)
    kwargs = {
        "lr": cfg.get("lr", default_lr),
        "batch_size": cfg.get("batch_size", 8),
        "steps": cfg.get("steps", 500),
        "seed": cfg.get("seed", 0),
        "label_fraction": cfg.get("label_fraction", 1.0),
        "pretext_levels": levels,
        "temperature": cfg.get("temperature", 0.07),
        "weight_decay": cfg.get("weight_decay", 1e-4),
    }
    for key in ("beta1", "beta2", "eps", "cell_type", "stratified",
                "stop_gradient_targets", "normalize_similarity"):
        if key in cfg:
            kwargs[key] = cfg[key]
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, config_file, resolved: dict,
                   seed: int, artifacts: dict[str, str]) -> None:
    manifest = {
        "manifest_version": 1,
        "command": command,
        "config_file": None if config_file is None else str(config_file),
        "resolved_config": {k: resolved[k] for k in sorted(resolved)},
        "seed": seed,
        "out_dir": str(out_dir),
        "artifact_hashes": artifacts,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_sequences(cfg: dict, key: str, stream: str):
    path = cfg.get(key)
    if path is None:
        raise ConfigError(f"config is missing required key {key!r}")
    if not Path(path).exists():
        raise ConfigError(f"{key} file not found: {path}")
    seqs = load_dataset(path, resample_to=cfg.get("resample_to"))
    view = STREAM_VIEWS[stream]
    return [view(s) for s in seqs], path


def _resolved_for_manifest(cfg: dict, extra: dict) -> dict:
    out = dict(cfg)
    out.update(extra)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in out.items()}


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigError(f"spec file not found: {spec_path}")
    spec = spec_from_file(spec_path)
    sequences = generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(sequences, out)
    print(f"wrote {len(sequences)} sequences to {out} (sha256 {file_sha256(out)[:16]})")
    return 0


def cmd_pretrain(args) -> int:
    overrides = {"seed": args.seed, "levels": args.levels}
    cfg = resolve(args.config, overrides)
    stream = cfg.get("stream", args.stream or "joint")
    sequences, data_path = _load_sequences(cfg, "dataset", stream)
    model_cfg = model_config_from(cfg)
    train_cfg = train_config_from(cfg, default_lr=1e-3)
    if not train_cfg.pretext_levels:
        raise ConfigError("pretraining needs a nonempty level combination")

    out_dir = Path(args.out or "runs/pretrain")
    artifacts = {"dataset": file_sha256(data_path)}
    resume = None
    if args.resume:
        if not Path(args.resume).exists():
            raise ConfigError(f"resume checkpoint not found: {args.resume}")
        resume = load_checkpoint(args.resume)
        artifacts["resume_checkpoint"] = file_sha256(args.resume)
    write_manifest(
        out_dir, "pretrain", args.config,
        _resolved_for_manifest(cfg, {"levels": train_cfg.pretext_levels, "stream": stream}),
        train_cfg.seed, artifacts,
    )

    log_path = out_dir / "train.log"
    log_fh = open(log_path, "a" if resume else "w", encoding="utf-8")
    started = time.monotonic()

    def on_step(step, parts):
        line = (
            f"step={step} total={parts['total']:.6f} spatial={parts['spatial']:.6f} "
            f"clip_order={parts['clip_order']:.6f} video_order={parts['video_order']:.6f} "
            f"future_clip={parts['future_clip']:.6f} wall={time.monotonic() - started:.2f}"
        )
        log_fh.write(line + "\n")
        log_fh.flush()

    try:
        ckpt, history = pretrain(
            sequences, model_cfg, train_cfg, resume_from=resume, on_step=on_step,
            checkpoint_dir=out_dir, checkpoint_every=cfg.get("checkpoint_every"),
        )
    finally:
        log_fh.close()
    save_checkpoint(ckpt, out_dir / "checkpoint.ckpt")
    print(f"pretrained {ckpt.step} steps; final loss {history[-1]['total']:.6f}" if history
          else f"no steps run (already at {ckpt.step})")
    print(f"checkpoint: {out_dir / 'checkpoint.ckpt'}")
    return 0


def _write_scores(path, probs: np.ndarray, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# index label probabilities...\n")
        for i, (row, label) in enumerate(zip(probs, labels)):
            values = " ".join(repr(float(v)) for v in row)
            fh.write(f"{i} {label} {values}\n")


def read_scores(path):
    labels, rows = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            labels.append(int(parts[1]))
            rows.append([float(v) for v in parts[2:]])
    return np.array(labels), np.array(rows)


def cmd_finetune(args) -> int:
    overrides = {
        "seed": args.seed,
        "task": args.task,
        "label_fraction": args.label_fraction,
    }
    cfg = resolve(args.config, overrides)
    task = cfg.get("task")
    if task not in ("recognition", "detection", "motion"):
        raise ConfigError(f"task must be recognition, detection, or motion; got {task!r}")
    if args.from_checkpoint and args.random_init:
        raise ConfigError("--from-checkpoint and --random-init are mutually exclusive")
    if not args.from_checkpoint and not args.random_init:
        raise ConfigError("choose an encoder start: --from-checkpoint PATH or --random-init")

    stream = cfg.get("stream", args.stream or "joint")
    train_seqs, train_path = _load_sequences(cfg, "dataset", stream)
    eval_seqs, eval_path = _load_sequences(cfg, "eval_dataset", stream)
    model_cfg = model_config_from(cfg)
    train_cfg = train_config_from(cfg, default_lr=3e-4)

    checkpoint = None
    artifacts = {"dataset": file_sha256(train_path), "eval_dataset": file_sha256(eval_path)}
    if args.from_checkpoint:
        if not Path(args.from_checkpoint).exists():
            raise ConfigError(f"checkpoint not found: {args.from_checkpoint}")
        checkpoint = load_checkpoint(args.from_checkpoint)
        artifacts["checkpoint"] = file_sha256(args.from_checkpoint)

    motion_task = None
    if "observe_frames" in cfg or "predict_frames" in cfg:
        if not ("observe_frames" in cfg and "predict_frames" in cfg):
            raise ConfigError("observe_frames and predict_frames must be set together")
        motion_task = MotionTask(cfg["observe_frames"], cfg["predict_frames"])

    out_dir = Path(args.out or f"runs/finetune-{task}")
    write_manifest(
        out_dir, "finetune", args.config,
        _resolved_for_manifest(cfg, {"task": task, "stream": stream,
                                     "random_init": bool(args.random_init)}),
        train_cfg.seed, artifacts,
    )

    models, metrics, probs = finetune(
        task, train_seqs, eval_seqs, model_cfg, train_cfg,
        checkpoint=checkpoint, motion_task=motion_task,
    )
    chash = config_hash(model_cfg, train_cfg)
    write_report(out_dir / "metrics.report", task, metrics, chash, train_cfg.seed)
    save_checkpoint(finetuned_checkpoint(task, models, model_cfg, train_cfg),
                    out_dir / "model.ckpt")
    if probs is not None:
        _write_scores(out_dir / "scores.txt", probs, [s.label for s in eval_seqs])
    for name in sorted(metrics):
        print(f"{task}.{name} = {metrics[name]}")
    return 0


def cmd_eval(args) -> int:
    out_dir = Path(args.out or "runs/eval")
    if args.fuse:
        labels = None
        streams = []
        for path in args.fuse:
            if not Path(path).exists():
                raise ConfigError(f"scores file not found: {path}")
            file_labels, rows = read_scores(path)
            if labels is not None and not np.array_equal(labels, file_labels):
                raise ConfigError("fused score files cover different samples")
            labels = file_labels
            streams.append(rows)
        fused = fuse_scores(streams)
        metrics = {"accuracy": top1_accuracy(fused, labels), "streams": float(len(streams))}
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report(out_dir / "metrics.report", "recognition-fused", metrics, "-", 0)
        print(f"fused accuracy = {metrics['accuracy']}")
        return 0

    if not args.checkpoint or not args.dataset:
        raise ConfigError("eval needs --checkpoint and --dataset (or --fuse scores files)")
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    if not Path(args.dataset).exists():
        raise ConfigError(f"dataset not found: {args.dataset}")
    ckpt = load_checkpoint(args.checkpoint)
    if args.task and ckpt.task != args.task:
        raise IncompatibleCheckpointError(
            f"checkpoint was fine-tuned for {ckpt.task!r}, not {args.task!r}"
        )
    cfg = resolve(args.config, {}) if args.config else {}
    stream = cfg.get("stream", args.stream or "joint")
    view = STREAM_VIEWS[stream]
    sequences = [view(s) for s in load_dataset(args.dataset, resample_to=cfg.get("resample_to"))]
    metrics, probs = evaluate_checkpoint(ckpt, sequences)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(out_dir / "metrics.report", ckpt.task, metrics, ckpt.train_config_hash,
                 0 if args.seed is None else args.seed)
    if probs is not None:
        _write_scores(out_dir / "scores.txt", probs, [s.label for s in sequences])
    for name in sorted(metrics):
        print(f"{ckpt.task}.{name} = {metrics[name]}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve(args.config, {"seed": args.seed})
    task = cfg.get("task", "recognition")
    subsets_text = cfg.get("ablate_levels", "-,F,C,V,F+C,F+V,C+V,F+C+V")
    subsets = [chunk.strip() for chunk in subsets_text.split(",") if chunk.strip()]
    stream = cfg.get("stream", args.stream or "joint")
    train_seqs, train_path = _load_sequences(cfg, "dataset", stream)
    eval_seqs, eval_path = _load_sequences(cfg, "eval_dataset", stream)
    model_cfg = model_config_from(cfg)

    out_dir = Path(args.out or "runs/ablate")
    write_manifest(
        out_dir, "ablate", args.config,
        _resolved_for_manifest(cfg, {"task": task, "subsets": subsets, "stream": stream}),
        cfg.get("seed", 0), {"dataset": file_sha256(train_path), "eval_dataset": file_sha256(eval_path)},
    )

    motion_task = None
    if "observe_frames" in cfg and "predict_frames" in cfg:
        motion_task = MotionTask(cfg["observe_frames"], cfg["predict_frames"])

    results: dict[str, dict] = {}
    for subset_text in subsets:
        levels = parse_levels("" if subset_text == "-" else subset_text)
        checkpoint = None
        if levels:
            pre_cfg = train_config_from({**cfg, "levels": levels}, default_lr=1e-3)
            checkpoint, _ = pretrain(train_seqs, model_cfg, pre_cfg)
        fine_cfg = train_config_from(
            {
                **cfg,
                "lr": cfg.get("finetune_lr", 3e-4),
                "steps": cfg.get("finetune_steps", cfg.get("steps", 500)),
                "levels": ("F", "C", "V"),
            },
            default_lr=3e-4,
        )
        _, metrics, _ = finetune(
            task, train_seqs, eval_seqs, model_cfg, fine_cfg,
            checkpoint=checkpoint, motion_task=motion_task,
        )
        results[subset_text] = metrics

    metric_names = sorted({name for m in results.values() for name in m})
    lines = ["levels\t" + "\t".join(metric_names)]
    for subset_text in subsets:
        row = [subset_text] + [f"{results[subset_text].get(n, float('nan')):.6f}" for n in metric_names]
        lines.append("\t".join(row))
    table = "\n".join(lines)
    (out_dir / "ablation.table").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelform",
        description="Hierarchical skeleton-sequence transformer: train and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset from a spec file")
    p.add_argument("--spec", required=True, help="JSON SyntheticSpec file")
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(func=cmd_gen_data)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--stream", choices=("joint", "bone", "motion"),
                       help="input view of the skeleton sequences")

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    common(p)
    p.add_argument("--levels", help="pretext level combination, e.g. F+C+V")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune for a downstream task")
    common(p)
    p.add_argument("--task", choices=("recognition", "detection", "motion"))
    p.add_argument("--label-fraction", type=float, dest="label_fraction")
    p.add_argument("--from-checkpoint", dest="from_checkpoint")
    p.add_argument("--random-init", action="store_true", dest="random_init")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--task", choices=("recognition", "detection", "motion"))
    p.add_argument("--fuse", nargs="+", help="fuse per-stream score files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="pretrain+finetune per level combination")
    common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, IncompatibleCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
