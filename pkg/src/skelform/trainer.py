"""Optimization loop, semi-supervised sampling, and checkpointed lifecycle.

Every run is driven by one seed fanned out into named RNG sub-streams
(data, init, sampling, corruption), and checkpoints capture parameters,
optimizer moments, and the sub-stream states, so any (config, seed) pair
reproduces losses bit-exactly and a resumed run matches an uninterrupted
one step for step.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import tensor as T
from .data import SkeletonSequence, coordinate_bounds
from .downstream import (
    MotionDecoder,
    MotionTask,
    cross_entropy,
    detect_frames,
    euclidean_pose_loss,
    frames_to_segments,
    mean_average_precision,
    mpjpe,
    softmax_probs,
    top1_accuracy,
)
from .encoder import HierarchicalEncoder, Linear, ModelConfig
from .pretext import PretextHeads, total_pretrain_loss

CHECKPOINT_MAGIC = b"SKCKPT"
CHECKPOINT_VERSION = 1
STREAM_NAMES = ("data", "init", "sampling", "corruption")

FINETUNE_TASKS = ("recognition", "detection", "motion")


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated, or has the wrong version."""


class IncompatibleCheckpointError(ValueError):
    """Checkpoint was produced under a different model configuration."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters shared by pre-training and fine-tuning."""

    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 500
    seed: int = 0
    label_fraction: float = 1.0
    pretext_levels: tuple[str, ...] = ("F", "C", "V")
    temperature: float = 0.07
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cell_type: str = "gru"
    clip_norm: float = 1.0  # 0 disables gradient clipping
    stratified: bool = True
    stop_gradient_targets: bool = True
    normalize_similarity: bool = True

    def __post_init__(self):
        object.__setattr__(self, "pretext_levels", tuple(self.pretext_levels))
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.cell_type not in ("gru", "lstm"):
            raise ValueError(f"cell_type must be 'gru' or 'lstm', got {self.cell_type!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if "pretext_levels" in raw:
            raw["pretext_levels"] = tuple(raw["pretext_levels"])
        return TrainConfig(**raw)


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    blob = json.dumps(
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, sort_keys=True
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators fanned out from one run seed."""
    return {
        name: np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        for i, name in enumerate(STREAM_NAMES)
    }


def stream_states(streams: dict[str, np.random.Generator]) -> dict:
    return {name: gen.bit_generator.state for name, gen in streams.items()}


def restore_streams(states: dict) -> dict[str, np.random.Generator]:
    streams = {}
    for name, state in states.items():
        gen = np.random.default_rng()
        gen.bit_generator.state = state
        streams[name] = gen
    return streams


# -- optimizer ---------------------------------------------------------------------


def adam_step(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected adaptive-moment update; returns (value, m, v).

    Pure: inputs are not modified. ``t`` is the 1-based step index.
    """
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """In-place adaptive-moment optimizer over named parameters.

    Weight decay is classic L2: ``wd * value`` is added to the gradient
    before the moment updates (the pure ``adam_step`` stays decay-free).
    Gradients are rescaled to ``clip_norm`` global norm when they exceed it;
    embedding-layer gradients otherwise spike enough to destabilize training.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0,
                 clip_norm: float | None = 1.0):
        self.params = T.check_unique_names(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def _clip_scale(self) -> float:
        if self.clip_norm is None:
            return 1.0
        total = 0.0
        for p in self.params:
            if p.tensor.grad is not None:
                total += float((p.tensor.grad * p.tensor.grad).sum())
        norm = np.sqrt(total)
        return 1.0 if norm <= self.clip_norm else self.clip_norm / norm

    def step(self):
        self.step_count += 1
        t = self.step_count
        correct1 = 1.0 - self.beta1**t
        correct2 = 1.0 - self.beta2**t
        scale = self._clip_scale()
        for p in self.params:
            if p.tensor.grad is None:
                # Untouched by the objective this step (e.g. a deactivated
                # pretext level): leave the parameter and its moments alone.
                continue
            grad = p.tensor.grad if scale == 1.0 else p.tensor.grad * scale
            if self.weight_decay:
                grad = grad + self.weight_decay * p.data
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            p.tensor.data -= self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None

    def state_dict(self) -> dict:
        return {"step_count": self.step_count, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"])
        for name in self.m:
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]


# -- checkpoints --------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to resume training or run evaluation."""

    model_config: ModelConfig
    params: dict[str, np.ndarray]
    step: int
    task: str | None = None
    opt_state: dict | None = None  # {"step_count", "m": {...}, "v": {...}}
    rng_states: dict | None = None
    train_config_hash: str = ""
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Versioned binary container: header JSON plus raw float64 blobs."""
    blobs: list[tuple[str, np.ndarray]] = [(f"param.{k}", v) for k, v in ckpt.params.items()]
    opt_meta = None
    if ckpt.opt_state is not None:
        opt_meta = {"step_count": int(ckpt.opt_state["step_count"])}
        for kind in ("m", "v"):
            for k, v in ckpt.opt_state[kind].items():
                blobs.append((f"opt.{kind}.{k}", v))
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "step": ckpt.step,
        "task": ckpt.task,
        "train_config_hash": ckpt.train_config_hash,
        "rng_states": ckpt.rng_states,
        "opt": opt_meta,
        "extra": ckpt.extra,
        "blobs": [{"name": name, "shape": list(arr.shape)} for name, arr in blobs],
    }
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        for _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint; never returns partial state."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<IQ", raw, offset)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    offset += 12
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    offset += header_len
    expected = sum(
        int(np.prod(spec["shape"])) if spec["shape"] else 1 for spec in header["blobs"]
    )
    if len(raw) - offset != expected * 8:
        raise CheckpointError(
            f"{path}: blob section has {len(raw) - offset} bytes, expected {expected * 8}"
        )
    arrays: dict[str, np.ndarray] = {}
    for spec in header["blobs"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[spec["name"]] = arr.copy()
        offset += count * 8
    params = {k[len("param.") :]: v for k, v in arrays.items() if k.startswith("param.")}
    opt_state = None
    if header.get("opt") is not None:
        opt_state = {
            "step_count": header["opt"]["step_count"],
            "m": {k[len("opt.m.") :]: v for k, v in arrays.items() if k.startswith("opt.m.")},
            "v": {k[len("opt.v.") :]: v for k, v in arrays.items() if k.startswith("opt.v.")},
        }
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        params=params,
        step=int(header["step"]),
        task=header.get("task"),
        opt_state=opt_state,
        rng_states=header.get("rng_states"),
        train_config_hash=header.get("train_config_hash", ""),
        extra=header.get("extra", {}),
    )


def _load_params_into(params: list[T.Parameter], stored: dict[str, np.ndarray], prefixes=None):
    for p in params:
        if prefixes is not None and not any(p.name.startswith(pre) for pre in prefixes):
            continue
        if p.name not in stored:
            raise IncompatibleCheckpointError(f"checkpoint is missing parameter {p.name}")
        if stored[p.name].shape != p.data.shape:
            raise IncompatibleCheckpointError(
                f"parameter {p.name}: checkpoint shape {stored[p.name].shape} "
                f"!= model shape {p.data.shape}"
            )
        p.data[...] = stored[p.name]


def check_config_compatible(ckpt: Checkpoint, model_cfg: ModelConfig) -> None:
    """Field-by-field comparison naming the first mismatch."""
    theirs = ckpt.model_config.to_dict()
    ours = model_cfg.to_dict()
    for key in ours:
        if theirs.get(key) != ours[key]:
            raise IncompatibleCheckpointError(
                f"model config field {key!r} differs: checkpoint {theirs.get(key)!r} "
                f"vs requested {ours[key]!r}"
            )


# -- sampling -----------------------------------------------------------------------


def subsample_labeled(
    sequences: list[SkeletonSequence],
    fraction: float,
    rng: np.random.Generator,
    stratified: bool = True,
) -> list[SkeletonSequence]:
    """Label-fraction subsample, class-stratified by default."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(sequences)
    n = len(sequences)
    if stratified and all(s.label is not None for s in sequences):
        chosen: list[int] = []
        labels = np.array([s.label for s in sequences])
        for cls in sorted(set(labels.tolist())):
            members = np.flatnonzero(labels == cls)
            k = max(1, int(round(fraction * members.size)))
            chosen.extend(rng.choice(members, size=k, replace=False).tolist())
        chosen.sort()
    else:
        k = max(1, int(round(fraction * n)))
        chosen = sorted(rng.choice(n, size=k, replace=False).tolist())
    return [sequences[i] for i in chosen]


def _sample_batch(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if n <= batch_size:
        return np.arange(n)
    return rng.choice(n, size=batch_size, replace=False)


# -- pre-training -------------------------------------------------------------------


def pretrain(
    dataset: list[SkeletonSequence],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    resume_from: Checkpoint | None = None,
    early_stop=None,
    on_step=None,
    checkpoint_dir=None,
    checkpoint_every: int | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Minimize the combined pretext objective over the active levels.

    ``early_stop(history)`` may end the run once the criterion it encodes is
    met; ``on_step(step, parts)`` receives the per-task loss breakdown every
    step; with ``checkpoint_dir`` and ``checkpoint_every`` set, intermediate
    checkpoints land in the directory every N steps. Returns the final
    checkpoint and the full step history.
    """
    if not dataset:
        raise ValueError("pretraining needs a nonempty dataset")
    levels = frozenset(train_cfg.pretext_levels)
    if not levels:
        raise ValueError("pretext_levels must be nonempty for pretraining")
    if "V" in levels and train_cfg.batch_size < 2:
        raise ValueError("batch_size must be >= 2 while the future-clip task is active")

    if resume_from is not None:
        check_config_compatible(resume_from, model_cfg)
        streams = restore_streams(resume_from.rng_states)
        encoder = HierarchicalEncoder(model_cfg, streams["init"])
        heads = PretextHeads(model_cfg, streams["init"])
        params = encoder.parameters() + heads.parameters()
        _load_params_into(params, resume_from.params)
        start_step = resume_from.step
    else:
        streams = rng_streams(train_cfg.seed)
        encoder = HierarchicalEncoder(model_cfg, streams["init"])
        heads = PretextHeads(model_cfg, streams["init"])
        params = encoder.parameters() + heads.parameters()
        start_step = 0

    opt = Adam(
        params,
        lr=train_cfg.lr,
        beta1=train_cfg.beta1,
        beta2=train_cfg.beta2,
        eps=train_cfg.eps,
        weight_decay=train_cfg.weight_decay,
        clip_norm=train_cfg.clip_norm or None,
    )
    if resume_from is not None and resume_from.opt_state is not None:
        opt.load_state_dict(resume_from.opt_state)

    bounds = coordinate_bounds(dataset)
    chash = config_hash(model_cfg, train_cfg)

    def snapshot(at_step: int) -> Checkpoint:
        return Checkpoint(
            model_config=model_cfg,
            params={p.name: p.data.copy() for p in params},
            step=at_step,
            task=None,
            opt_state=opt.state_dict(),
            rng_states=stream_states(streams),
            train_config_hash=chash,
            extra={"levels": sorted(levels)},
        )

    history: list[dict] = []
    step = start_step
    while step < train_cfg.steps:
        idx = _sample_batch(len(dataset), train_cfg.batch_size, streams["sampling"])
        batch = [dataset[i] for i in idx]
        loss, parts = total_pretrain_loss(
            encoder,
            heads,
            batch,
            streams["corruption"],
            temperature=train_cfg.temperature,
            levels=levels,
            bounds=bounds,
            stop_gradient_targets=train_cfg.stop_gradient_targets,
            normalize_similarity=train_cfg.normalize_similarity,
        )
        if not np.isfinite(parts["total"]):
            raise RuntimeError(
                f"non-finite pretraining loss at step {step}: {parts}"
            )
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        step += 1
        parts = dict(parts, step=step)
        history.append(parts)
        if on_step is not None:
            on_step(step, parts)
        if checkpoint_dir is not None and checkpoint_every and step % checkpoint_every == 0:
            save_checkpoint(snapshot(step), f"{checkpoint_dir}/checkpoint_step{step}.ckpt")
        if early_stop is not None and early_stop(history):
            break

    return snapshot(step), history


# -- fine-tuning --------------------------------------------------------------------


def _init_encoder(model_cfg, train_cfg, checkpoint):
    streams = rng_streams(train_cfg.seed)
    encoder = HierarchicalEncoder(model_cfg, streams["init"])
    if checkpoint is not None:
        check_config_compatible(checkpoint, model_cfg)
        _load_params_into(
            encoder.parameters(), checkpoint.params, prefixes=("frame.", "clip.", "video.")
        )
    return encoder, streams


def _class_count(sequences, from_frames=False) -> int:
    ids: set[int] = set()
    for seq in sequences:
        if from_frames:
            if seq.frame_labels is not None:
                ids.update(int(v) for v in seq.frame_labels[seq.frame_labels >= 0])
        elif seq.label is not None:
            ids.add(int(seq.label))
    if not ids:
        raise ValueError("no labels found in the dataset")
    return max(ids) + 1


def recognition_scores(encoder, head, sequences) -> np.ndarray:
    """Per-sequence class probabilities, shape (len(sequences), classes)."""
    rows = []
    with T.no_grad():
        for seq in sequences:
            emb = encoder.encode(seq).video_embedding
            rows.append(head(T.reshape(emb, (1, emb.shape[-1]))).data[0])
    return softmax_probs(np.stack(rows))


def _grouped_by_shape(sequences):
    groups: dict[tuple, list[int]] = {}
    for i, seq in enumerate(sequences):
        groups.setdefault(seq.joints.shape, []).append(i)
    return groups


def recognition_scores(encoder, head, sequences) -> np.ndarray:
    """Per-sequence class probabilities, shape (len(sequences), classes)."""
    rows = np.empty((len(sequences), head.weight.data.shape[1]))
    with T.no_grad():
        for shape, members in _grouped_by_shape(sequences).items():
            joints = np.stack([sequences[i].joints for i in members])
            _, _, video = encoder.encode_batch(joints)
            rows[members] = head(video).data
    return softmax_probs(rows)


def finetune_recognition(train_seqs, eval_seqs, model_cfg, train_cfg, checkpoint=None):
    encoder, streams = _init_encoder(model_cfg, train_cfg, checkpoint)
    n_classes = _class_count(list(train_seqs) + list(eval_seqs))
    head = Linear("head.recognition", model_cfg.dim_v, n_classes, streams["init"])
    train_subset = subsample_labeled(
        train_seqs, train_cfg.label_fraction, streams["sampling"], train_cfg.stratified
    )
    params = encoder.parameters() + head.parameters()
    opt = Adam(params, lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
               eps=train_cfg.eps, weight_decay=train_cfg.weight_decay,
               clip_norm=train_cfg.clip_norm or None)
    for _ in range(train_cfg.steps):
        idx = _sample_batch(len(train_subset), train_cfg.batch_size, streams["sampling"])
        joints = np.stack([train_subset[i].joints for i in idx])
        labels = np.array([train_subset[i].label for i in idx])
        _, _, video = encoder.encode_batch(joints)
        loss = cross_entropy(head(video), labels)
        T.backward(loss)
        opt.step()
        opt.zero_grad()
    probs = recognition_scores(encoder, head, eval_seqs)
    labels = np.array([s.label for s in eval_seqs])
    metrics = {
        "accuracy": top1_accuracy(probs, labels),
        "train_sequences": float(len(train_subset)),
    }
    return {"encoder": encoder, "head": head}, metrics, probs


def detection_ground_truth(seq: SkeletonSequence):
    """Ground-truth segments in head space (0 = background, class c -> c + 1)."""
    return frames_to_segments(seq.frame_labels + 1)


def evaluate_detection(encoder, head, sequences, overlap=0.5):
    pred_segments = []
    gt_segments = []
    for seq in sequences:
        logits = detect_frames(seq, encoder, head)
        probs = softmax_probs(logits)
        pred = probs.argmax(axis=-1)
        conf = probs.max(axis=-1)
        pred_segments.append(frames_to_segments(pred, conf))
        gt_segments.append(detection_ground_truth(seq))
    return {
        "map_video": mean_average_precision(pred_segments, gt_segments, overlap, "per_video"),
        "map_action": mean_average_precision(pred_segments, gt_segments, overlap, "per_action"),
    }


def finetune_detection(train_seqs, eval_seqs, model_cfg, train_cfg, checkpoint=None):
    encoder, streams = _init_encoder(model_cfg, train_cfg, checkpoint)
    for seq in list(train_seqs) + list(eval_seqs):
        if seq.frame_labels is None:
            raise ValueError("detection needs per-frame labels on every sequence")
    n_classes = _class_count(list(train_seqs) + list(eval_seqs), from_frames=True)
    head = Linear("head.detection", model_cfg.dim_c, n_classes + 1, streams["init"])
    train_subset = subsample_labeled(
        train_seqs, train_cfg.label_fraction, streams["sampling"], train_cfg.stratified
    )
    params = encoder.parameters() + head.parameters()
    opt = Adam(params, lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
               eps=train_cfg.eps, weight_decay=train_cfg.weight_decay,
               clip_norm=train_cfg.clip_norm or None)
    window = model_cfg.window
    for _ in range(train_cfg.steps):
        seq = train_subset[int(streams["sampling"].integers(len(train_subset)))]
        frames = streams["sampling"].integers(seq.n_frames, size=train_cfg.batch_size)
        spatial = encoder.spatial_features(seq.joints)
        all_windows = np.clip(
            frames[:, None] + (np.arange(window) - window // 2)[None, :], 0, seq.n_frames - 1
        )
        tokens = encoder.clip.prepare(spatial[all_windows])
        summary, _ = encoder.clip.forward(tokens)
        logits = head(summary)
        labels = seq.frame_labels[frames] + 1  # shift: 0 is background
        loss = cross_entropy(logits, labels)
        T.backward(loss)
        opt.step()
        opt.zero_grad()
    metrics = evaluate_detection(encoder, head, eval_seqs)
    metrics["train_sequences"] = float(len(train_subset))
    return {"encoder": encoder, "head": head}, metrics, None


def evaluate_motion(encoder, decoder, sequences, task: MotionTask):
    errors = []
    with T.no_grad():
        for shape, members in _grouped_by_shape(sequences).items():
            observed = np.stack([sequences[i].joints[: task.observe_frames] for i in members])
            targets = np.stack(
                [
                    sequences[i].joints[
                        task.observe_frames : task.observe_frames + task.predict_frames
                    ]
                    for i in members
                ]
            )
            _, _, video = encoder.encode_batch(observed)
            rolled = decoder.rollout(video, observed[:, -1], task.predict_frames)
            errors.extend(mpjpe(rolled.data[k], targets[k]) for k in range(len(members)))
    return {"mpjpe_mm": float(np.mean(errors))}


def finetune_motion(train_seqs, eval_seqs, model_cfg, train_cfg, checkpoint=None,
                    motion_task: MotionTask | None = None):
    encoder, streams = _init_encoder(model_cfg, train_cfg, checkpoint)
    fps = train_seqs[0].fps
    task = motion_task or MotionTask.from_seconds(fps)
    for seq in list(train_seqs) + list(eval_seqs):
        if seq.n_frames < task.observe_frames + task.predict_frames:
            raise ValueError(
                f"sequence of {seq.n_frames} frames is too short for "
                f"observe={task.observe_frames} + predict={task.predict_frames}"
            )
    n_joints = train_seqs[0].n_joints
    decoder = MotionDecoder(
        "decoder", model_cfg, n_joints, streams["init"], cell_type=train_cfg.cell_type
    )
    train_subset = subsample_labeled(
        train_seqs, train_cfg.label_fraction, streams["sampling"], train_cfg.stratified
    )
    params = encoder.parameters() + decoder.parameters()
    opt = Adam(params, lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
               eps=train_cfg.eps, weight_decay=train_cfg.weight_decay,
               clip_norm=train_cfg.clip_norm or None)
    for _ in range(train_cfg.steps):
        idx = _sample_batch(len(train_subset), train_cfg.batch_size, streams["sampling"])
        observed = np.stack([train_subset[i].joints[: task.observe_frames] for i in idx])
        targets = np.stack(
            [
                train_subset[i].joints[
                    task.observe_frames : task.observe_frames + task.predict_frames
                ]
                for i in idx
            ]
        )
        _, _, video = encoder.encode_batch(observed)
        rolled = decoder.rollout(video, observed[:, -1], task.predict_frames)
        loss = euclidean_pose_loss(rolled, targets)
        T.backward(loss)
        opt.step()
        opt.zero_grad()
    metrics = evaluate_motion(encoder, decoder, eval_seqs, task)
    metrics["train_sequences"] = float(len(train_subset))
    return {"encoder": encoder, "decoder": decoder, "task": task}, metrics, None


def finetune(
    task: str,
    train_seqs: list[SkeletonSequence],
    eval_seqs: list[SkeletonSequence],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    checkpoint: Checkpoint | None = None,
    motion_task: MotionTask | None = None,
):
    """Fine-tune encoder plus a fresh task head; returns (models, metrics, scores).

    With a checkpoint the encoder starts from its pre-trained parameters,
    otherwise from random initialization. The labeled training set is reduced
    to ``label_fraction`` first (class-stratified when labels allow it).
    """
    if task not in FINETUNE_TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {FINETUNE_TASKS}")
    if not train_seqs or not eval_seqs:
        raise ValueError("fine-tuning needs nonempty train and eval datasets")
    shapes = {seq.joints.shape for seq in train_seqs}
    if task in ("recognition", "motion") and len(shapes) != 1:
        raise ValueError(
            f"training set mixes sequence shapes {sorted(shapes)}; "
            "resample to a fixed length first"
        )
    if task == "recognition":
        return finetune_recognition(train_seqs, eval_seqs, model_cfg, train_cfg, checkpoint)
    if task == "detection":
        return finetune_detection(train_seqs, eval_seqs, model_cfg, train_cfg, checkpoint)
    return finetune_motion(
        train_seqs, eval_seqs, model_cfg, train_cfg, checkpoint, motion_task=motion_task
    )


def finetuned_checkpoint(task, models, model_cfg, train_cfg) -> Checkpoint:
    """Package fine-tuned encoder + head parameters for later evaluation."""
    params: list[T.Parameter] = models["encoder"].parameters()
    if "head" in models:
        params = params + models["head"].parameters()
    if "decoder" in models:
        params = params + models["decoder"].parameters()
    extra = {}
    if "task" in models:
        extra["motion_task"] = {
            "observe_frames": models["task"].observe_frames,
            "predict_frames": models["task"].predict_frames,
        }
    if "head" in models:
        extra["head_width"] = models["head"].weight.data.shape[1]
    if "decoder" in models:
        extra["decoder_joints"] = models["decoder"].n_joints
        extra["decoder_cell"] = models["decoder"].cell_type
    return Checkpoint(
        model_config=model_cfg,
        params={p.name: p.data.copy() for p in params},
        step=train_cfg.steps,
        task=task,
        opt_state=None,
        rng_states=None,
        train_config_hash=config_hash(model_cfg, train_cfg),
        extra=extra,
    )


def evaluate_checkpoint(ckpt: Checkpoint, sequences: list[SkeletonSequence]):
    """Read-only evaluation of a fine-tuned checkpoint on a dataset.

    Returns (metrics, per-sequence scores or None). The checkpoint must have
    been produced by ``finetuned_checkpoint`` for one of the three tasks.
    """
    if ckpt.task not in FINETUNE_TASKS:
        raise IncompatibleCheckpointError(
            f"checkpoint has no fine-tuned task (task={ckpt.task!r})"
        )
    rng = np.random.default_rng(0)  # placeholder init, overwritten by stored params
    encoder = HierarchicalEncoder(ckpt.model_config, rng)
    _load_params_into(encoder.parameters(), ckpt.params, prefixes=("frame.", "clip.", "video."))
    if ckpt.task == "recognition":
        width = int(ckpt.extra["head_width"])
        head = Linear("head.recognition", ckpt.model_config.dim_v, width, rng)
        _load_params_into(head.parameters(), ckpt.params)
        probs = recognition_scores(encoder, head, sequences)
        labels = np.array([s.label for s in sequences])
        return {"accuracy": top1_accuracy(probs, labels)}, probs
    if ckpt.task == "detection":
        width = int(ckpt.extra["head_width"])
        head = Linear("head.detection", ckpt.model_config.dim_c, width, rng)
        _load_params_into(head.parameters(), ckpt.params)
        return evaluate_detection(encoder, head, sequences), None
    task = MotionTask(**ckpt.extra["motion_task"])
    decoder = MotionDecoder(
        "decoder",
        ckpt.model_config,
        int(ckpt.extra["decoder_joints"]),
        rng,
        cell_type=ckpt.extra.get("decoder_cell", "gru"),
    )
    _load_params_into(decoder.parameters(), ckpt.params)
    return evaluate_motion(encoder, decoder, sequences, task), None
