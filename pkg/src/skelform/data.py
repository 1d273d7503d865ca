"""Skeleton sequence data model, synthetic motion generation, and dataset IO.

A sequence is T frames of J joints with 3-D coordinates in meters, plus a
parent-index topology (the root is its own parent). All values here are
immutable after construction and safe to share across threads.

The on-disk format is newline-delimited JSON: a header record carrying
``format_version``, joint count, frame rate, and topology, followed by one
record per sequence. Floats are serialized with ``repr`` round-trip
precision, so save/load is lossless for any finite coordinate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

FORMAT_VERSION = 1

# 9-joint stick figure: root-spine-head plus two 3-joint arm chains off the
# spine. Small enough for brute-force oracles, tree shaped like real skeletons.
DEFAULT_TOPOLOGY = (0, 0, 1, 1, 3, 4, 1, 6, 7)

REST_POSE = np.array(
    [
        [0.0, 0.0, 0.0],  # root
        [0.0, 0.4, 0.0],  # spine
        [0.0, 0.75, 0.0],  # head
        [0.2, 0.55, 0.0],  # left shoulder
        [0.45, 0.55, 0.0],  # left elbow
        [0.7, 0.55, 0.0],  # left wrist
        [-0.2, 0.55, 0.0],  # right shoulder
        [-0.45, 0.55, 0.0],  # right elbow
        [-0.7, 0.55, 0.0],  # right wrist
    ]
)


class InsufficientLengthError(ValueError):
    """Sequence too short for the requested windowing or task."""


class DatasetFormatError(ValueError):
    """A dataset file record could not be parsed."""


class DatasetVersionError(DatasetFormatError):
    """Dataset file was written with an unsupported format version."""


def _validate_topology(topology: tuple[int, ...]) -> None:
    j = len(topology)
    roots = [i for i, p in enumerate(topology) if p == i]
    if len(roots) != 1:
        raise ValueError(f"topology must have exactly one root, found {len(roots)}")
    root = roots[0]
    for start in range(j):
        node, hops = start, 0
        while node != root:
            parent = topology[node]
            if not 0 <= parent < j:
                raise ValueError(f"parent index {parent} out of range for joint {node}")
            node, hops = parent, hops + 1
            if hops > j:
                raise ValueError(f"topology contains a cycle reachable from joint {start}")


@dataclass(frozen=True)
class SkeletonSequence:
    """T x J x 3 joint coordinates with frame rate and optional labels."""

    joints: np.ndarray
    fps: float
    topology: tuple[int, ...] = DEFAULT_TOPOLOGY
    label: int | None = None
    frame_labels: np.ndarray | None = None  # length T, -1 marks background

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        object.__setattr__(self, "joints", joints)
        if joints.ndim != 3 or joints.shape[2] != 3:
            raise ValueError(f"joints must be (T, J, 3), got {joints.shape}")
        t, j, _ = joints.shape
        if t < 1 or j < 2:
            raise ValueError(f"need T >= 1 and J >= 2, got T={t}, J={j}")
        if not np.isfinite(joints).all():
            raise ValueError("joint coordinates must be finite")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        topology = tuple(int(p) for p in self.topology)
        object.__setattr__(self, "topology", topology)
        if len(topology) != j:
            raise ValueError(f"topology length {len(topology)} != joint count {j}")
        _validate_topology(topology)
        if self.frame_labels is not None:
            fl = np.asarray(self.frame_labels, dtype=np.int64)
            if fl.shape != (t,):
                raise ValueError(f"frame_labels must have length T={t}, got {fl.shape}")
            object.__setattr__(self, "frame_labels", fl)

    @property
    def n_frames(self) -> int:
        return self.joints.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joints.shape[1]


@dataclass(frozen=True)
class ClipSet:
    """Fixed-width sliding windows over a sequence; clip i covers [i*S, i*S+W)."""

    clips: np.ndarray  # (N, W, J, 3)
    window: int
    stride: int
    source_length: int

    @property
    def n_clips(self) -> int:
        return self.clips.shape[0]

    def start(self, i: int) -> int:
        return i * self.stride


def clip_starts(n_frames: int, window: int, stride: int) -> list[int]:
    """Start offsets of every full window; raises if fewer than two fit."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if window > n_frames:
        raise InsufficientLengthError(
            f"window {window} exceeds sequence length {n_frames}"
        )
    count = (n_frames - window) // stride + 1
    if count < 2:
        raise InsufficientLengthError(
            f"only {count} clip(s) from T={n_frames}, W={window}, S={stride}; need >= 2"
        )
    return [i * stride for i in range(count)]


def window_clips(seq: SkeletonSequence, window: int, stride: int) -> ClipSet:
    """Split a sequence into sliding windows, dropping trailing frames."""
    starts = clip_starts(seq.n_frames, window, stride)
    clips = np.stack([seq.joints[s : s + window] for s in starts])
    return ClipSet(clips=clips, window=window, stride=stride, source_length=seq.n_frames)


def bone_view(seq: SkeletonSequence) -> SkeletonSequence:
    """Replace each joint by its offset from its parent; the root becomes zero."""
    parents = np.asarray(seq.topology)
    bones = seq.joints - seq.joints[:, parents, :]
    return replace(seq, joints=bones)


def motion_view(seq: SkeletonSequence) -> SkeletonSequence:
    """Per-frame forward differences; the final frame is zero padding."""
    if seq.n_frames < 2:
        raise InsufficientLengthError("motion view needs at least 2 frames")
    motion = np.zeros_like(seq.joints)
    motion[:-1] = seq.joints[1:] - seq.joints[:-1]
    return replace(seq, joints=motion)


def resample_sequence(seq: SkeletonSequence, target_length: int) -> SkeletonSequence:
    """Uniformly sample ``target_length`` frames (repeats frames when upsampling)."""
    if target_length < 1:
        raise ValueError("target_length must be >= 1")
    idx = np.round(np.linspace(0, seq.n_frames - 1, target_length)).astype(int)
    fl = seq.frame_labels[idx] if seq.frame_labels is not None else None
    return replace(seq, joints=seq.joints[idx], frame_labels=fl)


# -- synthetic motion families -------------------------------------------------

# Joints animated by the limb generators (elbows and wrists of both chains).
_MOVING = (4, 5, 7, 8)


def _add_metronome(frames, t_axis, fps):
    """Torso sway plus a slow walk, both locked to the absolute frame index
    and shared by all sequences and classes.

    Gives order-verification pretext tasks a consistent temporal anchor while
    leaving class marginals untouched.
    """
    beat = 0.2 * np.sin(2.0 * np.pi * 1.1 * t_axis / fps)
    frames[:, 1, 1] += 0.5 * beat
    frames[:, 2, 0] += beat
    frames[:, 2, 1] += 0.5 * beat
    frames += 0.06 * (t_axis / fps)[:, None, None] * np.array([1.0, 0.0, 0.0])
    return frames


def _circle(t_axis, fps, rng, direction):
    """Elbows/wrists trace circles about their rest position; +-1 sets spin."""
    frames = np.tile(REST_POSE, (t_axis.size, 1, 1))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    radius = rng.uniform(0.3, 0.45)
    theta = phase + direction * 2.0 * np.pi * 0.5 * t_axis / fps
    for k, joint in enumerate(_MOVING):
        off = phase + k * np.pi / 2.0
        frames[:, joint, 0] += radius * np.cos(theta + off)
        frames[:, joint, 1] += radius * np.sin(theta + off)
    return _add_metronome(frames, t_axis, fps)


def _sawtooth(t_axis, fps, rng, direction):
    """Wrists ramp vertically and snap back; the ramp sign separates classes."""
    frames = np.tile(REST_POSE, (t_axis.size, 1, 1))
    amp = rng.uniform(0.2, 0.35)
    phase = rng.uniform(0.0, 1.0)
    frac = np.mod(phase + 0.5 * t_axis / fps, 1.0)
    ramp = frac if direction > 0 else 1.0 - frac
    for joint in (5, 8):
        frames[:, joint, 1] += amp * ramp
    return _add_metronome(frames, t_axis, fps)


def _static(t_axis, fps, rng):
    return np.tile(REST_POSE, (t_axis.size, 1, 1))


DRIFT_SPEED = 0.3  # m/s, fixed so motion-prediction baselines are analytic


def _drift(t_axis, fps, rng):
    """Whole-body translation at a fixed speed in a random horizontal direction."""
    frames = np.tile(REST_POSE, (t_axis.size, 1, 1))
    angle = rng.uniform(0.0, 2.0 * np.pi)
    velocity = DRIFT_SPEED * np.array([np.cos(angle), 0.0, np.sin(angle)])
    frames += (t_axis / fps)[:, None, None] * velocity[None, None, :]
    return frames


MOTION_FAMILIES = {
    "static": _static,
    "circle_cw": lambda t, fps, rng: _circle(t, fps, rng, -1.0),
    "circle_ccw": lambda t, fps, rng: _circle(t, fps, rng, +1.0),
    "raise": lambda t, fps, rng: _sawtooth(t, fps, rng, +1.0),
    "lower": lambda t, fps, rng: _sawtooth(t, fps, rng, -1.0),
    "drift": _drift,
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Deterministic recipe for a labeled synthetic dataset."""

    classes: tuple[str, ...]
    n_per_class: int
    n_frames: int = 64
    n_joints: int = 9
    fps: float = 30.0
    noise_std: float = 0.01
    seed: int = 0
    segments: bool = False  # embed the action in idle background, per-frame labels

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        unknown = [c for c in self.classes if c not in MOTION_FAMILIES]
        if unknown:
            raise ValueError(f"unknown motion families: {unknown}")
        if self.n_joints != REST_POSE.shape[0]:
            raise ValueError(
                f"built-in motion families use {REST_POSE.shape[0]} joints, got {self.n_joints}"
            )
        if self.n_per_class < 1 or self.n_frames < 1:
            raise ValueError("n_per_class and n_frames must be >= 1")


def generate_synthetic(spec: SyntheticSpec) -> list[SkeletonSequence]:
    """Labeled sequences, a pure function of the spec (fixed seed => identical)."""
    rng = np.random.default_rng(spec.seed)
    t_axis = np.arange(spec.n_frames, dtype=np.float64)
    out: list[SkeletonSequence] = []
    for class_id, name in enumerate(spec.classes):
        family = MOTION_FAMILIES[name]
        for _ in range(spec.n_per_class):
            if spec.segments:
                frames = _static(t_axis, spec.fps, rng)
                labels = np.full(spec.n_frames, -1, dtype=np.int64)
                seg_len = int(rng.integers(max(2, spec.n_frames // 4), spec.n_frames // 2 + 1))
                start = int(rng.integers(0, spec.n_frames - seg_len + 1))
                action = family(t_axis[:seg_len], spec.fps, rng)
                frames[start : start + seg_len] = action
                labels[start : start + seg_len] = class_id
            else:
                frames = family(t_axis, spec.fps, rng)
                labels = None
            if spec.noise_std > 0:
                frames = frames + rng.normal(0.0, spec.noise_std, frames.shape)
            out.append(
                SkeletonSequence(
                    joints=frames,
                    fps=spec.fps,
                    label=class_id,
                    frame_labels=labels,
                )
            )
    return out


def spec_from_file(path) -> SyntheticSpec:
    """Read a SyntheticSpec from a JSON file (same syntax as dataset records)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"spec file {path}: {exc}") from exc
    known = {
        "classes",
        "n_per_class",
        "n_frames",
        "n_joints",
        "fps",
        "noise_std",
        "seed",
        "segments",
    }
    extra = set(raw) - known
    if extra:
        raise DatasetFormatError(f"spec file {path}: unknown keys {sorted(extra)}")
    return SyntheticSpec(**raw)


# -- dataset files --------------------------------------------------------------


def save_dataset(sequences: list[SkeletonSequence], path) -> None:
    """Write sequences as JSON lines with a header record; lossless round-trip."""
    if sequences:
        first = sequences[0]
        for i, seq in enumerate(sequences):
            if (
                seq.n_joints != first.n_joints
                or seq.fps != first.fps
                or seq.topology != first.topology
            ):
                raise ValueError(f"sequence {i} disagrees with header (J/fps/topology)")
        header = {
            "format_version": FORMAT_VERSION,
            "count": len(sequences),
            "n_joints": first.n_joints,
            "fps": first.fps,
            "topology": list(first.topology),
        }
    else:
        header = {
            "format_version": FORMAT_VERSION,
            "count": 0,
            "n_joints": len(DEFAULT_TOPOLOGY),
            "fps": 30.0,
            "topology": list(DEFAULT_TOPOLOGY),
        }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for seq in sequences:
            record = {
                "subjects": 1,
                "label": seq.label,
                "frame_labels": None
                if seq.frame_labels is None
                else seq.frame_labels.tolist(),
                "joints": seq.joints.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def load_dataset(path, resample_to: int | None = None) -> list[SkeletonSequence]:
    """Read a dataset file; optionally resample every sequence to a fixed length.

    Raises DatasetFormatError (with the record index) on any malformed or
    missing record, and never returns a partial dataset.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file, missing header record")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: header record: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(
            f"{path}: format version {version!r}, expected {FORMAT_VERSION}"
        )
    for key in ("count", "n_joints", "fps", "topology"):
        if key not in header:
            raise DatasetFormatError(f"{path}: header record missing {key!r}")
    count = int(header["count"])
    fps = float(header["fps"])
    topology = tuple(int(p) for p in header["topology"])
    records = lines[1:]
    if len(records) != count:
        raise DatasetFormatError(
            f"{path}: header promises {count} records, found {len(records)} (truncated?)"
        )
    out: list[SkeletonSequence] = []
    for i, line in enumerate(records):
        try:
            raw = json.loads(line)
            if raw.get("subjects", 1) != 1:
                raise ValueError(f"{raw['subjects']} subjects; only single-subject supported")
            joints = np.asarray(raw["joints"], dtype=np.float64)
            seq = SkeletonSequence(
                joints=joints,
                fps=fps,
                topology=topology,
                label=None if raw.get("label") is None else int(raw["label"]),
                frame_labels=raw.get("frame_labels"),
            )
        except DatasetFormatError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetFormatError(f"{path}: record {i}: {exc}") from exc
        if resample_to is not None and seq.n_frames != resample_to:
            seq = resample_sequence(seq, resample_to)
        out.append(seq)
    return out


def coordinate_bounds(sequences) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounding box over every joint of every sequence."""
    lo = np.min([s.joints.min(axis=(0, 1)) for s in sequences], axis=0)
    hi = np.max([s.joints.max(axis=(0, 1)) for s in sequences], axis=0)
    return lo, hi


def constant_pose_mpjpe_baseline(predict_frames: int, fps: float, speed: float = DRIFT_SPEED) -> float:
    """Millimeter error of repeating the last pose under constant-velocity drift."""
    horizon = np.arange(1, predict_frames + 1) / fps
    return float(np.mean(speed * horizon) * 1000.0)
