"""Self-supervised pretext tasks and the combined pre-training objective.

Three tasks supervise the encoder at its three levels: masked-joint
coordinate regression on the frame stage, temporal-order verification on the
clip and video stages, and contrastive future-clip prediction on the video
stage. The combined objective is their unweighted sum, each term averaged
over the batch.

Corruption and pair sampling are pure functions of an explicit RNG, so a
fixed seed reproduces every batch bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SkeletonSequence, ClipSet, clip_starts
from .encoder import HierarchicalEncoder, Linear, ModelConfig

MASK_FRACTION = 0.15
MODE_PROBS = (0.8, 0.1, 0.1)  # random_coord / swapped_coord / unchanged
PROB_CLAMP = 1e-7


class DegenerateBatchError(ValueError):
    """The contrastive task needs at least two sequences for negatives."""


@dataclass
class CorruptionRecord:
    """A corrupted sequence plus everything needed to score the regression."""

    corrupted: SkeletonSequence
    mask_set: list[tuple[int, int]]  # (frame, joint), unique
    originals: np.ndarray  # (|M|, 3) pre-corruption coordinates
    modes: list[str]


@dataclass
class PermutedPair:
    """A positive sample and its order-permuted negative twin."""

    positive: np.ndarray
    negative: np.ndarray
    swap_indices: tuple[int, int]


def mask_count(n_frames: int, n_joints: int) -> int:
    return int(round(MASK_FRACTION * n_frames * n_joints))


def _two_distinct(n: int, rng: np.random.Generator) -> tuple[int, int]:
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    return i, j


def corrupt_spatial(
    seq: SkeletonSequence,
    rng: np.random.Generator,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
) -> CorruptionRecord:
    """Corrupt 15% of the joint cells with the 80/10/10 mode mixture.

    Modes: a coordinate drawn uniformly from the coordinate bounding box,
    a coordinate copied from a different (frame, joint) cell, or the value
    left unchanged. ``bounds`` defaults to the sequence's own bounding box.
    """
    t_len, n_joints = seq.n_frames, seq.n_joints
    total = t_len * n_joints
    n_mask = mask_count(t_len, n_joints)
    if n_mask < 1:
        raise ValueError(f"sequence with {total} cells is too small to corrupt")
    if bounds is None:
        lo = seq.joints.reshape(-1, 3).min(axis=0)
        hi = seq.joints.reshape(-1, 3).max(axis=0)
    else:
        lo, hi = bounds
    flat_cells = rng.choice(total, size=n_mask, replace=False)
    corrupted = seq.joints.copy()
    mask_set: list[tuple[int, int]] = []
    modes: list[str] = []
    originals = np.empty((n_mask, 3))
    for k, cell in enumerate(flat_cells):
        f, j = divmod(int(cell), n_joints)
        mask_set.append((f, j))
        originals[k] = seq.joints[f, j]
        draw = rng.random()
        if draw < MODE_PROBS[0]:
            modes.append("random_coord")
            corrupted[f, j] = rng.uniform(lo, hi)
        elif draw < MODE_PROBS[0] + MODE_PROBS[1]:
            modes.append("swapped_coord")
            other = int(rng.integers(total - 1))
            if other >= cell:
                other += 1
            of, oj = divmod(other, n_joints)
            corrupted[f, j] = seq.joints[of, oj]
        else:
            modes.append("unchanged")
    record_seq = SkeletonSequence(
        joints=corrupted,
        fps=seq.fps,
        topology=seq.topology,
        label=seq.label,
        frame_labels=seq.frame_labels,
    )
    return CorruptionRecord(
        corrupted=record_seq, mask_set=mask_set, originals=originals, modes=modes
    )


def spatial_loss(pred: T.Tensor, originals: np.ndarray) -> T.Tensor:
    """Mean over masked joints of the L1 norm of the coordinate residual."""
    residual = T.tabs(pred - T.Tensor(originals))
    return T.tmean(T.tsum(residual, axis=-1))


def make_clip_pair(seq: SkeletonSequence, rng: np.random.Generator, window: int) -> PermutedPair:
    """Random contiguous crop plus a negative with two frames swapped."""
    if window < 2:
        raise ValueError("clip window must be >= 2 to permute frames")
    if seq.n_frames < window:
        raise ValueError(f"sequence of {seq.n_frames} frames is shorter than window {window}")
    start = int(rng.integers(seq.n_frames - window + 1))
    i, j = _two_distinct(window, rng)
    positive = seq.joints[start : start + window].copy()
    negative = positive.copy()
    negative[[i, j]] = negative[[j, i]]
    return PermutedPair(positive=positive, negative=negative, swap_indices=(i, j))


def make_video_negative(clips: ClipSet, rng: np.random.Generator) -> PermutedPair:
    """Negative clip sequence with two clip positions swapped."""
    n = clips.n_clips
    if n < 2:
        raise DegenerateBatchError("need at least 2 clips to permute their order")
    i, j = _two_distinct(n, rng)
    positive = clips.clips.copy()
    negative = positive.copy()
    negative[[i, j]] = negative[[j, i]]
    return PermutedPair(positive=positive, negative=negative, swap_indices=(i, j))


def temporal_loss(p_pos: T.Tensor, p_neg: T.Tensor) -> T.Tensor:
    """Binary order-verification loss -(log p+ + log(1 - p-)), inputs clamped."""
    p_pos = T.clip(p_pos, PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_neg = T.clip(p_neg, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(T.log(p_pos) + T.log(1.0 - p_neg))


def infonce_loss(
    predicted: T.Tensor,
    targets: T.Tensor,
    temperature: float,
    normalize: bool = True,
) -> T.Tensor:
    """Contrastive loss pairing row i of ``predicted`` with row i of ``targets``.

    Similarities are dot products (of L2-normalized vectors by default)
    scaled by the temperature; every other row of ``targets`` serves as an
    in-batch negative.
    """
    if normalize:
        predicted = predicted / T.sqrt(T.tsum(predicted * predicted, axis=-1, keepdims=True) + 1e-12)
        targets = targets / T.sqrt(T.tsum(targets * targets, axis=-1, keepdims=True) + 1e-12)
    sims = T.matmul(predicted, targets.swap_last_axes()) * (1.0 / temperature)
    b = sims.shape[0]
    row_max = sims.data.max(axis=-1, keepdims=True)  # constant shift, exact gradient
    lse = T.log(T.tsum(T.exp(sims - T.Tensor(row_max)), axis=-1)) + T.Tensor(row_max[:, 0])
    diag = sims[(np.arange(b), np.arange(b))]
    return T.tmean(lse - diag)


class PretextHeads:
    """Trainable heads for the three pretext tasks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.spatial = Linear("heads.spatial", cfg.dim_f, 3, rng)
        self.clip_order = Linear("heads.clip_order", cfg.dim_c, 1, rng)
        self.video_order = Linear("heads.video_order", cfg.dim_v, 1, rng)
        self.future = Linear("heads.future", cfg.dim_v, cfg.dim_c, rng)

    def parameters(self):
        return (
            self.spatial.parameters()
            + self.clip_order.parameters()
            + self.video_order.parameters()
            + self.future.parameters()
        )


def _batched_temporal_loss(probs: T.Tensor) -> T.Tensor:
    """Mean order-verification loss over (B, 2, 1) positive/negative probs."""
    clamped = T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = clamped[(slice(None), 0, 0)]
    neg = clamped[(slice(None), 1, 0)]
    return T.tmean(-(T.log(pos) + T.log(1.0 - neg)))


def total_pretrain_loss(
    encoder: HierarchicalEncoder,
    heads: PretextHeads,
    batch: list[SkeletonSequence],
    rng: np.random.Generator,
    temperature: float = 0.07,
    levels: frozenset[str] | set[str] = frozenset({"F", "C", "V"}),
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
    stop_gradient_targets: bool = True,
    normalize_similarity: bool = True,
) -> tuple[T.Tensor, dict[str, float]]:
    """Combined objective over a batch, restricted to the active levels.

    Levels map to losses as F -> masked-joint regression, C -> clip-order
    verification, V -> video-order verification plus future-clip prediction.
    Sequences in a batch must share T and J so every stage runs batched; the
    frame stage is shared between tasks (crops and clip windows slice the
    clean frame-stage output), and both video-level tasks reuse one set of
    clip embeddings, permuting clip order at the embedding level, which is
    equivalent because clips never attend across clip boundaries.
    """
    levels = frozenset(levels)
    if not levels <= {"F", "C", "V"}:
        raise ValueError(f"unknown pretext levels: {sorted(levels - {'F', 'C', 'V'})}")
    if not levels:
        raise ValueError("at least one pretext level must be active")
    if "V" in levels and len(batch) < 2:
        raise DegenerateBatchError("future-clip prediction needs a batch of >= 2")
    shapes = {seq.joints.shape for seq in batch}
    if len(shapes) != 1:
        raise ValueError(
            f"batch mixes sequence shapes {sorted(shapes)}; resample to a fixed length first"
        )

    cfg = encoder.cfg
    b = len(batch)
    t_len, n_joints = batch[0].n_frames, batch[0].n_joints
    b_idx = np.arange(b)
    zero = T.Tensor(0.0)
    spatial_term = clip_term = video_term = future_term = zero

    if "F" in levels:
        records = [corrupt_spatial(seq, rng, bounds=bounds) for seq in batch]
        corrupted = np.stack([r.corrupted.joints for r in records])
        feats = encoder.spatial_features(corrupted)  # (B, T, J, dim_f)
        cells = np.array([r.mask_set for r in records])  # (B, |M|, 2)
        n_mask = cells.shape[1]
        rows = feats[(np.repeat(b_idx, n_mask), cells[:, :, 0].reshape(-1), cells[:, :, 1].reshape(-1))]
        pred = heads.spatial(rows)  # (B * |M|, 3)
        originals = np.concatenate([r.originals for r in records])
        spatial_term = spatial_loss(pred, originals)

    if levels & {"C", "V"}:
        clean = encoder.spatial_features(np.stack([seq.joints for seq in batch]))

    if "C" in levels:
        crop_idx = np.empty((b, 2, cfg.window), dtype=int)
        for k in range(b):
            start = int(rng.integers(t_len - cfg.window + 1))
            i, j = _two_distinct(cfg.window, rng)
            pos = np.arange(start, start + cfg.window)
            neg = pos.copy()
            neg[[i, j]] = neg[[j, i]]
            crop_idx[k, 0] = pos
            crop_idx[k, 1] = neg
        windows = clean[(b_idx[:, None, None], crop_idx)]  # (B, 2, W, J, dim_f)
        summary, _ = encoder.clip.forward(encoder.clip.prepare(windows))
        clip_term = _batched_temporal_loss(T.sigmoid(heads.clip_order(summary)))

    if "V" in levels:
        starts = clip_starts(t_len, cfg.window, cfg.stride)
        n = len(starts)
        windows = encoder.windowed_features(clean, starts)  # (B, N, W, J, dim_f)
        clip_embs, _ = encoder.clip.forward(encoder.clip.prepare(windows))  # (B, N, dim_c)

        orders = np.empty((b, 2, n), dtype=int)
        orders[:, 0] = np.arange(n)
        for k in range(b):
            i, j = _two_distinct(n, rng)
            perm = np.arange(n)
            perm[[i, j]] = perm[[j, i]]
            orders[k, 1] = perm
        pair_embs = clip_embs[(b_idx[:, None, None], orders)]  # (B, 2, N, dim_c)
        video_pair, _ = encoder.video.forward(encoder.video.prepare(pair_embs))
        video_term = _batched_temporal_loss(T.sigmoid(heads.video_order(video_pair)))

        past_embs = clip_embs[(slice(None), slice(None, n - 1))]
        video_past, _ = encoder.video.forward(encoder.video.prepare(past_embs))
        predicted = heads.future(video_past)  # (B, dim_c)
        targets = clip_embs[(b_idx, np.full(b, n - 1))]
        if stop_gradient_targets:
            targets = targets.detach()
        future_term = infonce_loss(
            predicted, targets, temperature, normalize=normalize_similarity
        )

    total = spatial_term + clip_term + video_term + future_term
    breakdown = {
        "spatial": float(spatial_term.data),
        "clip_order": float(clip_term.data),
        "video_order": float(video_term.data),
        "future_clip": float(future_term.data),
        "total": float(total.data),
    }
    return total, breakdown
