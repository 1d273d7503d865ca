"""Task heads and metrics for recognition, per-frame detection, and motion.

Recognition puts a linear classifier on the video embedding, detection
classifies every frame from the clip-stage summary of its centered window,
and motion prediction rolls a recurrent decoder forward from the video
embedding of the observed prefix. Metrics: top-1 accuracy, mean average
precision over temporal segments at an IoU threshold, and mean per-joint
position error in millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import InsufficientLengthError, SkeletonSequence
from .encoder import HierarchicalEncoder, Linear, ModelConfig


@dataclass(frozen=True)
class DetectionSegment:
    """Half-open frame interval [start, end) carrying a class and a score."""

    start: int
    end: int
    class_id: int
    score: float

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError(f"segment start {self.start} must precede end {self.end}")
        if not np.isfinite(self.score):
            raise ValueError("segment score must be finite")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class MotionTask:
    """Observation and prediction horizons in frames."""

    observe_frames: int
    predict_frames: int

    def __post_init__(self):
        if self.observe_frames < 1 or self.predict_frames < 1:
            raise ValueError("both horizons must be at least one frame")

    @staticmethod
    def from_seconds(fps: float, observe_s: float = 2.0, predict_s: float = 0.4) -> "MotionTask":
        return MotionTask(
            observe_frames=int(round(fps * observe_s)),
            predict_frames=int(round(fps * predict_s)),
        )


# -- recognition -----------------------------------------------------------------


def classify_action(video_emb: T.Tensor, head: Linear) -> T.Tensor:
    """Class logits from a single video embedding."""
    return head(T.reshape(video_emb, (1, video_emb.shape[-1])))[0]


def cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean negative log-softmax of the labeled class; logits are (B, C)."""
    labels = np.asarray(labels, dtype=np.int64)
    shift = logits.data.max(axis=-1, keepdims=True)  # constant, exact gradient
    lse = T.log(T.tsum(T.exp(logits - T.Tensor(shift)), axis=-1)) + T.Tensor(shift[:, 0])
    picked = logits[(np.arange(labels.size), labels)]
    return T.tmean(lse - picked)


def top1_accuracy(logit_rows: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index wins ties) is the label."""
    pred = np.argmax(logit_rows, axis=-1)
    return float(np.mean(pred == np.asarray(labels)))


def fuse_scores(score_sets: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of per-class probability vectors from several streams."""
    if not score_sets:
        raise ValueError("fuse_scores needs at least one stream")
    arrays = [np.asarray(s, dtype=np.float64) for s in score_sets]
    width = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != width:
            raise ValueError(f"stream shapes disagree: {width} vs {a.shape}")
    return np.mean(arrays, axis=0)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# -- detection --------------------------------------------------------------------


def detection_window_indices(n_frames: int, window: int) -> np.ndarray:
    """Centered window [t - floor(w/2), t + ceil(w/2)) per frame, edge-clamped."""
    offsets = np.arange(window) - window // 2
    idx = np.arange(n_frames)[:, None] + offsets[None, :]
    return np.clip(idx, 0, n_frames - 1)


def detect_frames(
    seq: SkeletonSequence,
    encoder: HierarchicalEncoder,
    head: Linear,
    window: int | None = None,
) -> np.ndarray:
    """Per-frame logits over background + classes, shape (T, classes + 1).

    Each frame is scored from the clip-stage summary of its centered window;
    edge windows repeat the boundary frame.
    """
    window = encoder.cfg.window if window is None else window
    if window > encoder.cfg.window:
        raise ValueError(f"detection window {window} exceeds clip width {encoder.cfg.window}")
    with T.no_grad():
        spatial = encoder.spatial_features(seq.joints)
        idx = detection_window_indices(seq.n_frames, window)
        windows = spatial[idx]  # (T, W, J, dim_f)
        tokens = encoder.clip.prepare(windows)
        summary, _ = encoder.clip.forward(tokens)
        logits = head(summary)
    return logits.data


def frames_to_segments(
    per_frame_pred: np.ndarray,
    per_frame_conf: np.ndarray | None = None,
    background: int = 0,
) -> list[DetectionSegment]:
    """Maximal constant non-background runs; score is the mean confidence."""
    pred = np.asarray(per_frame_pred, dtype=np.int64)
    conf = np.ones(pred.size) if per_frame_conf is None else np.asarray(per_frame_conf)
    segments: list[DetectionSegment] = []
    start = 0
    for t in range(1, pred.size + 1):
        if t == pred.size or pred[t] != pred[start]:
            if pred[start] != background:
                segments.append(
                    DetectionSegment(
                        start=start,
                        end=t,
                        class_id=int(pred[start]),
                        score=float(conf[start:t].mean()),
                    )
                )
            start = t
    return segments


def segments_to_frames(
    segments: list[DetectionSegment], n_frames: int, background: int = 0
) -> np.ndarray:
    """Rasterize segments back onto a frame-label array."""
    out = np.full(n_frames, background, dtype=np.int64)
    for seg in segments:
        out[seg.start : seg.end] = seg.class_id
    return out


def temporal_iou(a: DetectionSegment, b: DetectionSegment) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    return inter / union


def _rank_key(item):
    video, seg = item
    return (-seg.score, video, seg.start, seg.end, seg.class_id)


def _greedy_match(ranked, gt_pool) -> list[float]:
    """TP flags for score-ranked predictions against per-video unmatched GT.

    Each prediction claims the unmatched same-class ground-truth segment in
    its own video with the highest IoU at or above the threshold.
    """
    flags = []
    for video, seg, threshold in ranked:
        best_iou, best_key = 0.0, None
        for key, gt in gt_pool.items():
            if key[0] != video or gt.class_id != seg.class_id:
                continue
            iou = temporal_iou(seg, gt)
            if iou >= threshold and iou > best_iou:
                best_iou, best_key = iou, key
        if best_key is not None:
            del gt_pool[best_key]
            flags.append(1.0)
        else:
            flags.append(0.0)
    return flags


def _interpolated_ap(tp_flags: list[float], n_positive: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    tp = np.asarray(tp_flags)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_positive
    precision = tp_cum / (tp_cum + fp_cum) if tp.size else np.zeros(0)
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def mean_average_precision(
    predictions: list[list[DetectionSegment]],
    ground_truth: list[list[DetectionSegment]],
    overlap: float = 0.5,
    mode: str = "per_action",
) -> float:
    """Segment-level mAP at a temporal-IoU threshold.

    ``per_action`` averages one AP per class (pooling videos), ``per_video``
    averages one AP per video (pooling classes). Averaging units without any
    ground-truth segments are skipped; if nothing has ground truth at all the
    result is 0.0.
    """
    if not 0.0 < overlap <= 1.0:
        raise ValueError(f"overlap must be in (0, 1], got {overlap}")
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth must cover the same videos")
    if mode not in ("per_action", "per_video"):
        raise ValueError(f"unknown mode {mode!r}")

    aps = []
    if mode == "per_action":
        classes = sorted({seg.class_id for video in ground_truth for seg in video})
        for cls in classes:
            ranked = sorted(
                (
                    (v, seg)
                    for v, video in enumerate(predictions)
                    for seg in video
                    if seg.class_id == cls
                ),
                key=_rank_key,
            )
            gt_pool = {
                (v, k): seg
                for v, video in enumerate(ground_truth)
                for k, seg in enumerate(video)
                if seg.class_id == cls
            }
            n_positive = len(gt_pool)
            flags = _greedy_match([(v, s, overlap) for v, s in ranked], gt_pool)
            aps.append(_interpolated_ap(flags, n_positive))
    else:
        for v, gt_video in enumerate(ground_truth):
            if not gt_video:
                continue
            ranked = sorted(((v, seg) for seg in predictions[v]), key=_rank_key)
            gt_pool = {(v, k): seg for k, seg in enumerate(gt_video)}
            flags = _greedy_match([(vv, s, overlap) for vv, s in ranked], gt_pool)
            aps.append(_interpolated_ap(flags, len(gt_video)))
    return float(np.mean(aps)) if aps else 0.0


# -- motion prediction -------------------------------------------------------------


class MotionDecoder:
    """Single-layer recurrent decoder emitting residual pose deltas.

    The hidden state starts from a linear map of the video embedding; each
    step consumes the previous pose and adds the predicted delta, so zero
    deltas reproduce the last observed pose. ``cell_type`` selects between a
    gated-recurrent and an LSTM cell.
    """

    def __init__(
        self,
        name: str,
        cfg: ModelConfig,
        n_joints: int,
        rng: np.random.Generator,
        cell_type: str = "gru",
        hidden: int | None = None,
    ):
        if cell_type not in ("gru", "lstm"):
            raise ValueError(f"cell_type must be 'gru' or 'lstm', got {cell_type!r}")
        self.cell_type = cell_type
        self.hidden = cfg.dim_v if hidden is None else hidden
        self.n_joints = n_joints
        pose_dim = n_joints * 3
        self.init_proj = Linear(f"{name}.init_proj", cfg.dim_v, self.hidden, rng)
        if cell_type == "gru":
            self.gates_x = Linear(f"{name}.gates_x", pose_dim, 2 * self.hidden, rng)
            self.gates_h = Linear(f"{name}.gates_h", self.hidden, 2 * self.hidden, rng)
            self.cand_x = Linear(f"{name}.cand_x", pose_dim, self.hidden, rng)
            self.cand_h = Linear(f"{name}.cand_h", self.hidden, self.hidden, rng)
        else:
            self.gates_x = Linear(f"{name}.gates_x", pose_dim, 4 * self.hidden, rng)
            self.gates_h = Linear(f"{name}.gates_h", self.hidden, 4 * self.hidden, rng)
        self.delta_out = Linear(f"{name}.delta_out", self.hidden, pose_dim, rng)

    def parameters(self):
        params = self.init_proj.parameters() + self.gates_x.parameters() + self.gates_h.parameters()
        if self.cell_type == "gru":
            params += self.cand_x.parameters() + self.cand_h.parameters()
        return params + self.delta_out.parameters()

    def _step(self, pose, h, c):
        k = self.hidden
        if self.cell_type == "gru":
            zr = T.sigmoid(self.gates_x(pose) + self.gates_h(h))
            z = zr[:, :k]
            r = zr[:, k:]
            cand = T.tanh(self.cand_x(pose) + self.cand_h(r * h))
            h = z * h + (1.0 - z) * cand
        else:
            gates = self.gates_x(pose) + self.gates_h(h)
            i = T.sigmoid(gates[:, :k])
            f = T.sigmoid(gates[:, k : 2 * k])
            o = T.sigmoid(gates[:, 2 * k : 3 * k])
            g = T.tanh(gates[:, 3 * k :])
            c = f * c + i * g
            h = o * T.tanh(c)
        return h, c

    def rollout(self, video_emb: T.Tensor, last_pose: np.ndarray, steps: int) -> T.Tensor:
        """Autoregressive poses for ``steps`` future frames.

        Unbatched, (dim_v,) + (J, 3) -> (steps, J, 3); batched, (B, dim_v) +
        (B, J, 3) -> (B, steps, J, 3).
        """
        batched = video_emb.ndim == 2
        b = video_emb.shape[0] if batched else 1
        h = self.init_proj(
            video_emb if batched else T.reshape(video_emb, (1, video_emb.shape[-1]))
        )
        c = T.Tensor(np.zeros((b, self.hidden)))
        pose = T.Tensor(np.asarray(last_pose, dtype=np.float64).reshape(b, -1))
        outs = []
        for _ in range(steps):
            h, c = self._step(pose, h, c)
            pose = pose + self.delta_out(h)
            outs.append(T.reshape(pose, (b, 1, self.n_joints, 3)))
        stacked = T.concat(outs, axis=1)  # (B, steps, J, 3)
        if batched:
            return stacked
        return T.reshape(stacked, (steps, self.n_joints, 3))


def predict_motion(
    seq: SkeletonSequence,
    task: MotionTask,
    encoder: HierarchicalEncoder,
    decoder: MotionDecoder,
) -> np.ndarray:
    """Predicted future poses for the observation prefix of ``seq``."""
    total = task.observe_frames + task.predict_frames
    if seq.n_frames < total:
        raise InsufficientLengthError(
            f"need {total} frames (observe + predict), sequence has {seq.n_frames}"
        )
    with T.no_grad():
        observed = seq.joints[: task.observe_frames]
        encoded = encoder.encode(observed)
        rolled = decoder.rollout(
            encoded.video_embedding, observed[-1], task.predict_frames
        )
    return rolled.data


def euclidean_pose_loss(pred: T.Tensor, target: np.ndarray) -> T.Tensor:
    """Mean Euclidean distance between predicted and true joints (meters)."""
    diff = pred - T.Tensor(np.asarray(target, dtype=np.float64))
    sq = T.tsum(diff * diff, axis=-1)
    return T.tmean(T.sqrt(sq + 1e-12))


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-joint position error in millimeters."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise T.ShapeError(f"mpjpe shapes disagree: {pred.shape} vs {gt.shape}")
    dist = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    return float(dist.mean() * 1000.0)


# -- metric reports -----------------------------------------------------------------


def write_report(path, task: str, metrics: dict, config_hash: str, seed: int) -> None:
    """Structured-text metrics report: one ``key = value`` pair per line."""
    lines = [
        "report_version = 1",
        f"task = {task}",
        f"config_hash = {config_hash}",
        f"seed = {seed}",
    ]
    for name in sorted(metrics):
        lines.append(f"metric.{name} = {metrics[name]!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_report(path) -> dict:
    out: dict = {"metrics": {}}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key.startswith("metric."):
                out["metrics"][key[len("metric.") :]] = float(value)
            else:
                out[key] = value
    return out
