"""Tests for task heads and metrics, with a brute-force mAP reference."""

import numpy as np
import pytest

from skelform import data as D
from skelform import downstream as DS
from skelform import tensor as T
from skelform.encoder import HierarchicalEncoder, Linear, ModelConfig

SMALL = ModelConfig(
    layers_per_level=1,
    heads=2,
    d_k=4,
    dim_f=8,
    dim_c=16,
    dim_v=32,
    window=4,
    stride=2,
    max_frames=64,
    max_joints=16,
    max_clips=32,
    ffn_expansion=2,
)


def seg(start, end, class_id, score=1.0):
    return DS.DetectionSegment(start=start, end=end, class_id=class_id, score=score)


# -- brute-force mAP reference ---------------------------------------------------


def _set_iou(a, b):
    sa, sb = set(range(a.start, a.end)), set(range(b.start, b.end))
    return len(sa & sb) / len(sa | sb)


def _reference_greedy_flags(preds, gts, threshold):
    """Greedy matching with explicit sets and lists instead of arithmetic."""
    remaining = list(gts)
    flags = []
    for video, p in sorted(preds, key=lambda it: (-it[1].score, it[0], it[1].start, it[1].end, it[1].class_id)):
        best, best_iou = None, 0.0
        for cand_video, cand in remaining:
            if cand_video != video or cand.class_id != p.class_id:
                continue
            iou = _set_iou(p, cand)
            if iou >= threshold and iou > best_iou:
                best, best_iou = (cand_video, cand), iou
        if best is not None:
            remaining.remove(best)
            flags.append(1.0)
        else:
            flags.append(0.0)
    return flags


def _reference_ap(flags, n_positive):
    precisions = []
    tp = 0
    for i, flag in enumerate(flags):
        tp += flag
        precisions.append(tp / (i + 1))
    ap, prev_recall, tp = 0.0, 0.0, 0
    for i, flag in enumerate(flags):
        if flag:
            tp += 1
            recall = tp / n_positive
            ap += (recall - prev_recall) * max(precisions[i:])
            prev_recall = recall
    return ap


def reference_map(predictions, ground_truth, threshold, mode):
    aps = []
    if mode == "per_action":
        classes = sorted({s.class_id for video in ground_truth for s in video})
        for cls in classes:
            preds = [(v, s) for v, vid in enumerate(predictions) for s in vid if s.class_id == cls]
            gts = [(v, s) for v, vid in enumerate(ground_truth) for s in vid if s.class_id == cls]
            flags = _reference_greedy_flags(preds, gts, threshold)
            aps.append(_reference_ap(flags, len(gts)))
    else:
        for v, gt_video in enumerate(ground_truth):
            if not gt_video:
                continue
            preds = [(v, s) for s in predictions[v]]
            gts = [(v, s) for s in gt_video]
            flags = _reference_greedy_flags(preds, gts, threshold)
            aps.append(_reference_ap(flags, len(gts)))
    return float(np.mean(aps)) if aps else 0.0


def random_instance(rng, n_videos=3, n_classes=2, t_len=30, max_segs=4):
    predictions, ground_truth = [], []
    for _ in range(n_videos):
        def batch():
            out = []
            for _ in range(int(rng.integers(0, max_segs + 1))):
                start = int(rng.integers(0, t_len - 2))
                end = int(rng.integers(start + 1, t_len))
                out.append(seg(start, end, int(rng.integers(1, n_classes + 1)),
                               float(np.round(rng.random(), 3))))
            return out
        predictions.append(batch())
        ground_truth.append(batch())
    return predictions, ground_truth


class TestFramesToSegments:
    def test_single_run(self):
        segs = DS.frames_to_segments(np.array([0, 1, 1, 1, 0]))
        assert len(segs) == 1
        assert (segs[0].start, segs[0].end, segs[0].class_id) == (1, 4, 1)

    def test_all_background(self):
        assert DS.frames_to_segments(np.zeros(6, dtype=int)) == []

    def test_adjacent_classes(self):
        segs = DS.frames_to_segments(np.array([1, 1, 2, 2]))
        assert [(s.start, s.end, s.class_id) for s in segs] == [(0, 2, 1), (2, 4, 2)]

    def test_scores_are_mean_confidence(self):
        segs = DS.frames_to_segments(np.array([0, 1, 1, 0]), np.array([0.2, 0.4, 0.8, 0.1]))
        assert segs[0].score == pytest.approx(0.6)

    def test_rasterize_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            labels = rng.integers(0, 3, size=25)
            segs = DS.frames_to_segments(labels)
            np.testing.assert_array_equal(DS.segments_to_frames(segs, 25), labels)


class TestMeanAveragePrecision:
    def test_perfect_predictions(self):
        gt = [[seg(0, 10, 1), seg(15, 20, 2)], [seg(3, 9, 1)]]
        preds = [[seg(0, 10, 1, 0.9), seg(15, 20, 2, 0.8)], [seg(3, 9, 1, 0.7)]]
        assert DS.mean_average_precision(preds, gt, 0.5, "per_action") == 1.0
        assert DS.mean_average_precision(preds, gt, 0.5, "per_video") == 1.0

    def test_iou_boundary_exactly_half(self):
        gt = [[seg(0, 10, 1)]]
        preds = [[seg(0, 5, 1, 0.9)]]
        assert DS.mean_average_precision(preds, gt, 0.5, "per_action") == 1.0
        # one frame shorter falls below the threshold
        preds = [[seg(0, 4, 1, 0.9)]]
        assert DS.mean_average_precision(preds, gt, 0.5, "per_action") == 0.0

    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            preds, gt = random_instance(rng)
            for mode in ("per_action", "per_video"):
                got = DS.mean_average_precision(preds, gt, 0.5, mode)
                want = reference_map(preds, gt, 0.5, mode)
                assert got == want, (preds, gt, mode)

    def test_unit_without_ground_truth_skipped(self):
        gt = [[seg(0, 5, 1)], []]
        preds = [[seg(0, 5, 1, 0.9)], [seg(2, 8, 1, 0.8)]]
        # second video has no ground truth: per_video averages only video 0
        assert DS.mean_average_precision(preds, gt, 0.5, "per_video") == 1.0

    def test_duplicate_predictions_second_is_false_positive(self):
        gt = [[seg(0, 10, 1)]]
        preds = [[seg(0, 10, 1, 0.9), seg(0, 10, 1, 0.8)]]
        assert DS.mean_average_precision(preds, gt, 0.5, "per_action") == 1.0

    def test_bad_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            DS.mean_average_precision([[]], [[]], 0.0)


class TestMpjpe:
    def test_zero(self):
        x = np.random.default_rng(2).normal(size=(4, 9, 3))
        assert DS.mpjpe(x, x) == 0.0

    def test_uniform_millimeter_offset(self):
        gt = np.zeros((5, 9, 3))
        pred = gt + np.array([0.001, 0.0, 0.0])
        assert DS.mpjpe(pred, gt) == pytest.approx(1.0, abs=1e-12)

    def test_mean_of_two_joints(self):
        gt = np.zeros((1, 2, 3))
        pred = np.array([[[0.003, 0.004, 0.0], [0.0, 0.0, 0.0]]])
        assert DS.mpjpe(pred, gt) == pytest.approx(2.5, abs=1e-12)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        pred = rng.normal(size=(6, 9, 3))
        gt = rng.normal(size=(6, 9, 3))
        theta = 0.7
        rot = np.array(
            [
                [np.cos(theta), -np.sin(theta), 0.0],
                [np.sin(theta), np.cos(theta), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        a = DS.mpjpe(pred, gt)
        b = DS.mpjpe(pred @ rot.T, gt @ rot.T)
        assert abs(a - b) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            DS.mpjpe(np.zeros((2, 9, 3)), np.zeros((3, 9, 3)))


class TestFuseScores:
    def test_single_stream_identity(self):
        v = np.array([0.2, 0.8])
        np.testing.assert_array_equal(DS.fuse_scores([v]), v)

    def test_identical_streams(self):
        v = np.array([0.3, 0.7])
        np.testing.assert_allclose(DS.fuse_scores([v, v]), v)

    def test_hand_case(self):
        fused = DS.fuse_scores([np.array([0.9, 0.1]), np.array([0.2, 0.8])])
        np.testing.assert_allclose(fused, [0.55, 0.45])
        assert fused.argmax() == 0

    def test_duplicating_a_stream_keeps_argmax(self):
        rng = np.random.default_rng(4)
        streams = [rng.random(5) for _ in range(3)]
        streams = [s / s.sum() for s in streams]
        base = DS.fuse_scores(streams).argmax()
        assert DS.fuse_scores(streams + [streams[0]]).argmax() in (base, base)
        dup = DS.fuse_scores([streams[0], streams[0], streams[1], streams[1], streams[2], streams[2]])
        assert dup.argmax() == base

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            DS.fuse_scores([])


class TestClassify:
    def test_logit_width_and_shift_invariance(self):
        rng = np.random.default_rng(5)
        head = Linear("head.test", SMALL.dim_v, 4, rng)
        emb = T.Tensor(rng.normal(size=SMALL.dim_v))
        logits = DS.classify_action(emb, head)
        assert logits.shape == (4,)
        assert np.argmax(logits.data) == np.argmax(logits.data + 3.17)

    def test_zero_head_uniform_logits(self):
        rng = np.random.default_rng(6)
        head = Linear("head.test", SMALL.dim_v, 3, rng)
        head.weight.data[:] = 0.0
        head.bias.data[:] = 0.0
        logits = DS.classify_action(T.Tensor(rng.normal(size=SMALL.dim_v)), head)
        np.testing.assert_array_equal(logits.data, np.zeros(3))
        assert np.argmax(logits.data) == 0  # ties resolve to the lowest class id

    def test_cross_entropy_matches_log_softmax(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        loss = DS.cross_entropy(T.Tensor(logits), labels).item()
        probs = DS.softmax_probs(logits)
        want = -np.mean(np.log(probs[np.arange(5), labels]))
        assert loss == pytest.approx(want, abs=1e-12)


class TestDetectFrames:
    def test_window_indices_centered_and_clamped(self):
        idx = DS.detection_window_indices(6, 4)
        np.testing.assert_array_equal(idx[0], [0, 0, 0, 1])
        np.testing.assert_array_equal(idx[3], [1, 2, 3, 4])
        np.testing.assert_array_equal(idx[5], [3, 4, 5, 5])

    def test_output_shape_and_identical_windows(self):
        enc = HierarchicalEncoder(SMALL, np.random.default_rng(8))
        head = Linear("head.detection", SMALL.dim_c, 3, np.random.default_rng(9))
        joints = np.random.default_rng(10).normal(size=(10, 5, 3))
        joints[7] = joints[3]  # craft two frames with identical centered windows
        joints[8] = joints[4]
        joints[5] = joints[1]
        joints[6] = joints[2]
        joints[9] = joints[5]
        seq = D.SkeletonSequence(
            joints=joints, fps=30.0, topology=(0, 0, 1, 2, 3),
            frame_labels=np.full(10, -1),
        )
        logits = DS.detect_frames(seq, enc, head)
        assert logits.shape == (10, 3)
        assert np.all(np.isfinite(logits))

    def test_constant_sequence_constant_logits(self):
        enc = HierarchicalEncoder(SMALL, np.random.default_rng(11))
        head = Linear("head.detection", SMALL.dim_c, 3, np.random.default_rng(12))
        seq = D.SkeletonSequence(
            joints=np.ones((8, 5, 3)) * 0.2, fps=30.0, topology=(0, 0, 1, 2, 3)
        )
        logits = DS.detect_frames(seq, enc, head)
        # every centered window contains the same repeated frame
        np.testing.assert_allclose(logits, np.broadcast_to(logits[0], logits.shape), atol=1e-12)


class TestMotion:
    def test_task_from_seconds(self):
        task = DS.MotionTask.from_seconds(30.0)
        assert task.observe_frames == 60
        assert task.predict_frames == 12
        task = DS.MotionTask.from_seconds(10.0)
        assert (task.observe_frames, task.predict_frames) == (20, 4)

    def test_zero_deltas_hold_last_pose(self):
        rng = np.random.default_rng(13)
        dec = DS.MotionDecoder("decoder", SMALL, n_joints=5, rng=rng)
        dec.delta_out.weight.data[:] = 0.0
        dec.delta_out.bias.data[:] = 0.0
        last = rng.normal(size=(5, 3))
        out = dec.rollout(T.Tensor(rng.normal(size=SMALL.dim_v)), last, steps=3)
        assert out.shape == (3, 5, 3)
        for step in range(3):
            np.testing.assert_array_equal(out.data[step], last)

    @pytest.mark.parametrize("cell", ["gru", "lstm"])
    def test_rollout_shape_and_grads(self, cell):
        rng = np.random.default_rng(14)
        dec = DS.MotionDecoder("decoder", SMALL, n_joints=4, rng=rng, cell_type=cell)
        emb = T.Tensor(rng.normal(size=SMALL.dim_v), requires_grad=True)
        out = dec.rollout(emb, rng.normal(size=(4, 3)), steps=2)
        assert out.shape == (2, 4, 3)
        loss = DS.euclidean_pose_loss(out, np.zeros((2, 4, 3)))
        T.backward(loss)
        assert emb.grad is not None
        assert dec.delta_out.weight.grad is not None

    def test_predict_motion_too_short(self):
        enc = HierarchicalEncoder(SMALL, np.random.default_rng(15))
        dec = DS.MotionDecoder("decoder", SMALL, n_joints=9, rng=np.random.default_rng(16))
        seq = D.SkeletonSequence(joints=np.zeros((10, 9, 3)), fps=10.0)
        with pytest.raises(D.InsufficientLengthError):
            DS.predict_motion(seq, DS.MotionTask(observe_frames=8, predict_frames=4), enc, dec)

    def test_predict_motion_shape(self):
        enc = HierarchicalEncoder(SMALL, np.random.default_rng(17))
        dec = DS.MotionDecoder("decoder", SMALL, n_joints=9, rng=np.random.default_rng(18))
        seq = D.SkeletonSequence(
            joints=np.random.default_rng(19).normal(size=(16, 9, 3)), fps=10.0
        )
        out = DS.predict_motion(seq, DS.MotionTask(observe_frames=12, predict_frames=3), enc, dec)
        assert out.shape == (3, 9, 3)


class TestReports:
    def test_report_round_trip(self, tmp_path):
        path = tmp_path / "metrics.report"
        DS.write_report(path, "recognition", {"accuracy": 0.97}, "abc123", 7)
        back = DS.read_report(path)
        assert back["task"] == "recognition"
        assert back["seed"] == "7"
        assert back["config_hash"] == "abc123"
        assert back["metrics"]["accuracy"] == pytest.approx(0.97)
