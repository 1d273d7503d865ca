"""Tests for corruption sampling, permutation negatives, and pretext losses."""

import math

import numpy as np
import pytest

from skelform import data as D
from skelform import pretext as P
from skelform import tensor as T
from skelform.encoder import HierarchicalEncoder, ModelConfig

TINY = ModelConfig(
    layers_per_level=1,
    heads=2,
    d_k=4,
    dim_f=8,
    dim_c=16,
    dim_v=32,
    window=4,
    stride=4,
    max_frames=64,
    max_joints=16,
    max_clips=16,
    ffn_expansion=2,
)


def make_seq(t=16, j=9, seed=0):
    rng = np.random.default_rng(seed)
    topology = D.DEFAULT_TOPOLOGY if j == 9 else tuple([0] + list(range(j - 1)))
    return D.SkeletonSequence(
        joints=rng.normal(size=(t, j, 3)) * 0.4, fps=30.0, topology=topology
    )


class TestCorruption:
    def test_mask_count_exact(self):
        seq = make_seq(t=10, j=10)
        record = P.corrupt_spatial(seq, np.random.default_rng(0))
        assert len(record.mask_set) == 15
        assert len(set(record.mask_set)) == 15

    def test_mode_frequencies(self):
        rng = np.random.default_rng(1)
        counts = {"random_coord": 0, "swapped_coord": 0, "unchanged": 0}
        total = 0
        for s in range(200):
            record = P.corrupt_spatial(make_seq(t=40, j=9, seed=s), rng)
            for mode in record.modes:
                counts[mode] += 1
                total += 1
        assert total >= 10000
        assert counts["random_coord"] / total == pytest.approx(0.80, abs=0.02)
        assert counts["swapped_coord"] / total == pytest.approx(0.10, abs=0.02)
        assert counts["unchanged"] / total == pytest.approx(0.10, abs=0.02)

    def test_unchanged_entries_match_originals(self):
        seq = make_seq(t=12, j=9, seed=3)
        record = P.corrupt_spatial(seq, np.random.default_rng(2))
        for (f, j), mode, original in zip(record.mask_set, record.modes, record.originals):
            np.testing.assert_array_equal(original, seq.joints[f, j])
            if mode == "unchanged":
                np.testing.assert_array_equal(record.corrupted.joints[f, j], original)

    def test_untouched_cells_unchanged(self):
        seq = make_seq(t=10, j=9, seed=4)
        record = P.corrupt_spatial(seq, np.random.default_rng(3))
        masked = set(record.mask_set)
        for f in range(seq.n_frames):
            for j in range(seq.n_joints):
                if (f, j) not in masked:
                    np.testing.assert_array_equal(
                        record.corrupted.joints[f, j], seq.joints[f, j]
                    )

    def test_random_coords_within_bounds(self):
        seq = make_seq(t=12, j=9, seed=5)
        lo = np.array([-10.0, -10.0, -10.0])
        hi = np.array([10.0, 10.0, 10.0])
        record = P.corrupt_spatial(seq, np.random.default_rng(4), bounds=(lo, hi))
        for (f, j), mode in zip(record.mask_set, record.modes):
            value = record.corrupted.joints[f, j]
            assert np.all(value >= lo) and np.all(value <= hi)


class TestSpatialLoss:
    def test_zero_residual(self):
        originals = np.random.default_rng(0).normal(size=(4, 3))
        loss = P.spatial_loss(T.Tensor(originals), originals)
        assert loss.item() == 0.0

    def test_single_joint_hand_value(self):
        pred = T.Tensor([[0.1, -0.2, 0.3]])
        loss = P.spatial_loss(pred, np.zeros((1, 3)))
        assert loss.item() == pytest.approx(0.6, abs=1e-12)

    def test_mean_over_joints(self):
        pred = T.Tensor([[0.1, -0.2, 0.3], [0.2, 0.0, 0.0]])
        loss = P.spatial_loss(pred, np.zeros((2, 3)))
        assert loss.item() == pytest.approx(0.4, abs=1e-12)


class TestPermutedPairs:
    def test_clip_pair_swap_indices_distinct(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            pair = P.make_clip_pair(make_seq(t=20, seed=7), rng, window=8)
            i, j = pair.swap_indices
            assert i != j

    def test_clip_pair_untouched_frames_identical(self):
        rng = np.random.default_rng(7)
        pair = P.make_clip_pair(make_seq(t=20, seed=8), rng, window=8)
        i, j = pair.swap_indices
        keep = [k for k in range(8) if k not in (i, j)]
        np.testing.assert_array_equal(pair.positive[keep], pair.negative[keep])
        np.testing.assert_array_equal(pair.positive[i], pair.negative[j])
        np.testing.assert_array_equal(pair.positive[j], pair.negative[i])

    def test_constant_sequence_degenerate_pair(self):
        seq = D.SkeletonSequence(joints=np.ones((12, 9, 3)), fps=30.0)
        pair = P.make_clip_pair(seq, np.random.default_rng(8), window=6)
        np.testing.assert_array_equal(pair.positive, pair.negative)

    def test_video_negative(self):
        seq = make_seq(t=20, seed=9)
        clips = D.window_clips(seq, window=8, stride=4)
        pair = P.make_video_negative(clips, np.random.default_rng(9))
        i, j = pair.swap_indices
        assert i != j
        keep = [k for k in range(clips.n_clips) if k not in (i, j)]
        np.testing.assert_array_equal(pair.positive[keep], pair.negative[keep])
        np.testing.assert_array_equal(pair.positive[i], pair.negative[j])

    def test_video_negative_two_clips_is_reversal(self):
        seq = make_seq(t=12, seed=10)
        clips = D.window_clips(seq, window=8, stride=4)
        assert clips.n_clips == 2
        pair = P.make_video_negative(clips, np.random.default_rng(10))
        np.testing.assert_array_equal(pair.negative, pair.positive[::-1])


class TestTemporalLoss:
    def test_perfect_classifier_near_zero(self):
        loss = P.temporal_loss(T.Tensor(1.0), T.Tensor(0.0))
        assert 0.0 <= loss.item() < 1e-6

    def test_coin_flip_value(self):
        loss = P.temporal_loss(T.Tensor(0.5), T.Tensor(0.5))
        assert loss.item() == pytest.approx(2.0 * math.log(2.0), abs=1e-9)

    def test_symmetric_confidence(self):
        loss = P.temporal_loss(T.Tensor(0.9), T.Tensor(0.1))
        assert loss.item() == pytest.approx(-2.0 * math.log(0.9), abs=1e-12)

    def test_label_symmetry_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            p_pos, p_neg = rng.uniform(0.01, 0.99, size=2)
            a = P.temporal_loss(T.Tensor(p_pos), T.Tensor(p_neg)).item()
            b = P.temporal_loss(T.Tensor(1.0 - p_neg), T.Tensor(1.0 - p_pos)).item()
            assert a == pytest.approx(b, abs=1e-12)


class TestInfoNCE:
    def test_single_sample_is_zero(self):
        pred = T.Tensor([[0.3, -0.7, 0.2]])
        loss = P.infonce_loss(pred, T.Tensor([[1.0, 0.0, 0.0]]), temperature=1.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_orthonormal_hand_value(self):
        targets = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
        pred = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
        loss = P.infonce_loss(pred, targets, temperature=1.0)
        want = math.log(1.0 + math.exp(-1.0))  # -log(e / (e + 1))
        assert loss.item() == pytest.approx(want, abs=1e-9)
        assert loss.item() == pytest.approx(0.3133, abs=1e-4)

    def test_uniform_similarity_is_log_batch(self):
        targets = T.Tensor(np.eye(4))
        pred = T.Tensor(np.full((4, 4), 0.5))
        loss = P.infonce_loss(pred, targets, temperature=0.7)
        assert loss.item() == pytest.approx(math.log(4.0), abs=1e-9)

    def test_nonnegative_random(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            pred = T.Tensor(rng.normal(size=(5, 8)))
            targets = T.Tensor(rng.normal(size=(5, 8)))
            assert P.infonce_loss(pred, targets, temperature=0.07).item() >= 0.0

    def test_strictly_decreases_as_own_similarity_grows(self):
        # With identity targets and no normalization the similarity matrix
        # equals the prediction matrix, so sims are controlled directly.
        targets = T.Tensor(np.eye(3))
        base = np.random.default_rng(13).normal(size=(3, 3))
        losses = []
        for bump in (0.0, 0.5, 1.0):
            pred = base.copy()
            pred[0, 0] += bump
            losses.append(
                P.infonce_loss(T.Tensor(pred), targets, temperature=1.0, normalize=False).item()
            )
        assert losses[0] > losses[1] > losses[2]


class TestTotalLoss:
    def test_breakdown_sums_to_total(self):
        enc = HierarchicalEncoder(TINY, np.random.default_rng(14))
        heads = P.PretextHeads(TINY, np.random.default_rng(15))
        batch = [make_seq(t=12, seed=s) for s in range(3)]
        total, parts = P.total_pretrain_loss(enc, heads, batch, np.random.default_rng(16))
        summed = parts["spatial"] + parts["clip_order"] + parts["video_order"] + parts["future_clip"]
        assert total.item() == pytest.approx(summed, abs=1e-12)
        assert np.isfinite(total.item())

    def test_level_restriction(self):
        enc = HierarchicalEncoder(TINY, np.random.default_rng(17))
        heads = P.PretextHeads(TINY, np.random.default_rng(18))
        batch = [make_seq(t=12, seed=s) for s in range(2)]
        total, parts = P.total_pretrain_loss(
            enc, heads, batch, np.random.default_rng(19), levels={"F"}
        )
        assert parts["clip_order"] == 0.0
        assert parts["video_order"] == 0.0
        assert parts["future_clip"] == 0.0
        assert parts["spatial"] == pytest.approx(total.item(), abs=1e-15)
        T.backward(total)
        touched = {p.name: p.grad is not None for p in enc.parameters()}
        assert any(v for k, v in touched.items() if k.startswith("frame."))
        assert not any(v for k, v in touched.items() if k.startswith("clip."))
        assert not any(v for k, v in touched.items() if k.startswith("video."))
        assert heads.clip_order.weight.grad is None
        assert heads.video_order.weight.grad is None
        assert heads.future.weight.grad is None

    def test_degenerate_batch_error(self):
        enc = HierarchicalEncoder(TINY, np.random.default_rng(20))
        heads = P.PretextHeads(TINY, np.random.default_rng(21))
        with pytest.raises(P.DegenerateBatchError):
            P.total_pretrain_loss(enc, heads, [make_seq(t=12)], np.random.default_rng(22))

    def test_smoke_batch_of_four_finite(self):
        enc = HierarchicalEncoder(TINY, np.random.default_rng(23))
        heads = P.PretextHeads(TINY, np.random.default_rng(24))
        batch = [make_seq(t=16, seed=30 + s) for s in range(4)]
        total, parts = P.total_pretrain_loss(enc, heads, batch, np.random.default_rng(25))
        assert np.isfinite(total.item())
        assert all(np.isfinite(v) for v in parts.values())

    def test_empty_or_unknown_levels_rejected(self):
        enc = HierarchicalEncoder(TINY, np.random.default_rng(26))
        heads = P.PretextHeads(TINY, np.random.default_rng(27))
        batch = [make_seq(t=12, seed=s) for s in range(2)]
        with pytest.raises(ValueError, match="at least one"):
            P.total_pretrain_loss(enc, heads, batch, np.random.default_rng(0), levels=set())
        with pytest.raises(ValueError, match="unknown"):
            P.total_pretrain_loss(enc, heads, batch, np.random.default_rng(0), levels={"F", "X"})


class TestGradientsVsFiniteDifferences:
    """Each loss component's encoder gradients agree with finite differences."""

    @pytest.mark.parametrize("levels", [{"F"}, {"C"}, {"V"}, {"F", "C", "V"}])
    def test_component_grads(self, levels):
        enc = HierarchicalEncoder(TINY, np.random.default_rng(28))
        heads = P.PretextHeads(TINY, np.random.default_rng(29))
        batch = [make_seq(t=12, seed=40 + s) for s in range(2)]

        def run():
            # Stop-gradient targets are disabled: finite differences measure
            # the true derivative, which includes the target branch.
            rng = np.random.default_rng(777)
            loss, _ = P.total_pretrain_loss(
                enc, heads, batch, rng, levels=levels, stop_gradient_targets=False
            )
            return loss

        loss = run()
        T.backward(loss)
        probes = [
            enc.frame.embed.weight,
            enc.frame.blocks[0].attn.query.weight,
            enc.clip.input_proj.weight,
            enc.clip.summary,
            enc.video.input_proj.weight,
            heads.spatial.weight,
        ]
        eps = 1e-5
        checked = 0
        for param in probes:
            if param.grad is None:
                continue
            flat = param.data.reshape(-1)
            gflat = param.grad.reshape(-1)
            for idx in (0, flat.size // 2):
                orig = flat[idx]
                flat[idx] = orig + eps
                hi = run().item()
                flat[idx] = orig - eps
                lo = run().item()
                flat[idx] = orig
                numeric = (hi - lo) / (2 * eps)
                denom = max(abs(numeric), 1e-2)
                assert abs(gflat[idx] - numeric) / denom <= 1e-3
                checked += 1
        assert checked >= 2
