"""Tests for the hierarchical encoder: shapes, masking, locality, gradients."""

import numpy as np
import pytest

from skelform import data as D
from skelform import tensor as T
from skelform.encoder import (
    CapacityError,
    HierarchicalEncoder,
    ModelConfig,
    clip_attention_mask,
    zero_positional_tables,
)

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

SMALL = ModelConfig(
    layers_per_level=2,
    heads=4,
    d_k=8,
    dim_f=16,
    dim_c=24,
    dim_v=32,
    window=4,
    stride=2,
    max_frames=64,
    max_joints=16,
    max_clips=32,
    ffn_expansion=2,
)


def build(cfg, seed=0):
    return HierarchicalEncoder(cfg, np.random.default_rng(seed))


def random_seq(t, j=9, seed=0):
    rng = np.random.default_rng(seed)
    topology = D.DEFAULT_TOPOLOGY if j == 9 else tuple([0] + list(range(j - 1)))
    return D.SkeletonSequence(
        joints=rng.normal(size=(t, j, 3)) * 0.3, fps=30.0, topology=topology
    )


class TestEmbedJoints:
    def test_zero_input_zero_bias_gives_positional_rows(self):
        enc = build(TINY)
        enc.frame.embed.bias.tensor.data[:] = 0.0
        enc.frame.joint_pos.tensor.data[:] = np.arange(
            TINY.max_joints * TINY.dim_f
        ).reshape(TINY.max_joints, TINY.dim_f)
        out = enc.frame.embed_joints(np.zeros((3, 5, 3)))
        want = np.broadcast_to(enc.frame.joint_pos.data[:5], (3, 5, TINY.dim_f))
        np.testing.assert_array_equal(out.data, want)

    def test_equal_inputs_equal_embeddings(self):
        # same coordinates at the same joint id embed identically in every frame
        enc = build(TINY, seed=1)
        joints = np.zeros((2, 4, 3))
        joints[:, :, :] = [0.1, -0.2, 0.3]
        out = enc.frame.embed_joints(joints).data
        np.testing.assert_array_equal(out[0, 0], out[1, 0])
        np.testing.assert_array_equal(out[0, 3], out[1, 3])

    def test_default_output_width(self):
        enc = build(ModelConfig())
        out = enc.frame.embed_joints(np.zeros((2, 9, 3)))
        assert out.shape == (2, 9, 128)

    def test_capacity_error(self):
        enc = build(TINY)
        with pytest.raises(CapacityError):
            enc.frame.embed_joints(np.zeros((2, TINY.max_joints + 1, 3)))


class TestFrameStage:
    def test_single_joint_attention_is_one(self):
        cfg = ModelConfig(
            layers_per_level=1, heads=2, d_k=4, dim_f=8, dim_c=16, dim_v=32,
            window=4, stride=4, max_joints=4, ffn_expansion=2,
        )
        enc = build(cfg)
        sink = []
        enc.spatial_features(np.random.default_rng(0).normal(size=(3, 1, 3)), attn_sink=sink)
        for weights in sink:
            np.testing.assert_array_equal(weights, np.ones_like(weights))

    def test_per_frame_locality_exact(self):
        enc = build(SMALL, seed=2)
        joints = np.random.default_rng(3).normal(size=(6, 5, 3))
        base = enc.spatial_features(joints).data
        bumped = joints.copy()
        bumped[2] += 0.5
        out = enc.spatial_features(bumped).data
        others = [t for t in range(6) if t != 2]
        np.testing.assert_array_equal(out[others], base[others])
        assert not np.allclose(out[2], base[2])

    def test_attention_rows_sum_to_one(self):
        enc = build(SMALL, seed=4)
        sink = []
        enc.spatial_features(np.random.default_rng(5).normal(size=(4, 6, 3)), attn_sink=sink)
        for weights in sink:
            np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)

    def test_permutation_equivariance_with_zero_positions(self):
        # With positional tables zeroed, the stage sees joints as a set.
        enc = build(SMALL, seed=6)
        zero_positional_tables(enc)
        joints = np.random.default_rng(7).normal(size=(3, 7, 3))
        perm = np.random.default_rng(8).permutation(7)
        base = enc.spatial_features(joints).data
        permuted = enc.spatial_features(joints[:, perm]).data
        np.testing.assert_allclose(permuted, base[:, perm], atol=1e-9)


class TestClipMask:
    def test_mask_w1_enumeration(self):
        got = clip_attention_mask(1, 3)
        want = np.array(
            [
                [True, True, True, True],
                [True, True, False, False],
                [True, False, True, False],
                [True, False, False, True],
            ]
        )
        np.testing.assert_array_equal(got, want)

    def test_same_frame_cross_joint_weights_exactly_zero(self):
        enc = build(SMALL, seed=9)
        rng = np.random.default_rng(10)
        w, j = SMALL.window, 5
        tokens = T.Tensor(rng.normal(size=(w, j, SMALL.dim_c)))
        sink = []
        enc.clip.forward(tokens, attn_sink=sink)
        assert len(sink) == SMALL.layers_per_level
        allowed = clip_attention_mask(w, j)
        for weights in sink:
            assert weights.shape[-1] == 1 + w * j
            assert np.all(weights[..., ~allowed] == 0.0)
            np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)

    def test_summary_row_has_no_forced_zeros(self):
        enc = build(SMALL, seed=11)
        tokens = T.Tensor(np.random.default_rng(12).normal(size=(4, 3, SMALL.dim_c)))
        sink = []
        enc.clip.forward(tokens, attn_sink=sink)
        for weights in sink:
            assert np.all(weights[..., 0, :] > 0.0)
            np.testing.assert_allclose(weights[..., 0, :].sum(axis=-1), 1.0, atol=1e-9)

    def test_mask_ablation_hook_changes_output(self):
        enc = build(SMALL, seed=13)
        tokens_data = np.random.default_rng(14).normal(size=(4, 5, SMALL.dim_c))
        masked_out, _ = enc.clip.forward(T.Tensor(tokens_data), masked=True)
        open_out, _ = enc.clip.forward(T.Tensor(tokens_data), masked=False)
        assert not np.allclose(masked_out.data, open_out.data)


class TestVideoStage:
    def test_default_video_width(self):
        enc = build(ModelConfig())
        clip_embs = T.Tensor(np.random.default_rng(15).normal(size=(3, 256)))
        video = enc.video_embedding(clip_embs)
        assert video.shape == (512,)

    def test_identical_inputs_identical_rows(self):
        # With positional rows overridden to equal values, equal clip
        # embeddings are indistinguishable and must produce equal outputs.
        enc = build(SMALL, seed=16)
        enc.video.pos.data[...] = 0.0
        emb = np.random.default_rng(17).normal(size=SMALL.dim_c)
        tokens = enc.video.prepare(T.Tensor(np.stack([emb, emb])))
        _, clip_outs = enc.video.forward(tokens)
        np.testing.assert_allclose(clip_outs.data[0], clip_outs.data[1], atol=1e-12)

    def test_large_magnitude_inputs_stay_finite(self):
        enc = build(SMALL, seed=18)
        clip_embs = T.Tensor(np.random.default_rng(19).normal(size=(4, SMALL.dim_c)) * 1e3)
        video = enc.video_embedding(clip_embs)
        assert np.all(np.isfinite(video.data))

    def test_capacity_error(self):
        enc = build(SMALL, seed=20)
        too_many = T.Tensor(np.zeros((SMALL.max_clips + 1, SMALL.dim_c)))
        with pytest.raises(CapacityError):
            enc.video.prepare(too_many)


class TestEncode:
    def test_default_config_shapes(self):
        enc = build(ModelConfig())
        out = enc.encode(random_seq(64, j=9, seed=21))
        assert out.spatial.shape == (64, 9, 128)
        assert out.clip_embeddings.shape == (15, 256)
        assert out.video_embedding.shape == (512,)

    def test_deterministic(self):
        enc = build(SMALL, seed=22)
        seq = random_seq(12, j=5, seed=23)
        a = enc.encode(seq)
        b = enc.encode(seq)
        np.testing.assert_array_equal(a.video_embedding.data, b.video_embedding.data)
        np.testing.assert_array_equal(a.clip_embeddings.data, b.clip_embeddings.data)
        np.testing.assert_array_equal(a.spatial.data, b.spatial.data)

    def test_mask_ablation_changes_encoding(self):
        enc = build(SMALL, seed=24)
        seq = random_seq(12, j=5, seed=25)
        with_mask = enc.encode(seq, masked=True).video_embedding.data
        without = enc.encode(seq, masked=False).video_embedding.data
        assert not np.allclose(with_mask, without)

    def test_too_short_sequence_raises(self):
        enc = build(SMALL, seed=26)
        with pytest.raises(D.InsufficientLengthError):
            enc.encode(random_seq(5, j=5, seed=27))

    def test_end_to_end_gradient_matches_finite_differences(self):
        cfg = ModelConfig(
            layers_per_level=1, heads=2, d_k=4, dim_f=8, dim_c=16, dim_v=32,
            window=4, stride=4, max_frames=32, max_joints=8, max_clips=8,
            ffn_expansion=2,
        )
        enc = build(cfg, seed=28)
        rng = np.random.default_rng(29)
        joints = rng.normal(size=(12, 4, 3)) * 0.5
        probe = rng.normal(size=cfg.dim_v)

        def scalar(arr):
            out = enc.encode(arr)
            return float(out.video_embedding.data @ probe)

        x = T.Tensor(joints, requires_grad=True)
        spatial = enc.frame.forward(enc.frame.embed_joints(x))
        starts = D.clip_starts(12, cfg.window, cfg.stride)
        clip_embs = enc.clip_embeddings(spatial, starts)
        video = enc.video_embedding(clip_embs)
        T.backward(T.tsum(T.mul(video, T.Tensor(probe))))

        eps = 1e-5
        numeric = np.zeros_like(joints)
        flat = joints.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = scalar(joints)
            flat[i] = orig - eps
            lo = scalar(joints)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
        scale = np.maximum(np.abs(numeric), 1e-2)
        assert np.max(np.abs(x.grad - numeric) / scale) <= 1e-3
