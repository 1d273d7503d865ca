"""Three-level hierarchical transformer over skeleton sequences.

The frame stage attends across the joints of each frame independently, the
clip stage attends across all joint tokens of a sliding window under a mask
that forbids same-frame cross-joint attention, and the video stage attends
across clip embeddings. The clip and video stages each prepend a learnable
summary token whose output represents the clip or the whole sequence.

All stages accept arbitrary leading batch dimensions; attention always runs
over the second-to-last axis (tokens) of the input.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .data import SkeletonSequence, clip_starts

# Fan-in-scaled weight init keeps token content at unit scale and attention
# logits O(1); with flat small-constant init the summary-token pooling is
# numerically permutation-invariant and every order-verification objective
# stalls at its indifference value.
SUMMARY_INIT_STD = 0.02
POS_INIT_SCALE = 0.5
_SINUSOID_BASE = 200.0


def sinusoid_table(length: int, dim: int, scale: float = POS_INIT_SCALE) -> np.ndarray:
    """Sinusoidal position codes used to initialize the learnable tables.

    The ramp-like low-frequency channels give order-verification objectives a
    first-order handle on position-content pairing from the very first step.
    """
    pos = np.arange(length)[:, None]
    k = np.arange(dim)[None, :]
    angle = pos / np.power(_SINUSOID_BASE, (2 * (k // 2)) / dim)
    return scale * np.where(k % 2 == 0, np.sin(angle), np.cos(angle))


def sinusoid_table_2d(rows: int, cols: int, dim: int, scale: float = POS_INIT_SCALE) -> np.ndarray:
    """Two-axis positional codes: half the channels per axis."""
    half = dim // 2
    row_part = sinusoid_table(rows, half, scale)
    col_part = sinusoid_table(cols, dim - half, scale)
    return np.concatenate(
        [
            np.repeat(row_part[:, None, :], cols, axis=1),
            np.repeat(col_part[None, :, :], rows, axis=0),
        ],
        axis=2,
    )


class CapacityError(ValueError):
    """Input exceeds a positional-table extent fixed at construction."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

    layers_per_level: int = 2
    heads: int = 8
    d_k: int = 64
    dim_f: int = 128
    dim_c: int = 256
    dim_v: int = 512
    window: int = 8
    stride: int = 4
    max_frames: int = 512
    max_joints: int = 32
    max_clips: int = 64
    ffn_expansion: int = 4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"ModelConfig.{name} must be positive, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "ModelConfig":
        return ModelConfig(**raw)


@dataclass
class EncodedSequence:
    """Per-joint, per-clip, and whole-sequence embeddings from one forward pass."""

    spatial: T.Tensor  # (T, J, dim_f)
    clip_embeddings: T.Tensor  # (N, dim_c)
    video_embedding: T.Tensor  # (dim_v,)
    clip_start_frames: list[int]


class Linear:
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = T.Parameter(
            f"{name}.weight", rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out))
        )
        self.bias = T.Parameter(f"{name}.bias", np.zeros(d_out))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.matmul(x, self.weight.tensor) + self.bias.tensor

    def parameters(self):
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, name: str, dim: int):
        self.gain = T.Parameter(f"{name}.gain", np.ones(dim))
        self.bias = T.Parameter(f"{name}.bias", np.zeros(dim))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layer_norm(x, self.gain.tensor, self.bias.tensor)

    def parameters(self):
        return [self.gain, self.bias]


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections and output merge.

    When ``attn_sink`` is given, the post-softmax weights of each call are
    appended to it as numpy arrays of shape (..., heads, n, n).
    """

    def __init__(self, name: str, dim: int, heads: int, d_k: int, rng):
        self.heads = heads
        self.d_k = d_k
        self.query = Linear(f"{name}.query", dim, heads * d_k, rng)
        self.key = Linear(f"{name}.key", dim, heads * d_k, rng)
        self.value = Linear(f"{name}.value", dim, heads * d_k, rng)
        self.merge = Linear(f"{name}.merge", heads * d_k, dim, rng)

    def _split_heads(self, x: T.Tensor, n: int) -> T.Tensor:
        lead = x.shape[:-2]
        x = T.reshape(x, lead + (n, self.heads, self.d_k))
        axes = tuple(range(len(lead))) + (x.ndim - 3 + 1, x.ndim - 3, x.ndim - 1)
        return T.transpose(x, axes)  # (..., heads, n, d_k)

    def __call__(self, x: T.Tensor, mask=None, attn_sink: list | None = None) -> T.Tensor:
        n = x.shape[-2]
        q = self._split_heads(self.query(x), n)
        k = self._split_heads(self.key(x), n)
        v = self._split_heads(self.value(x), n)
        scores = T.matmul(q, k.swap_last_axes()) * (1.0 / np.sqrt(self.d_k))
        weights = T.masked_softmax(scores, mask=mask)
        if attn_sink is not None:
            attn_sink.append(weights.data.copy())
        ctx = T.matmul(weights, v)  # (..., heads, n, d_k)
        lead = ctx.shape[:-3]
        axes = tuple(range(len(lead))) + (ctx.ndim - 2, ctx.ndim - 3, ctx.ndim - 1)
        ctx = T.transpose(ctx, axes)
        ctx = T.reshape(ctx, lead + (n, self.heads * self.d_k))
        return self.merge(ctx)

    def parameters(self):
        return (
            self.query.parameters()
            + self.key.parameters()
            + self.value.parameters()
            + self.merge.parameters()
        )


class TransformerBlock:
    """Pre-norm residual block: attention then a GELU feed-forward network."""

    def __init__(self, name: str, dim: int, heads: int, d_k: int, expansion: int, rng):
        self.norm_attn = LayerNorm(f"{name}.norm_attn", dim)
        self.attn = MultiHeadAttention(f"{name}.attn", dim, heads, d_k, rng)
        self.norm_ffn = LayerNorm(f"{name}.norm_ffn", dim)
        self.ffn_in = Linear(f"{name}.ffn_in", dim, expansion * dim, rng)
        self.ffn_out = Linear(f"{name}.ffn_out", expansion * dim, dim, rng)

    def __call__(self, x: T.Tensor, mask=None, attn_sink=None) -> T.Tensor:
        x = x + self.attn(self.norm_attn(x), mask=mask, attn_sink=attn_sink)
        return x + self.ffn_out(T.gelu(self.ffn_in(self.norm_ffn(x))))

    def parameters(self):
        return (
            self.norm_attn.parameters()
            + self.attn.parameters()
            + self.norm_ffn.parameters()
            + self.ffn_in.parameters()
            + self.ffn_out.parameters()
        )


def _stack_blocks(name, count, dim, heads, d_k, expansion, rng):
    return [
        TransformerBlock(f"{name}.blocks.{i}", dim, heads, d_k, expansion, rng)
        for i in range(count)
    ]


class FrameTransformer:
    """Spatial stage: per-joint embedding plus attention within each frame."""

    def __init__(self, name: str, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.embed = Linear(f"{name}.embed", 3, cfg.dim_f, rng)
        # 1D table indexed by joint id only; the stage never mixes frames.
        self.joint_pos = T.Parameter(
            f"{name}.joint_pos", sinusoid_table(cfg.max_joints, cfg.dim_f)
        )
        self.blocks = _stack_blocks(
            name, cfg.layers_per_level, cfg.dim_f, cfg.heads, cfg.d_k, cfg.ffn_expansion, rng
        )
        # Pre-norm stacks end with a normalization so the next stage sees
        # unit-scale features.
        self.final_norm = LayerNorm(f"{name}.final_norm", cfg.dim_f)

    def embed_joints(self, joints: np.ndarray | T.Tensor) -> T.Tensor:
        """Map (..., J, 3) coordinates to (..., J, dim_f) positional features.

        Accepts a Tensor so gradients can flow back to the raw coordinates.
        """
        x = joints if isinstance(joints, T.Tensor) else T.Tensor(np.asarray(joints, dtype=np.float64))
        n_joints = x.shape[-2]
        if n_joints > self.cfg.max_joints:
            raise CapacityError(
                f"{n_joints} joints exceeds positional capacity {self.cfg.max_joints}"
            )
        feats = T.gelu(self.embed(x))
        return feats + self.joint_pos.tensor[:n_joints]

    def forward(self, feats: T.Tensor, attn_sink=None) -> T.Tensor:
        """Apply the spatial blocks; attention never crosses frames."""
        for block in self.blocks:
            feats = block(feats, attn_sink=attn_sink)
        return self.final_norm(feats)

    def parameters(self):
        params = self.embed.parameters() + [self.joint_pos]
        for block in self.blocks:
            params += block.parameters()
        return params + self.final_norm.parameters()


def clip_attention_mask(window: int, n_joints: int) -> np.ndarray:
    """Allowed-attention mask over [summary] + window*joints tokens.

    Two distinct joint tokens of the same frame may not attend to each other;
    a token always sees itself, every token of other frames, and the summary
    token, and the summary token sees everything.
    """
    n = 1 + window * n_joints
    frame_of = np.empty(n, dtype=int)
    joint_of = np.empty(n, dtype=int)
    frame_of[0] = -1  # summary token sits outside every frame
    joint_of[0] = -1
    token = 1
    for f in range(window):
        for j in range(n_joints):
            frame_of[token] = f
            joint_of[token] = j
            token += 1
    same_frame = frame_of[:, None] == frame_of[None, :]
    same_token = np.eye(n, dtype=bool)
    allowed = ~(same_frame & ~same_token)
    allowed[0, :] = True
    allowed[:, 0] = True
    return allowed


class ClipTransformer:
    """Short-term temporal stage over the joint tokens of one window."""

    def __init__(self, name: str, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.input_proj = Linear(f"{name}.input_proj", cfg.dim_f, cfg.dim_c, rng)
        # 2D table indexed by (frame within clip, joint id).
        self.pos = T.Parameter(
            f"{name}.pos", sinusoid_table_2d(cfg.window, cfg.max_joints, cfg.dim_c)
        )
        self.summary = T.Parameter(f"{name}.summary", rng.normal(0.0, SUMMARY_INIT_STD, cfg.dim_c))
        self.blocks = _stack_blocks(
            name, cfg.layers_per_level, cfg.dim_c, cfg.heads, cfg.d_k, cfg.ffn_expansion, rng
        )
        self.final_norm = LayerNorm(f"{name}.final_norm", cfg.dim_c)
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    def prepare(self, window_feats: T.Tensor) -> T.Tensor:
        """Project frame-stage features to clip width and add 2D positions."""
        w, j = window_feats.shape[-3], window_feats.shape[-2]
        if w > self.cfg.window:
            raise CapacityError(f"window {w} exceeds configured width {self.cfg.window}")
        if j > self.cfg.max_joints:
            raise CapacityError(f"{j} joints exceeds positional capacity {self.cfg.max_joints}")
        return self.input_proj(window_feats) + self.pos.tensor[:w, :j]

    def forward(self, tokens: T.Tensor, masked: bool = True, attn_sink=None):
        """Run the masked blocks; returns (summary_out, token_outs).

        ``tokens`` is (..., W, J, dim_c); ``masked=False`` is a test hook that
        drops the same-frame exclusion.
        """
        lead = tokens.shape[:-3]
        w, j, dim = tokens.shape[-3], tokens.shape[-2], tokens.shape[-1]
        flat = T.reshape(tokens, lead + (w * j, dim))
        summary = self.summary.tensor.reshape(1, dim)
        if lead:
            summary = T.mul(summary, T.Tensor(np.ones(lead + (1, 1))))
        seq = T.concat([summary, flat], axis=-2)
        mask = None
        if masked:
            key = (w, j)
            if key not in self._mask_cache:
                self._mask_cache[key] = clip_attention_mask(w, j)
            mask = self._mask_cache[key]
        for block in self.blocks:
            seq = block(seq, mask=mask, attn_sink=attn_sink)
        seq = self.final_norm(seq)
        summary_out = seq[(*([slice(None)] * len(lead)), 0)]
        token_outs = T.reshape(seq[(*([slice(None)] * len(lead)), slice(1, None))], lead + (w, j, dim))
        return summary_out, token_outs

    def parameters(self):
        params = self.input_proj.parameters() + [self.pos, self.summary]
        for block in self.blocks:
            params += block.parameters()
        return params + self.final_norm.parameters()


class VideoTransformer:
    """Long-term stage: standard encoder blocks over clip embeddings."""

    def __init__(self, name: str, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.input_proj = Linear(f"{name}.input_proj", cfg.dim_c, cfg.dim_v, rng)
        self.pos = T.Parameter(f"{name}.pos", sinusoid_table(cfg.max_clips, cfg.dim_v))
        self.summary = T.Parameter(f"{name}.summary", rng.normal(0.0, SUMMARY_INIT_STD, cfg.dim_v))
        self.blocks = _stack_blocks(
            name, cfg.layers_per_level, cfg.dim_v, cfg.heads, cfg.d_k, cfg.ffn_expansion, rng
        )
        self.final_norm = LayerNorm(f"{name}.final_norm", cfg.dim_v)

    def prepare(self, clip_embeddings: T.Tensor) -> T.Tensor:
        n = clip_embeddings.shape[-2]
        if n > self.cfg.max_clips:
            raise CapacityError(f"{n} clips exceeds positional capacity {self.cfg.max_clips}")
        return self.input_proj(clip_embeddings) + self.pos.tensor[:n]

    def forward(self, tokens: T.Tensor, attn_sink=None):
        """Returns (video_embedding, clip_outs) for (..., N, dim_v) inputs."""
        lead = tokens.shape[:-2]
        dim = tokens.shape[-1]
        summary = self.summary.tensor.reshape(1, dim)
        if lead:
            summary = T.mul(summary, T.Tensor(np.ones(lead + (1, 1))))
        seq = T.concat([summary, tokens], axis=-2)
        for block in self.blocks:
            seq = block(seq, attn_sink=attn_sink)
        seq = self.final_norm(seq)
        video = seq[(*([slice(None)] * len(lead)), 0)]
        clip_outs = seq[(*([slice(None)] * len(lead)), slice(1, None))]
        return video, clip_outs

    def parameters(self):
        params = self.input_proj.parameters() + [self.pos, self.summary]
        for block in self.blocks:
            params += block.parameters()
        return params + self.final_norm.parameters()


def zero_positional_tables(encoder: "HierarchicalEncoder") -> None:
    """Test hook: remove positional identity so stages see tokens as sets."""
    encoder.frame.joint_pos.data[...] = 0.0
    encoder.clip.pos.data[...] = 0.0
    encoder.video.pos.data[...] = 0.0


class HierarchicalEncoder:
    """Frame -> clip -> video pipeline with a single parameter namespace."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.frame = FrameTransformer("frame", cfg, rng)
        self.clip = ClipTransformer("clip", cfg, rng)
        self.video = VideoTransformer("video", cfg, rng)
        T.check_unique_names(self.parameters())

    def parameters(self) -> list[T.Parameter]:
        return self.frame.parameters() + self.clip.parameters() + self.video.parameters()

    def spatial_features(self, joints, attn_sink=None) -> T.Tensor:
        """Frame-stage output for raw (..., T, J, 3) coordinates."""
        n_frames = joints.shape[-3]
        if n_frames > self.cfg.max_frames:
            raise CapacityError(f"{n_frames} frames exceeds capacity {self.cfg.max_frames}")
        return self.frame.forward(self.frame.embed_joints(joints), attn_sink=attn_sink)

    def windowed_features(self, spatial: T.Tensor, starts: list[int]) -> T.Tensor:
        """Gather (..., N, W, J, dim_f) windows of frame-stage features."""
        idx = np.stack([np.arange(s, s + self.cfg.window) for s in starts])
        if spatial.ndim == 3:
            return spatial[idx]
        lead = spatial.ndim - 3
        return spatial[(*([slice(None)] * lead), idx)]

    def clip_embeddings(self, spatial: T.Tensor, starts, masked=True, attn_sink=None) -> T.Tensor:
        windows = self.windowed_features(spatial, starts)
        tokens = self.clip.prepare(windows)
        summary, _ = self.clip.forward(tokens, masked=masked, attn_sink=attn_sink)
        return summary  # (N, dim_c)

    def video_embedding(self, clip_embs: T.Tensor, attn_sink=None) -> T.Tensor:
        video, _ = self.video.forward(self.video.prepare(clip_embs), attn_sink=attn_sink)
        return video

    def encode(
        self,
        seq: SkeletonSequence | np.ndarray,
        masked: bool = True,
        attn_sink=None,
    ) -> EncodedSequence:
        """Full deterministic pass; requires the sequence to yield >= 2 clips."""
        joints = seq.joints if isinstance(seq, SkeletonSequence) else np.asarray(seq)
        starts = clip_starts(joints.shape[0], self.cfg.window, self.cfg.stride)
        spatial = self.spatial_features(joints, attn_sink=attn_sink)
        clip_embs = self.clip_embeddings(spatial, starts, masked=masked, attn_sink=attn_sink)
        video = self.video_embedding(clip_embs, attn_sink=attn_sink)
        return EncodedSequence(
            spatial=spatial,
            clip_embeddings=clip_embs,
            video_embedding=video,
            clip_start_frames=starts,
        )

    def encode_batch(self, joints_batch, masked: bool = True):
        """Encode same-length sequences together: one pass per stage.

        ``joints_batch`` is (B, T, J, 3); returns (spatial (B, T, J, dim_f),
        clip embeddings (B, N, dim_c), video embeddings (B, dim_v)).
        """
        joints = (
            joints_batch
            if isinstance(joints_batch, T.Tensor)
            else T.Tensor(np.asarray(joints_batch, dtype=np.float64))
        )
        starts = clip_starts(joints.shape[1], self.cfg.window, self.cfg.stride)
        spatial = self.spatial_features(joints)
        windows = self.windowed_features(spatial, starts)
        summary, _ = self.clip.forward(self.clip.prepare(windows), masked=masked)
        video, _ = self.video.forward(self.video.prepare(summary))
        return spatial, summary, video
