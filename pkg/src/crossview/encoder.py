"""Shared-weight patch transformer encoding both product views.

A single parameter set encodes shop images and clip frames: frames pass
through the same patch embedding and blocks independently, then their
patch features are concatenated and their CLS outputs averaged. Blocks
are pre-norm (x + sublayer(norm(x))) with no trailing norm, so a
zero-layer stack is the identity on its input tokens.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, concat, l2_normalize
from .nn import (AttentionConfig, FeedForward, LayerNorm, Linear, Module,
                 MultiHeadAttention, ShapeError, linear_forward,
                 truncated_normal)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry of the patch transformer; defaults are desk-scale."""

    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    layers: int = 2
    model_dim: int = 32
    heads: int = 4
    frames: int = 4
    proj_dim: int = 16
    mlp_ratio: int = 4
    use_pos_emb: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError("image_size must be divisible by patch_size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def video_patches(self) -> int:
        return self.num_patches * self.frames

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


@dataclass
class ViewFeatures:
    """Encoder output for one view: a CLS embedding plus patch features.

    ``patches`` has N rows for an image view and M = N*F rows for a video
    view; a leading batch axis is allowed on both fields.
    """

    cls: Tensor
    patches: Tensor
    view_kind: str  # "image" | "video"


@dataclass
class GlobalEmbedding:
    """Unit-norm low-dimensional projection of a view's CLS embedding."""

    vec: Tensor


class TransformerBlock(Module):
    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        attn_cfg = AttentionConfig(heads=cfg.heads, model_dim=cfg.model_dim)
        self.norm1 = LayerNorm(cfg.model_dim)
        self.attn = MultiHeadAttention(rng, attn_cfg)
        self.norm2 = LayerNorm(cfg.model_dim)
        self.mlp = FeedForward(rng, cfg.model_dim, cfg.model_dim * cfg.mlp_ratio)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x


class VisualEncoder(Module):
    """Patch embedding + transformer stack + per-view global projections."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        self.patch_proj = Linear(rng, cfg.patch_dim, d)
        self.pos_emb = Parameter(truncated_normal(rng, (cfg.num_patches, d)))
        self.cls_token = Parameter(truncated_normal(rng, (d,)))
        self.blocks = [TransformerBlock(rng, cfg) for _ in range(cfg.layers)]
        self.proj_image = Linear(rng, d, cfg.proj_dim)
        self.proj_video = Linear(rng, d, cfg.proj_dim)

    # ---- tokenization ----

    def patchify(self, image: Tensor) -> Tensor:
        """Split ``[C, H, W]`` (or batched ``[P, C, H, W]``) into projected
        patch tokens ``[..., N, d]`` with position embeddings added."""
        cfg = self.cfg
        squeeze = image.ndim == 3
        if squeeze:
            image = image.reshape((1,) + image.shape)
        p, c, hgt, wid = image.shape
        if hgt != cfg.image_size or wid != cfg.image_size or c != cfg.channels:
            raise ShapeError(
                f"patchify: expected [{cfg.channels},{cfg.image_size},{cfg.image_size}]"
                f" image, got {image.shape[1:]}")
        g, ps = cfg.grid, cfg.patch_size
        x = image.reshape(p, c, g, ps, g, ps)
        x = x.transpose(0, 2, 4, 1, 3, 5)  # [P, g, g, C, ps, ps]
        x = x.reshape(p, cfg.num_patches, cfg.patch_dim)
        tokens = linear_forward(x, self.patch_proj.weight, self.patch_proj.bias)
        if cfg.use_pos_emb:
            tokens = tokens + self.pos_emb
        return tokens.reshape(cfg.num_patches, cfg.model_dim) if squeeze else tokens

    # ---- encoding ----

    def encode_view(self, tokens: Tensor, view_kind: str = "image") -> ViewFeatures:
        """Prepend the CLS token, run the block stack, split CLS/patches."""
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens.reshape((1,) + tokens.shape)
        p, n, d = tokens.shape
        if d != self.cfg.model_dim:
            raise ShapeError(f"encode_view: token dim {d} != {self.cfg.model_dim}")
        cls_row = self.cls_token.reshape(1, 1, d) + Tensor(np.zeros((p, 1, d)))
        x = concat([cls_row, tokens], axis=1)
        for block in self.blocks:
            x = block(x)
        cls = x[:, 0, :]
        patches = x[:, 1:, :]
        if squeeze:
            return ViewFeatures(cls.reshape(d), patches.reshape(n, d), view_kind)
        return ViewFeatures(cls, patches, view_kind)

    def encode_image(self, image: Tensor) -> ViewFeatures:
        return self.encode_view(self.patchify(image), "image")

    def encode_video(self, frames: Tensor) -> ViewFeatures:
        """Encode ``[F, C, H, W]`` (or ``[P, F, C, H, W]``) frame stacks.

        Patch features of the F frames are concatenated (M = N*F rows) and
        the CLS embedding is the arithmetic mean of the per-frame CLS
        outputs. A single frame reduces exactly to ``encode_view``.
        """
        squeeze = frames.ndim == 4
        if squeeze:
            frames = frames.reshape((1,) + frames.shape)
        p, f = frames.shape[0], frames.shape[1]
        if f == 0:
            raise ShapeError("encode_video: empty clip")
        cfg = self.cfg
        flat = frames.reshape((p * f,) + frames.shape[2:])
        feats = self.encode_view(self.patchify(flat), "video")
        n, d = cfg.num_patches, cfg.model_dim
        patches = feats.patches.reshape(p, f * n, d)
        cls = feats.cls.reshape(p, f, d).mean(axis=1)
        if squeeze:
            return ViewFeatures(cls.reshape(d), patches.reshape(f * n, d), "video")
        return ViewFeatures(cls, patches, "video")

    # ---- projection heads ----

    def project_global(self, cls: Tensor, view_kind: str) -> GlobalEmbedding:
        """Map a CLS embedding to the unit-norm retrieval embedding.

        Image and video views use separate linear heads.
        """
        head = self.proj_image if view_kind == "image" else self.proj_video
        raw = head(cls)
        norms = np.sqrt((raw.data ** 2).sum(axis=-1))
        if np.any(norms < 1e-12):
            log.warning("project_global: near-zero embedding before normalization")
        return GlobalEmbedding(l2_normalize(raw, axis=-1))

    def astype(self, dtype) -> None:
        """Cast all parameters in place (float32 for inference paths)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
