"""Pairwise matching decoder: one transformer decoder layer scoring a pair.

The image CLS + patch features form the query sequence; the video patch
features (no CLS) are keys and values of the cross-attention. Sub-layers
use the classic add-then-normalize arrangement. No position embedding is
added to the keys, so the match logit is invariant to video patch order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, concat
from .nn import (AttentionConfig, FeedForward, LayerNorm, Module,
                 MultiHeadAttention, ShapeError, truncated_normal)
from .encoder import ViewFeatures


@dataclass
class DecodeResult:
    """Decoded CLS embedding, match logit, and cross-attention map.

    ``attn`` has shape [8, N, M] (or [P, 8, N, M] batched): per-head
    weights of the N image patch queries over the M video patch keys. The
    CLS query row is excluded. Rows sum to 1.
    """

    x_cls: Tensor
    logit: Tensor
    attn: Tensor


class MatchDecoder(Module):
    """Self-attention + cross-attention + feed-forward, post-norm."""

    def __init__(self, rng: np.random.Generator, model_dim: int, heads: int = 8,
                 mlp_ratio: int = 4):
        cfg = AttentionConfig(heads=heads, model_dim=model_dim)
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(rng, cfg)
        self.norm1 = LayerNorm(model_dim)
        self.cross_attn = MultiHeadAttention(rng, cfg)
        self.norm2 = LayerNorm(model_dim)
        self.mlp = FeedForward(rng, model_dim, model_dim * mlp_ratio)
        self.norm3 = LayerNorm(model_dim)
        self.score_vec = Parameter(truncated_normal(rng, (model_dim,)))

    # ---- core ----

    def decode_tokens(self, queries: Tensor, keys: Tensor) -> DecodeResult:
        """Decode ``[P, N+1, d]`` query tokens against ``[P, M, d]`` keys."""
        if keys.shape[-2] == 0:
            raise ShapeError("decode: empty video patch sequence")
        sa, _ = self.self_attn(queries, queries, queries)
        x = self.norm1(queries + sa)
        ca, attn = self.cross_attn(x, keys, keys)
        x = self.norm2(x + ca)
        x = self.norm3(x + self.mlp(x))
        x_cls = x[:, 0, :]
        logit = match_score(x_cls, self.score_vec)
        return DecodeResult(x_cls=x_cls, logit=logit, attn=attn[:, :, 1:, :])

    def decode_pair(self, img: ViewFeatures, vid: ViewFeatures) -> DecodeResult:
        """Score one (image, clip) pair and expose its attention map."""
        if img.view_kind != "image" or vid.view_kind != "video":
            raise ShapeError("decode_pair expects (image, video) views")
        d = img.cls.shape[-1]
        queries = concat([img.cls.reshape(1, 1, d),
                          img.patches.reshape((1,) + img.patches.shape)], axis=1)
        keys = vid.patches.reshape((1,) + vid.patches.shape)
        res = self.decode_tokens(queries, keys)
        n, m = img.patches.shape[0], vid.patches.shape[0]
        return DecodeResult(x_cls=res.x_cls.reshape(d),
                            logit=res.logit.reshape(()),
                            attn=res.attn.reshape(self.cfg.heads, n, m))

    def decode_pairs(self, img_tokens: Tensor, vid_patches: Tensor) -> DecodeResult:
        """Batched decode: ``img_tokens [P, N+1, d]``, ``vid_patches [P, M, d]``."""
        return self.decode_tokens(img_tokens, vid_patches)


def match_score(x_cls: Tensor, v: Tensor) -> Tensor:
    """Bias-free dot product of the decoded CLS with the scoring vector."""
    if x_cls.shape[-1] != v.shape[0]:
        raise ShapeError("match_score: dimension mismatch")
    return (x_cls * v).sum(axis=-1)


def export_attention(result: DecodeResult, head_reduce: str = "mean") -> np.ndarray:
    """Detach the cross-attention map, optionally reducing over heads.

    ``head_reduce``: "mean" or "max" give [N, M]; "per-head" returns the
    raw [8, N, M] map unchanged.
    """
    attn = result.attn.data
    if head_reduce == "per-head":
        return attn.copy()
    if head_reduce == "mean":
        return attn.mean(axis=0)
    if head_reduce == "max":
        return attn.max(axis=0)
    raise ValueError(f"unknown head_reduce {head_reduce!r}")


def split_frames(attn_map: np.ndarray, frames: int) -> np.ndarray:
    """Reshape an [N, M] map to [N, F, N_frame] for frame-wise heatmaps."""
    n, m = attn_map.shape
    if m % frames != 0:
        raise ShapeError(f"attention width {m} not divisible by {frames} frames")
    return attn_map.reshape(n, frames, m // frames)
