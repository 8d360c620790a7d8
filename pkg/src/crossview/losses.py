"""Training losses: symmetric contrastive, pairwise matching, weighted total.

The contrastive loss works on the B x B similarity matrix of unit-norm
global embeddings. The matching loss decodes each anchor against its
positive plus a small set of sampled negatives, in both directions, and
applies the same stabilized cross-entropy to the match logits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tensor, concat, gather_rows, logsumexp
from .decoder import DecodeResult, MatchDecoder

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.01
DEFAULT_NUM_NEGATIVES = 3


class DegenerateBatchError(ValueError):
    """The batch is too small for in-batch contrastive learning."""


@dataclass
class SimilarityMatrix:
    """Temperature-scaled global similarities; entry [i, j] pairs image i
    with clip j. Pre-temperature entries of unit-norm embeddings lie in
    [-1, 1]."""

    values: Tensor
    temperature: float = DEFAULT_TEMPERATURE


@dataclass
class NegativeSet:
    """Per-anchor sampled negative indices (positives excluded).

    ``clip_indices[i]`` lists negative clips for image anchor i;
    ``image_indices[j]`` lists negative images for clip anchor j. Scores
    carry the similarity of each chosen negative.
    """

    clip_indices: np.ndarray
    image_indices: np.ndarray
    clip_scores: np.ndarray
    image_scores: np.ndarray

    @property
    def num_negatives(self) -> int:
        return self.clip_indices.shape[1]


def similarity_matrix(image_embeds: Tensor, video_embeds: Tensor,
                      temperature: float = DEFAULT_TEMPERATURE) -> SimilarityMatrix:
    """Dot products of the two embedding sets, divided by the temperature."""
    values = (image_embeds @ video_embeds.transpose(1, 0)) * (1.0 / temperature)
    return SimilarityMatrix(values=values, temperature=temperature)


def icl_loss(sim: SimilarityMatrix) -> Tensor:
    """Symmetric InfoNCE over the similarity matrix, diagonal as positives.

    Mean of the image-to-clip and clip-to-image cross-entropies,
    log-sum-exp stabilized. Equals log B when all entries are equal.
    """
    b = sim.values.shape[0]
    if sim.values.shape != (b, b) or b < 2:
        raise DegenerateBatchError(
            f"need a square similarity matrix with B >= 2, got {sim.values.shape}")
    idx = np.arange(b)
    diag = sim.values[idx, idx]
    i2v = logsumexp(sim.values, axis=1) - diag
    v2i = logsumexp(sim.values, axis=0) - diag
    return (i2v.mean() + v2i.mean()) * 0.5


def sample_hard_negatives(sim: SimilarityMatrix, n_neg: int = DEFAULT_NUM_NEGATIVES,
                          strategy: str = "hard",
                          rng: np.random.Generator | None = None) -> NegativeSet:
    """Pick negatives per anchor from the batch, excluding the positive.

    "hard" takes the highest-similarity non-positives (ties broken by
    lower index); "uniform" samples without replacement. ``n_neg`` larger
    than B-1 is clamped with a warning.
    """
    values = sim.values.data
    b = values.shape[0]
    if n_neg > b - 1:
        log.warning("n_neg=%d clamped to B-1=%d", n_neg, b - 1)
        n_neg = b - 1
    if n_neg < 1:
        raise DegenerateBatchError("need at least one negative per anchor")

    def pick(scores: np.ndarray, anchor: int) -> np.ndarray:
        masked = scores.copy()
        masked[anchor] = -np.inf
        if strategy == "hard":
            order = np.argsort(-masked, kind="stable")
            return order[:n_neg]
        if strategy == "uniform":
            if rng is None:
                raise ValueError("uniform sampling needs an rng")
            pool = np.delete(np.arange(b), anchor)
            return rng.choice(pool, size=n_neg, replace=False)
        raise ValueError(f"unknown strategy {strategy!r}")

    clip_idx = np.stack([pick(values[i, :], i) for i in range(b)])
    img_idx = np.stack([pick(values[:, j], j) for j in range(b)])
    clip_scores = np.take_along_axis(values, clip_idx, axis=1)
    img_scores = np.take_along_axis(values.T, img_idx, axis=1)
    return NegativeSet(clip_indices=clip_idx, image_indices=img_idx,
                       clip_scores=clip_scores, image_scores=img_scores)


@dataclass
class PairDecodes:
    """Decoded logits for the matching loss plus the positive-pair results.

    Column 0 of each logit block is the positive; the remaining columns
    follow the order of the corresponding ``NegativeSet`` rows.
    """

    positives: DecodeResult
    logits_img_anchor: Tensor  # [B, 1 + n_neg]
    logits_clip_anchor: Tensor  # [B, 1 + n_neg]


def decode_with_negatives(decoder: MatchDecoder, img_queries: Tensor,
                          vid_patches: Tensor, negatives: NegativeSet) -> PairDecodes:
    """Decode every (anchor, candidate) combination once, batched.

    ``img_queries [B, N+1, d]`` hold CLS+patch tokens per image;
    ``vid_patches [B, M, d]`` per clip. Positives are decoded a single
    time and shared by both directions.
    """
    b, k = negatives.clip_indices.shape
    idx = np.arange(b)
    img_sel = np.concatenate([idx,                                   # positives
                              np.repeat(idx, k),                     # i -> neg clips
                              negatives.image_indices.reshape(-1)])  # neg imgs -> v
    vid_sel = np.concatenate([idx,
                              negatives.clip_indices.reshape(-1),
                              np.repeat(idx, k)])
    res = decoder.decode_pairs(gather_rows(img_queries, img_sel),
                               gather_rows(vid_patches, vid_sel))
    pos = DecodeResult(x_cls=res.x_cls[:b], logit=res.logit[:b],
                       attn=res.attn[:b])
    neg_i2v = res.logit[b:b + b * k].reshape(b, k)
    neg_v2i = res.logit[b + b * k:].reshape(b, k)
    pos_col = pos.logit.reshape(b, 1)
    return PairDecodes(
        positives=pos,
        logits_img_anchor=concat([pos_col, neg_i2v], axis=1),
        logits_clip_anchor=concat([pos_col, neg_v2i], axis=1),
    )


def matching_loss(decodes: PairDecodes) -> Tensor:
    """Symmetric cross-entropy over match logits, positive at column 0."""
    li = decodes.logits_img_anchor
    lv = decodes.logits_clip_anchor
    loss_i = (logsumexp(li, axis=1) - li[:, 0]).mean()
    loss_v = (logsumexp(lv, axis=1) - lv[:, 0]).mean()
    return (loss_i + loss_v) * 0.5


def total_loss(contrastive: Tensor, matching: Tensor, reconstruction: Tensor,
               alpha: float = 0.1) -> Tensor:
    """Weighted objective: contrastive + matching + alpha * reconstruction."""
    for name, comp in (("contrastive", contrastive), ("matching", matching),
                       ("reconstruction", reconstruction)):
        if not np.all(np.isfinite(comp.data)):
            raise NonFiniteError(f"{name} loss is non-finite")
    return contrastive + matching + reconstruction * alpha
