"""Two-stage retrieval: global shortlist, decoder re-rank, rank-k reports.

Stage 1 ranks the gallery by dot product of unit-norm global embeddings;
stage 2 re-scores the top-K candidates with the matching decoder. Text
similarity, when present, is added to the final candidate scores. Reports
carry overall rank-k accuracy plus a rank-1 breakdown per variation cell.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .data import PairDataset, PairRecord, crop_to_box, load_image
from .encoder import ViewFeatures
from .model import CrossViewModel

log = logging.getLogger(__name__)


class GalleryError(ValueError):
    """Gallery construction or lookup is inconsistent."""


@dataclass
class GalleryIndex:
    """Encoded gallery: unit-norm embeddings plus cached view features."""

    ids: list[str]
    embeddings: np.ndarray  # [G, proj_dim], unit rows
    features: dict[str, ViewFeatures]
    text: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise GalleryError("duplicate gallery ids")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise GalleryError("gallery embeddings must be unit-norm")


@dataclass
class RetrievalReport:
    """Rank-k accuracies overall and per variation subset."""

    rank_k: dict[int, float]
    per_variation: dict[str, dict[str, float]]
    per_variation_counts: dict[str, dict[str, int]]
    missed_queries: int
    num_queries: int
    shortlist_k: int
    stage1_recall: float

    def to_json(self) -> str:
        return json.dumps({
            "rank_k": {str(k): v for k, v in self.rank_k.items()},
            "per_variation": self.per_variation,
            "per_variation_counts": self.per_variation_counts,
            "missed_queries": self.missed_queries,
            "num_queries": self.num_queries,
            "shortlist_k": self.shortlist_k,
            "stage1_recall": self.stage1_recall,
        }, indent=2, sort_keys=True)

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["subset", "cell", "rank_1", "rank_5", "rank_10", "count"])
            w.writerow(["overall", "", *(self.rank_k.get(k, "") for k in (1, 5, 10)),
                        self.num_queries])
            for axis, cells in sorted(self.per_variation.items()):
                for cell, r1 in sorted(cells.items()):
                    w.writerow([axis, cell, r1, "", "",
                                self.per_variation_counts[axis][cell]])


def build_gallery(model: CrossViewModel, images: list[tuple[str, np.ndarray]],
                  text: dict[str, np.ndarray] | None = None) -> GalleryIndex:
    """Encode and project every gallery image with frozen weights."""
    if not images:
        raise GalleryError("empty gallery")
    ids = [i for i, _ in images]
    if len(set(ids)) != len(ids):
        raise GalleryError("duplicate gallery ids")
    feats: dict[str, ViewFeatures] = {}
    rows = []
    with no_grad():
        batch = Tensor(np.stack([img for _, img in images]))
        vf = model.encoder.encode_image(batch)
        emb = model.encoder.project_global(vf.cls, "image").vec.data
    for i, gid in enumerate(ids):
        feats[gid] = ViewFeatures(cls=Tensor(vf.cls.data[i]),
                                  patches=Tensor(vf.patches.data[i]),
                                  view_kind="image")
        rows.append(emb[i])
    return GalleryIndex(ids=ids, embeddings=np.stack(rows), features=feats,
                        text=dict(text or {}))


def shortlist(query_embedding: np.ndarray, index: GalleryIndex,
              k: int) -> list[tuple[str, float]]:
    """Top-k gallery ids by global similarity; ties broken by lexical id."""
    if k > len(index.ids):
        raise GalleryError(f"shortlist k={k} exceeds gallery size {len(index.ids)}")
    scores = index.embeddings @ np.asarray(query_embedding)
    order = sorted(range(len(index.ids)),
                   key=lambda i: (-scores[i], index.ids[i]))[:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def rerank(model: CrossViewModel, query: ViewFeatures,
           candidate_ids: list[str], index: GalleryIndex) -> list[tuple[str, float]]:
    """Re-score candidates with the matching decoder, descending logit."""
    for cid in candidate_ids:
        if cid not in index.features:
            raise GalleryError(f"candidate {cid} not in gallery")
    with no_grad():
        img_tokens = []
        vid_patches = []
        for cid in candidate_ids:
            f = index.features[cid]
            img_tokens.append(np.concatenate([f.cls.data[None, :], f.patches.data]))
            vid_patches.append(query.patches.data)
        res = model.decoder.decode_pairs(Tensor(np.stack(img_tokens)),
                                         Tensor(np.stack(vid_patches)))
        logits = res.logit.data
    scored = sorted(zip(candidate_ids, logits), key=lambda t: (-t[1], t[0]))
    return [(cid, float(s)) for cid, s in scored]


def fuse_text_similarity(visual_score: float, text_clip: np.ndarray | None,
                         text_image: np.ndarray | None) -> float:
    """Add the dot product of normalized text embeddings to a visual score.

    Missing embeddings leave the score unchanged; non-unit vectors are
    normalized with a warning.
    """
    if text_clip is None or text_image is None:
        return visual_score
    tc = np.asarray(text_clip, dtype=np.float64)
    ti = np.asarray(text_image, dtype=np.float64)
    for name, v in (("clip", tc), ("image", ti)):
        n = np.linalg.norm(v)
        if abs(n - 1.0) > 1e-6:
            log.warning("fuse_text_similarity: %s text embedding renormalized", name)
    tc = tc / np.linalg.norm(tc)
    ti = ti / np.linalg.norm(ti)
    return visual_score + float(tc @ ti)


def rank_k_accuracy(rankings: list[list[str]], ground_truth: list[str],
                    ks: tuple[int, ...] = (1, 5, 10),
                    tags: list[dict[str, str]] | None = None,
                    missed: list[bool] | None = None,
                    gallery_ids: set[str] | None = None,
                    shortlist_k: int = 0,
                    stage1_recall: float = 1.0) -> RetrievalReport:
    """Fraction of queries whose ground truth appears in the top k.

    A query flagged missed counts as a failure at every k. Ground-truth
    ids absent from the gallery are a configuration error.
    """
    n = len(ground_truth)
    if len(rankings) != n:
        raise GalleryError("rankings and ground truth length mismatch")
    missed = missed or [False] * n
    if gallery_ids is not None:
        for gt in ground_truth:
            if gt not in gallery_ids:
                raise GalleryError(f"ground-truth id {gt} absent from gallery")
    hits_at = {k: 0 for k in ks}
    per_cell_hits: dict[str, dict[str, list[int]]] = {}
    for i, (ranking, gt) in enumerate(zip(rankings, ground_truth)):
        for k in ks:
            hits_at[k] += int((not missed[i]) and gt in ranking[:k])
        if tags is not None:
            r1 = int((not missed[i]) and bool(ranking) and ranking[0] == gt)
            for axis, cell in tags[i].items():
                per_cell_hits.setdefault(axis, {}).setdefault(cell, []).append(r1)
    per_variation = {
        axis: {cell: float(np.mean(vals)) for cell, vals in cells.items()}
        for axis, cells in per_cell_hits.items()}
    counts = {axis: {cell: len(vals) for cell, vals in cells.items()}
              for axis, cells in per_cell_hits.items()}
    return RetrievalReport(
        rank_k={k: hits_at[k] / n for k in ks},
        per_variation=per_variation,
        per_variation_counts=counts,
        missed_queries=sum(missed),
        num_queries=n,
        shortlist_k=shortlist_k,
        stage1_recall=stage1_recall,
    )


# ---- end-to-end evaluation ----


@dataclass
class EvalConfig:
    shortlist_k: int = 16
    ks: tuple[int, ...] = (1, 5, 10)
    use_matching: bool = True
    use_text: bool = False
    box_input: bool = False
    dtype: str = "float32"


def gallery_from_dataset(model: CrossViewModel, dataset: PairDataset,
                         dtype=np.float32) -> GalleryIndex:
    """Gallery = every test pair's shop image plus the gallery-only images."""
    images: list[tuple[str, np.ndarray]] = []
    text: dict[str, np.ndarray] = {}
    seen: set[str] = set()
    for rec in dataset.records:
        if rec.split != "test" or rec.glyph_id in seen:
            continue
        seen.add(rec.glyph_id)
        images.append((rec.glyph_id, dataset.load_pair_image(rec, dtype)))
        if rec.text_embed_image is not None:
            text[rec.glyph_id] = np.asarray(rec.text_embed_image)
    for grec in dataset.gallery_extra:
        if grec.image_id in seen:
            continue
        seen.add(grec.image_id)
        images.append((grec.image_id, load_image(dataset.root / grec.image_path, dtype)))
        if grec.text_embed_image is not None:
            text[grec.image_id] = np.asarray(grec.text_embed_image)
    return build_gallery(model, images, text)


def encode_query(model: CrossViewModel, dataset: PairDataset, rec: PairRecord,
                 box_input: bool, dtype=np.float32) -> tuple[ViewFeatures, np.ndarray, int]:
    """Encode one query clip; returns (features, global embedding, fallbacks)."""
    frames = dataset.load_pair_frames(rec, model.cfg.encoder.frames, dtype)
    fallbacks = 0
    if box_input:
        boxes = dataset.frame_boxes(rec, model.cfg.encoder.frames)
        cropped = []
        for frame, box in zip(frames, boxes):
            out, fell_back = crop_to_box(frame, box, model.cfg.encoder.image_size)
            fallbacks += int(fell_back)
            cropped.append(out)
        frames = np.stack(cropped).astype(dtype)
    with no_grad():
        feats = model.encoder.encode_video(Tensor(frames))
        emb = model.encoder.project_global(feats.cls, "video").vec.data
    return feats, emb, fallbacks


def evaluate(model: CrossViewModel, dataset: PairDataset,
             cfg: EvalConfig) -> RetrievalReport:
    """Run the full retrieval protocol over the test split."""
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    eval_model = model.clone(dtype)
    gallery = gallery_from_dataset(eval_model, dataset, dtype)
    test_recs = [r for r in dataset.records if r.split == "test"]
    if not test_recs:
        raise GalleryError("dataset has no test split")
    k = min(cfg.shortlist_k, len(gallery.ids))

    rankings: list[list[str]] = []
    gts: list[str] = []
    tags: list[dict[str, str]] = []
    missed: list[bool] = []
    stage1_hits = 0
    for rec in test_recs:
        feats, emb, _ = encode_query(eval_model, dataset, rec, cfg.box_input, dtype)
        short = shortlist(emb, gallery, k)
        stage1_hits += int(rec.glyph_id in [cid for cid, _ in short])
        if cfg.use_matching:
            scored = rerank(eval_model, feats, [cid for cid, _ in short], gallery)
        else:
            scored = short
        if cfg.use_text and rec.text_embed_clip is not None:
            tclip = np.asarray(rec.text_embed_clip)
            scored = [(cid, fuse_text_similarity(s, tclip, gallery.text.get(cid)))
                      for cid, s in scored]
            scored.sort(key=lambda t: (-t[1], t[0]))
        rankings.append([cid for cid, _ in scored])
        gts.append(rec.glyph_id)
        tags.append(rec.variation_tags)
        missed.append(False)

    stage1_recall = stage1_hits / len(test_recs)
    report = rank_k_accuracy(rankings, gts, cfg.ks, tags, missed,
                             gallery_ids=set(gallery.ids), shortlist_k=k,
                             stage1_recall=stage1_recall)
    if report.rank_k.get(1, 0.0) > stage1_recall + 1e-9:
        raise AssertionError("final rank-1 exceeded stage-1 recall")
    return report
