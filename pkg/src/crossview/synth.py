"""Procedural cross-view dataset: glyph products, shop images, live clips.

Each product is a striped polygon "glyph" with a distinctive hue. Shop
images show the glyph large, centered, on a clean background. Clip frames
show the same glyph at a controlled scale among transient distractor
glyphs, background clutter, and illumination jitter, visible in only a
fraction of the frames. Products come in near-duplicate groups (small hue
shifts) so retrieval requires fine-grained discrimination, and train/test
product identities never overlap.

Difficulty axes per clip: product scale (box-area fraction), visible
duration (fraction of frames containing the product), and distractor
count. Generation is deterministic: every record derives its own rng
stream from (seed, stream, index).
"""

from __future__ import annotations

import colorsys
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import GalleryRecord, PairRecord, save_image, write_jsonl

SCALE_RANGES = {"small": (0.06, 0.2), "medium": (0.2, 0.4), "large": (0.4, 0.7)}
VISIBILITY_RANGES = {"short": (0.15, 0.4), "medium": (0.45, 0.7), "long": (0.75, 1.0)}
DISTRACTOR_COUNTS = {"few": (1, 3), "medium": (4, 7), "abundant": (8, 10)}


class InfeasibleLayoutError(ValueError):
    """Requested glyph areas cannot fit on the canvas."""


@dataclass(frozen=True)
class Glyph:
    """A product's visual identity: polygon, palette, stripe pattern."""

    glyph_id: str
    sides: int
    rotation: float
    fill_rgb: tuple[float, float, float]
    stripe_rgb: tuple[float, float, float]
    stripes: int
    stripe_angle: float


@dataclass
class SynthScene:
    """Scene description for one pair before rendering."""

    product_glyph: Glyph
    scale_fraction: float
    visible_fraction: float
    n_products: int
    variation_tags: dict[str, str] = field(default_factory=dict)


@dataclass
class SynthConfig:
    """Knobs of the generator; defaults produce the desk-scale benchmark."""

    train_pairs: int = 600
    test_pairs: int = 100
    gallery_extra: int = 200
    image_size: int = 32
    frames: int = 4
    text_dim: int = 16
    text_noise_clip: float = 1.0
    text_noise_image: float = 0.5
    confuser_group: int = 3
    confuser_hue_delta: float = 0.06
    distractor_pool: int = 40
    max_total_area: float = 0.85


# ---- glyph construction ----


def _hsv(h: float, s: float, v: float) -> tuple[float, float, float]:
    return colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0.0), 1.0), min(max(v, 0.0), 1.0))


def sample_glyph(rng: np.random.Generator, glyph_id: str) -> Glyph:
    hue = float(rng.random())
    sat = float(rng.uniform(0.6, 0.95))
    val = float(rng.uniform(0.65, 0.95))
    return Glyph(
        glyph_id=glyph_id,
        sides=int(rng.integers(3, 9)),
        rotation=float(rng.uniform(0.0, 2.0 * math.pi)),
        fill_rgb=_hsv(hue, sat, val),
        stripe_rgb=_hsv(hue + rng.uniform(0.33, 0.67), sat, val),
        stripes=int(rng.choice([0, 2, 3, 4])),
        stripe_angle=float(rng.uniform(0.0, math.pi)),
    )


def confuser_variant(rng: np.random.Generator, base: Glyph, glyph_id: str,
                     hue_delta: float) -> Glyph:
    """A near-duplicate of ``base``: shifted hue, jittered orientation."""

    def shift(rgb, dh):
        h, s, v = colorsys.rgb_to_hsv(*rgb)
        return _hsv(h + dh, s, v)

    dh = hue_delta * (1 if rng.random() < 0.5 else -1) * float(rng.uniform(0.8, 1.2))
    return Glyph(
        glyph_id=glyph_id,
        sides=base.sides,
        rotation=base.rotation + float(rng.uniform(-0.2, 0.2)),
        fill_rgb=shift(base.fill_rgb, dh),
        stripe_rgb=shift(base.stripe_rgb, dh),
        stripes=base.stripes,
        stripe_angle=base.stripe_angle + float(rng.uniform(-0.15, 0.15)),
    )


# ---- rasterization ----


def _polygon_vertices(glyph: Glyph, jitter: float = 0.0) -> np.ndarray:
    angles = glyph.rotation + jitter + 2.0 * math.pi * np.arange(glyph.sides) / glyph.sides
    verts = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    # stretch to fill the unit box exactly, slightly overscanned so the
    # rasterized bounding box matches the requested one at pixel centers
    verts[:, 0] /= np.abs(verts[:, 0]).max()
    verts[:, 1] /= np.abs(verts[:, 1]).max()
    return verts


def draw_glyph(canvas: np.ndarray, glyph: Glyph, x0: int, y0: int, side: int,
               brightness: float = 1.0, jitter: float = 0.0) -> np.ndarray:
    """Rasterize ``glyph`` into the box [x0, x0+side) x [y0, y0+side).

    Returns the boolean coverage mask in canvas coordinates. The polygon
    is scaled so its drawn pixels reach the box borders.
    """
    size = canvas.shape[1]
    side = max(int(side), 3)
    x0 = int(np.clip(x0, 0, size - side))
    y0 = int(np.clip(y0, 0, size - side))
    overscan = 1.0 + 2.5 / side
    verts = _polygon_vertices(glyph, jitter) * overscan

    coords = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    u, v = np.meshgrid(coords, coords)  # v: rows (y), u: cols (x)
    inside = np.ones((side, side), dtype=bool)
    k = len(verts)
    for i in range(k):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % k]
        cross = (bx - ax) * (v - ay) - (by - ay) * (u - ax)
        inside &= cross <= 0.0
    if glyph.stripes > 0:
        s = u * math.cos(glyph.stripe_angle) + v * math.sin(glyph.stripe_angle)
        band = np.floor((s + 1.0) * 0.5 * glyph.stripes).astype(int) % 2 == 1
    else:
        band = np.zeros_like(inside)

    fill = np.clip(np.array(glyph.fill_rgb) * brightness, 0.0, 1.0)
    stripe = np.clip(np.array(glyph.stripe_rgb) * brightness, 0.0, 1.0)
    region = canvas[:, y0:y0 + side, x0:x0 + side]
    for ch in range(3):
        region[ch][inside & ~band] = fill[ch]
        region[ch][inside & band] = stripe[ch]
    mask = np.zeros((size, size), dtype=bool)
    mask[y0:y0 + side, x0:x0 + side] = inside
    return mask


def render_shop_image(glyph: Glyph, size: int, rng: np.random.Generator) -> np.ndarray:
    """Clean, centered catalog rendering of a product."""
    tint = 0.92 + rng.uniform(-0.03, 0.03, size=3)
    canvas = np.ones((3, size, size)) * tint[:, None, None]
    side = int(round(0.72 * size))
    off = (size - side) // 2
    draw_glyph(canvas, glyph, off, off, side)
    return np.clip(canvas, 0.0, 1.0)


def render_clip_frame(scene: SynthScene, visible: bool, size: int,
                      distractor_pool: list[Glyph], rng: np.random.Generator,
                      product_pool: list[Glyph] | None = None,
                      product_distractor_prob: float = 0.35,
                      max_distractor_area: float = 0.85,
                      ) -> tuple[np.ndarray, list[float] | None, np.ndarray]:
    """One livestream frame: clutter, transient distractors, the product.

    Returns (frame, normalized intended box or None, intended mask).
    Distractor identities and placements are resampled per frame (only the
    intended product persists across a clip); a fraction of them are other
    real products so clips contain genuine gallery items in the
    background. The intended product is drawn last (on top) when visible.
    """
    base = rng.uniform(0.2, 0.6, size=3)
    canvas = np.ones((3, size, size)) * base[:, None, None]
    for _ in range(int(rng.integers(2, 5))):  # background clutter rectangles
        cw, ch_ = int(rng.integers(size // 4, size)), int(rng.integers(size // 4, size))
        cx, cy = int(rng.integers(0, size - cw + 1)), int(rng.integers(0, size - ch_ + 1))
        canvas[:, cy:cy + ch_, cx:cx + cw] = rng.uniform(0.15, 0.7, size=3)[:, None, None]
    canvas += rng.normal(0.0, 0.02, size=canvas.shape)

    n_distract = scene.n_products - 1
    areas = rng.uniform(0.02, 0.06, size=n_distract)
    if float(areas.sum()) > max_distractor_area:
        raise InfeasibleLayoutError(
            f"distractor area {areas.sum():.2f} exceeds {max_distractor_area} "
            f"(cell {scene.variation_tags})")
    for area in areas:
        if product_pool and rng.random() < product_distractor_prob:
            glyph = product_pool[int(rng.integers(len(product_pool)))]
        else:
            glyph = distractor_pool[int(rng.integers(len(distractor_pool)))]
        side = max(3, int(round(math.sqrt(area) * size)))
        dx = int(rng.integers(0, size - side + 1))
        dy = int(rng.integers(0, size - side + 1))
        draw_glyph(canvas, glyph, dx, dy, side,
                   brightness=float(rng.uniform(0.75, 1.1)))

    box = None
    mask = np.zeros((size, size), dtype=bool)
    if visible:
        side = int(round(math.sqrt(scene.scale_fraction) * size))
        side = min(side, size)
        px = int(rng.integers(0, size - side + 1))
        py = int(rng.integers(0, size - side + 1))
        mask = draw_glyph(canvas, scene.product_glyph, px, py, side,
                          brightness=float(rng.uniform(0.9, 1.05)),
                          jitter=float(rng.uniform(-0.15, 0.15)))
        box = [px / size, py / size, side / size, side / size]

    gain = rng.uniform(0.75, 1.05)
    bias = rng.uniform(-0.04, 0.04)
    frame = np.clip(canvas * gain + bias, 0.0, 1.0)
    return frame, box, mask


# ---- dataset assembly ----


def _stream(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, stream, index))))


def _text_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _noisy_text(base: np.ndarray, sigma: float, rng: np.random.Generator) -> list[float]:
    v = base + sigma * rng.standard_normal(base.shape)
    return (v / np.linalg.norm(v)).tolist()


def _make_products(cfg: SynthConfig, seed: int, count: int, start_index: int,
                   prefix: str) -> list[Glyph]:
    """Products in near-duplicate groups of ``confuser_group``."""
    glyphs: list[Glyph] = []
    group = max(1, cfg.confuser_group)
    for i in range(count):
        rng = _stream(seed, 0, start_index + i)
        gid = f"{prefix}{start_index + i:05d}"
        if i % group == 0:
            glyphs.append(sample_glyph(rng, gid))
        else:
            group_head = glyphs[i - (i % group)]
            glyphs.append(confuser_variant(rng, group_head, gid,
                                           cfg.confuser_hue_delta))
    return glyphs


def _assign_cells(count: int, seed: int) -> list[dict[str, str]]:
    """Balanced cycle through the 27 variation-cell combinations."""
    combos = list(itertools.product(SCALE_RANGES, VISIBILITY_RANGES, DISTRACTOR_COUNTS))
    rng = _stream(seed, 1, 0)
    order = rng.permutation(len(combos))
    tags = []
    for i in range(count):
        sc, vis, dis = combos[order[i % len(combos)]]
        tags.append({"scale": sc, "visibility": vis, "distractors": dis})
    return tags


def synth_generate(cfg: SynthConfig, seed: int, out_dir: Path,
                   threads: int = 1) -> dict:
    """Render the full dataset under ``out_dir`` and write both manifests.

    Returns a summary dict (counts per split and per variation cell).
    Identical (cfg, seed) produce byte-identical output files; each pair
    derives its own rng stream, so rendering parallelizes safely.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "clips").mkdir(exist_ok=True)

    n_train, n_test, n_extra = cfg.train_pairs, cfg.test_pairs, cfg.gallery_extra
    train_products = _make_products(cfg, seed, n_train, 0, "p")
    test_products = _make_products(cfg, seed, n_test, n_train, "p")
    # gallery-only confusers of the test products
    extra_products: list[Glyph] = []
    for i in range(n_extra):
        rng = _stream(seed, 0, n_train + n_test + i)
        base = test_products[i % n_test]
        extra_products.append(confuser_variant(
            rng, base, f"p{n_train + n_test + i:05d}", cfg.confuser_hue_delta))

    pool_train = [sample_glyph(_stream(seed, 2, i), f"dtrain{i:04d}")
                  for i in range(cfg.distractor_pool)]
    pool_test = [sample_glyph(_stream(seed, 3, i), f"dtest{i:04d}")
                 for i in range(cfg.distractor_pool)]

    tags_train = _assign_cells(n_train, seed)
    tags_test = _assign_cells(n_test, seed + 1)

    cell_counts: dict[str, int] = {}

    def emit_pair(index: int, glyph: Glyph, split: str, tags: dict[str, str],
                  pool: list[Glyph], product_pool: list[Glyph]) -> PairRecord:
        rng = _stream(seed, 4, index)
        lo, hi = SCALE_RANGES[tags["scale"]]
        p = float(rng.uniform(lo, hi))
        lo, hi = VISIBILITY_RANGES[tags["visibility"]]
        vf = float(rng.uniform(lo, hi))
        lo, hi = DISTRACTOR_COUNTS[tags["distractors"]]
        n_products = int(rng.integers(lo, hi + 1))
        scene = SynthScene(product_glyph=glyph, scale_fraction=p,
                           visible_fraction=vf, n_products=n_products,
                           variation_tags=tags)

        pair_id = f"pair{index:05d}"
        img = render_shop_image(glyph, cfg.image_size, rng)
        image_path = f"images/{glyph.glyph_id}.png"
        save_image(out / image_path, img)

        clip_dir = out / "clips" / pair_id
        clip_dir.mkdir(exist_ok=True)
        n_vis = max(1, int(round(vf * cfg.frames)))
        visible_at = set(rng.choice(cfg.frames, size=min(n_vis, cfg.frames),
                                    replace=False).tolist())
        others = [g for g in product_pool if g.glyph_id != glyph.glyph_id]
        frame_paths, boxes = [], []
        for fi in range(cfg.frames):
            frame, box, _ = render_clip_frame(scene, fi in visible_at,
                                              cfg.image_size, pool, rng,
                                              product_pool=others,
                                              max_distractor_area=cfg.max_total_area)
            fp = f"clips/{pair_id}/frame_{fi:03d}.png"
            save_image(out / fp, frame)
            frame_paths.append(fp)
            boxes.append(box)

        text_rng = _stream(seed, 5, index)
        base = _text_vector(_stream(seed, 6, _glyph_index(glyph.glyph_id)), cfg.text_dim)
        return PairRecord(
            pair_id=pair_id, glyph_id=glyph.glyph_id, image_path=image_path,
            frame_paths=frame_paths, split=split, variation_tags=tags,
            text_embed_image=_noisy_text(base, cfg.text_noise_image, text_rng),
            text_embed_clip=_noisy_text(base, cfg.text_noise_clip, text_rng),
            boxes=boxes)

    jobs = [(i, glyph, "train", tags_train[i], pool_train, train_products)
            for i, glyph in enumerate(train_products)]
    jobs += [(n_train + i, glyph, "test", tags_test[i], pool_test,
              test_products + extra_products)
             for i, glyph in enumerate(test_products)]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            records = list(pool_exec.map(lambda j: emit_pair(*j), jobs))
    else:
        records = [emit_pair(*job) for job in jobs]
    for rec in records:
        tags = rec.variation_tags
        key = (f"{rec.split}:{tags['scale']}/{tags['visibility']}/"
               f"{tags['distractors']}")
        cell_counts[key] = cell_counts.get(key, 0) + 1

    gallery_records = []
    for i, glyph in enumerate(extra_products):
        rng = _stream(seed, 7, i)
        img = render_shop_image(glyph, cfg.image_size, rng)
        image_path = f"images/{glyph.glyph_id}.png"
        save_image(out / image_path, img)
        base = _text_vector(_stream(seed, 6, _glyph_index(glyph.glyph_id)), cfg.text_dim)
        gallery_records.append(GalleryRecord(
            image_id=glyph.glyph_id, glyph_id=glyph.glyph_id, image_path=image_path,
            text_embed_image=_noisy_text(base, cfg.text_noise_image, rng)))

    write_jsonl(out / "manifest.jsonl", records)
    write_jsonl(out / "gallery.jsonl", gallery_records)
    return {
        "train_pairs": n_train,
        "test_pairs": n_test,
        "gallery_images": n_test + n_extra,
        "cells": cell_counts,
    }


def _glyph_index(glyph_id: str) -> int:
    return int("".join(ch for ch in glyph_id if ch.isdigit()))
