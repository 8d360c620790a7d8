"""Pair records, manifest IO, frame sampling, masking, and box crops.

A dataset directory holds ``images/``, ``clips/<pair_id>/frame_###.png``,
``manifest.jsonl`` (one pair record per line) and ``gallery.jsonl``
(gallery-only product images). Images are 8-bit PNG; arrays use [C, H, W]
float in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

VARIATION_AXES = {
    "scale": ("small", "medium", "large"),
    "visibility": ("short", "medium", "long"),
    "distractors": ("few", "medium", "abundant"),
}


@dataclass
class PairRecord:
    """One matched (shop image, live clip) example."""

    pair_id: str
    glyph_id: str
    image_path: str
    frame_paths: list[str]
    split: str = "train"
    variation_tags: dict[str, str] = field(default_factory=dict)
    text_embed_image: list[float] | None = None
    text_embed_clip: list[float] | None = None
    boxes: list[list[float] | None] | None = None  # per-frame (x, y, w, h) in [0,1]

    def __post_init__(self):
        if not self.frame_paths:
            raise ValueError(f"pair {self.pair_id}: needs at least one frame")
        for axis, value in self.variation_tags.items():
            if axis not in VARIATION_AXES or value not in VARIATION_AXES[axis]:
                raise ValueError(f"pair {self.pair_id}: bad tag {axis}={value}")
        if self.boxes is not None:
            for box in self.boxes:
                if box is None:
                    continue
                if len(box) != 4 or any(not (0.0 <= v <= 1.0) for v in box):
                    raise ValueError(f"pair {self.pair_id}: box {box} out of range")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "PairRecord":
        return cls(**json.loads(line))


@dataclass
class GalleryRecord:
    """A gallery-only product image (no paired clip)."""

    image_id: str
    glyph_id: str
    image_path: str
    text_embed_image: list[float] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "GalleryRecord":
        return cls(**json.loads(line))


def write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def read_manifest(path: Path) -> list[PairRecord]:
    with open(path, encoding="utf-8") as f:
        return [PairRecord.from_json(line) for line in f if line.strip()]


def read_gallery(path: Path) -> list[GalleryRecord]:
    with open(path, encoding="utf-8") as f:
        return [GalleryRecord.from_json(line) for line in f if line.strip()]


# ---- image IO ----


def save_image(path: Path, image: np.ndarray) -> None:
    """Write a [C, H, W] float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def load_image(path: Path, dtype=np.float64) -> np.ndarray:
    """Read a PNG back to [C, H, W] float in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=dtype) / 255.0
    return arr.transpose(2, 0, 1)


class PairDataset:
    """Manifest-backed access to images and frame stacks."""

    def __init__(self, root: Path, split: str | None = None):
        self.root = Path(root)
        records = read_manifest(self.root / "manifest.jsonl")
        if split is not None:
            records = [r for r in records if r.split == split]
        self.records = records
        gallery_file = self.root / "gallery.jsonl"
        self.gallery_extra = (read_gallery(gallery_file)
                              if gallery_file.exists() else [])

    def __len__(self) -> int:
        return len(self.records)

    def load_pair_image(self, rec: PairRecord, dtype=np.float64) -> np.ndarray:
        return load_image(self.root / rec.image_path, dtype)

    def load_pair_frames(self, rec: PairRecord, num_frames: int,
                         dtype=np.float64) -> np.ndarray:
        paths = sample_frames(rec.frame_paths, num_frames)
        return np.stack([load_image(self.root / p, dtype) for p in paths])

    def frame_boxes(self, rec: PairRecord, num_frames: int):
        """Boxes aligned with the frames ``load_pair_frames`` returns."""
        if rec.boxes is None:
            return [None] * num_frames
        return sample_frames(rec.boxes, num_frames)


# ---- frame-level operations ----


def sample_frames(clip: list, num_frames: int) -> list:
    """Evenly spaced selection of ``num_frames`` items from a clip.

    For clips of length L >= num_frames the indices are
    round(j * (L-1) / (num_frames-1)); shorter clips keep all frames and
    repeat the last one.
    """
    length = len(clip)
    if length == 0:
        raise ValueError("sample_frames: empty clip")
    if num_frames == 1:
        return [clip[0]]
    if length < num_frames:
        idx = list(range(length)) + [length - 1] * (num_frames - length)
    else:
        step = (length - 1) / (num_frames - 1)
        idx = [int(np.floor(j * step + 0.5)) for j in range(num_frames)]
    return [clip[i] for i in idx]


def mask_augment(frames: np.ndarray, patch_size: int, rng: np.random.Generator,
                 prob: float = 0.5, max_fraction: float = 0.9,
                 whole_frame: bool = False) -> np.ndarray:
    """Randomly zero patch regions of a [F, C, H, W] frame stack.

    With probability ``prob`` a masking ratio r ~ U[0, max_fraction) is
    drawn and floor(r * N) patch cells per frame are zeroed (or floor(r*F)
    whole frames when ``whole_frame``). Returns a copy when masking fires,
    the input unchanged otherwise. Deterministic under a seeded rng.
    """
    if rng.random() >= prob:
        return frames
    r = rng.uniform(0.0, max_fraction)
    f, _, h, w = frames.shape
    if whole_frame:
        k = int(r * f)
        if k == 0:
            return frames
        out = frames.copy()
        drop = rng.choice(f, size=k, replace=False)
        out[drop] = 0.0
        return out
    gh, gw = h // patch_size, w // patch_size
    n = gh * gw
    k = int(r * n)
    if k == 0:
        return frames
    out = frames.copy()
    for fi in range(f):
        cells = rng.choice(n, size=k, replace=False)
        for c in cells:
            ry, rx = divmod(int(c), gw)
            out[fi, :, ry * patch_size:(ry + 1) * patch_size,
                rx * patch_size:(rx + 1) * patch_size] = 0.0
    return out


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a [C, H, W] array (align_corners=False style)."""
    c, h, w = image.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    tl = image[:, y0[:, None], x0[None, :]]
    tr = image[:, y0[:, None], x1[None, :]]
    bl = image[:, y1[:, None], x0[None, :]]
    br = image[:, y1[:, None], x1[None, :]]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return top * (1 - wy) + bot * wy


def crop_to_box(frame: np.ndarray, box, out_size: int,
                min_pixels: int = 2) -> tuple[np.ndarray, bool]:
    """Crop a [C, H, W] frame to a normalized (x, y, w, h) box, resized to
    ``out_size``. Degenerate boxes (either crop extent below
    ``min_pixels``) fall back to resizing the full frame; the second
    return value reports whether the fallback fired.
    """
    c, h, w = frame.shape
    if box is None:
        return resize_bilinear(frame, out_size, out_size), False
    bx, by, bw, bh = box
    x0 = int(np.floor(bx * w))
    y0 = int(np.floor(by * h))
    x1 = int(np.ceil((bx + bw) * w))
    y1 = int(np.ceil((by + bh) * h))
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    if (x1 - x0) < min_pixels or (y1 - y0) < min_pixels:
        return resize_bilinear(frame, out_size, out_size), True
    crop = frame[:, y0:y1, x0:x1]
    return resize_bilinear(crop, out_size, out_size), False
