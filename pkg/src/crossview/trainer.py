"""Deterministic mini-batch training loop with Adam and cosine decay.

All randomness is derived per (seed, purpose, step), so a run is a pure
function of (seed, config, dataset): restarting from a mid-run checkpoint
reproduces the uninterrupted trajectory bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Parameter, Tensor, concat
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .data import PairDataset, crop_to_box, mask_augment
from .losses import (NegativeSet, decode_with_negatives, icl_loss,
                     matching_loss, sample_hard_negatives, similarity_matrix,
                     total_loss)
from .model import CrossViewModel, ModelConfig
from .reconstruction import reconstruction_loss
from . import retrieval

log = logging.getLogger(__name__)

VALID_LOSSES = ("contrastive", "matching", "reconstruction")

# letter rows of the component ablation; "e" needs the product detector,
# which this artifact does not include
ABLATION_ROWS = {
    "a": {"losses": ("contrastive",), "text": False},
    "b": {"losses": ("contrastive",), "text": True},
    "c": {"losses": ("contrastive", "matching"), "text": False},
    "d": {"losses": ("contrastive", "matching", "reconstruction"), "text": False},
    "f": {"losses": ("contrastive", "matching", "reconstruction"), "text": True},
}


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 600
    lr_encoder: float = 1e-4
    lr_new: float = 1e-3
    alpha: float = 0.1
    n_neg: int = 3
    temperature: float = 0.01
    seed: int = 0
    warmup_fraction: float = 0.05
    clip_norm: float = 1.0
    losses: tuple[str, ...] = VALID_LOSSES
    text_fusion: bool = False
    negative_strategy: str = "hard"
    mask_prob: float = 0.5
    mask_max_fraction: float = 0.9
    mask_whole_frame: bool = False
    box_input: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        self.losses = tuple(self.losses)
        for name in self.losses:
            if name not in VALID_LOSSES:
                raise ValueError(f"unknown loss toggle {name!r}")
        if "matching" in self.losses and "contrastive" not in self.losses:
            raise ValueError("matching loss requires the contrastive loss")
        if "reconstruction" in self.losses and "matching" not in self.losses:
            raise ValueError("reconstruction loss requires the matching loss")
        if not isinstance(self.model, ModelConfig):
            self.model = ModelConfig.from_dict(self.model)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["losses"] = list(self.losses)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d and not isinstance(d["model"], ModelConfig):
            d["model"] = ModelConfig.from_dict(d["model"])
        if "losses" in d:
            d["losses"] = tuple(d["losses"])
        return cls(**d)

    @classmethod
    def from_file(cls, path: Path) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def lr_scale(step: int, total_steps: int, warmup_fraction: float) -> float:
    """Linear warmup then cosine decay to zero."""
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    if step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """First-order adaptive-moment optimizer with per-group learning rates.

    Parameters whose gradient is absent in a step are left untouched
    (their moments do not decay), which keeps toggled-off components
    exactly frozen.
    """

    def __init__(self, named_params: list[tuple[str, Parameter]],
                 cfg: TrainConfig):
        self.named_params = named_params
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in named_params}
        self.t = 0

    def base_lr(self, name: str) -> float:
        return (self.cfg.lr_encoder if name.startswith("encoder.")
                else self.cfg.lr_new)

    def step(self, scale: float) -> None:
        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        self.t += 1
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            p.data = p.data - scale * self.base_lr(name) * mhat / (np.sqrt(vhat) + eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {}
        for name in self.m:
            state[f"optim.m.{name}"] = self.m[name].copy()
            state[f"optim.v.{name}"] = self.v[name].copy()
        return state

    def load_state_arrays(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for name in self.m:
            self.m[name] = tensors[f"optim.m.{name}"].astype(np.float64).copy()
            self.v[name] = tensors[f"optim.v.{name}"].astype(np.float64).copy()
        self.t = t


def clip_gradients(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def losses_forward(model: CrossViewModel, images: Tensor, clips: Tensor,
                   loss_names: tuple[str, ...], alpha: float,
                   temperature: float, n_neg: int,
                   negative_strategy: str = "hard",
                   rng: np.random.Generator | None = None,
                   ) -> tuple[Tensor, dict[str, Tensor]]:
    """Forward pass of the full objective on one batch.

    ``images [B, C, H, W]``, ``clips [B, F, C, H, W]``. Returns the total
    loss and the individual components (zero tensors for disabled ones).
    """
    enc = model.encoder
    img_feats = enc.encode_image(images)
    vid_feats = enc.encode_video(clips)

    zero = Tensor(0.0)
    l_c = l_m = l_r = zero
    sim = None
    if "contrastive" in loss_names:
        img_emb = enc.project_global(img_feats.cls, "image").vec
        vid_emb = enc.project_global(vid_feats.cls, "video").vec
        sim = similarity_matrix(img_emb, vid_emb, temperature)
        l_c = icl_loss(sim)

    if "matching" in loss_names:
        negatives = sample_hard_negatives(sim, n_neg, strategy=negative_strategy,
                                          rng=rng)
        b, d = images.shape[0], model.cfg.encoder.model_dim
        img_queries = concat(
            [img_feats.cls.reshape(b, 1, d), img_feats.patches], axis=1)
        decodes = decode_with_negatives(model.decoder, img_queries,
                                        vid_feats.patches, negatives)
        l_m = matching_loss(decodes)
        if "reconstruction" in loss_names:
            w = model.coefnet(decodes.positives.attn)
            x = vid_feats.patches.transpose(0, 2, 1)
            y = img_feats.patches.transpose(0, 2, 1)
            l_r = reconstruction_loss(x, y, w)

    total = total_loss(l_c, l_m, l_r, alpha)
    return total, {"contrastive": l_c, "matching": l_m, "reconstruction": l_r}


class Trainer:
    """Wires the encoder, decoder, coefficient net, and losses together."""

    def __init__(self, model: CrossViewModel, cfg: TrainConfig,
                 dataset: PairDataset):
        self.model = model
        self.cfg = cfg
        self.dataset = dataset
        self.records = [r for r in dataset.records if r.split == "train"]
        if len(self.records) < cfg.batch_size:
            raise ValueError("training split smaller than one batch")
        self.optimizer = Adam(model.named_parameters(), cfg)
        self.step_index = 0
        self._image_cache: dict[int, np.ndarray] = {}
        self._frame_cache: dict[int, np.ndarray] = {}
        self._box_cache: dict[int, list] = {}

    # ---- deterministic streams ----

    def _stream(self, purpose: int, index: int) -> np.random.Generator:
        seq = np.random.SeedSequence((self.cfg.seed, purpose, index))
        return np.random.Generator(np.random.PCG64(seq))

    def batch_indices(self, step: int) -> np.ndarray:
        n, b = len(self.records), self.cfg.batch_size
        per_epoch = n // b
        epoch, slot = divmod(step, per_epoch)
        perm = self._stream(1, epoch).permutation(n)
        return perm[slot * b:(slot + 1) * b]

    # ---- data access ----

    def _load_pair(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        f = self.model.cfg.encoder.frames
        if idx not in self._image_cache:
            rec = self.records[idx]
            self._image_cache[idx] = self.dataset.load_pair_image(rec)
            self._frame_cache[idx] = self.dataset.load_pair_frames(rec, f)
            self._box_cache[idx] = self.dataset.frame_boxes(rec, f)
        frames = self._frame_cache[idx]
        if self.cfg.box_input:
            size = self.model.cfg.encoder.image_size
            frames = np.stack([
                crop_to_box(frame, box, size)[0]
                for frame, box in zip(frames, self._box_cache[idx])])
        return self._image_cache[idx], frames

    def _load_batch(self, indices, step: int) -> tuple[np.ndarray, np.ndarray]:
        mask_rng = self._stream(2, step)
        images, clips = [], []
        for idx in indices:
            img, frames = self._load_pair(int(idx))
            frames = mask_augment(frames, self.model.cfg.encoder.patch_size,
                                  mask_rng, prob=self.cfg.mask_prob,
                                  max_fraction=self.cfg.mask_max_fraction,
                                  whole_frame=self.cfg.mask_whole_frame)
            images.append(img)
            clips.append(frames)
        return np.stack(images), np.stack(clips)

    # ---- one optimization step ----

    def train_step(self, step: int | None = None) -> dict[str, float]:
        cfg = self.cfg
        step = self.step_index if step is None else step
        images, clips = self._load_batch(self.batch_indices(step), step)
        self.model.zero_grad()
        loss, comps = losses_forward(
            self.model, Tensor(images), Tensor(clips), cfg.losses, cfg.alpha,
            cfg.temperature, cfg.n_neg, cfg.negative_strategy,
            rng=self._stream(3, step))
        loss.backward()
        clip_gradients(self.model.parameters(), cfg.clip_norm)
        self.optimizer.step(lr_scale(step, cfg.steps, cfg.warmup_fraction))
        self.step_index = step + 1
        return {
            "step": step,
            "contrastive": float(comps["contrastive"].data),
            "matching": float(comps["matching"].data),
            "reconstruction": float(comps["reconstruction"].data),
            "total": float(loss.data),
        }

    # ---- training loop ----

    def run(self, out_dir: Path | None = None,
            log_name: str = "loss_log.csv") -> list[dict[str, float]]:
        """Run the remaining steps; logs per-step components to CSV."""
        out = Path(out_dir) if out_dir is not None else None
        history = []
        log_file = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_path = out / log_name
            new_file = not log_path.exists()
            log_file = open(log_path, "a", encoding="utf-8")
            if new_file:
                log_file.write("step,contrastive,matching,reconstruction,total\n")
        try:
            while self.step_index < self.cfg.steps:
                try:
                    comps = self.train_step()
                except NonFiniteError as e:
                    if out is not None:
                        self.save_checkpoint(out / "abort_dump.ckpt")
                    raise RuntimeError(f"aborted at step {self.step_index}: {e}") from e
                history.append(comps)
                if log_file is not None:
                    log_file.write("{step},{contrastive:.10g},{matching:.10g},"
                                   "{reconstruction:.10g},{total:.10g}\n".format(**comps))
        finally:
            if log_file is not None:
                log_file.close()
        return history

    # ---- checkpointing ----

    def save_checkpoint(self, path: Path) -> None:
        tensors = self.model.state_arrays()
        tensors.update(self.optimizer.state_arrays())
        meta = {
            "step": self.step_index,
            "adam_t": self.optimizer.t,
            "train_config": self.cfg.to_dict(),
            "model_config": self.model.cfg.to_dict(),
            "config_hash": config_hash(self.cfg.to_dict()),
        }
        save_checkpoint(path, tensors, meta)

    def load_checkpoint(self, path: Path) -> None:
        tensors, meta = load_checkpoint(path)
        if meta["config_hash"] != config_hash(self.cfg.to_dict()):
            raise ValueError("checkpoint config does not match trainer config")
        self.model.load_state_arrays(tensors)
        self.optimizer.load_state_arrays(tensors, meta["adam_t"])
        self.step_index = meta["step"]


def train_run(dataset: PairDataset, cfg: TrainConfig,
              out_dir: Path | None = None) -> tuple[CrossViewModel, list[dict]]:
    """Train a fresh model to completion under ``cfg``."""
    model = CrossViewModel(cfg.model, np.random.default_rng(cfg.seed))
    trainer = Trainer(model, cfg, dataset)
    history = trainer.run(out_dir)
    if out_dir is not None:
        trainer.save_checkpoint(Path(out_dir) / "final.ckpt")
    return model, history


def run_ablation_suite(dataset: PairDataset, rows: list[str], seeds: list[int],
                       base_cfg: TrainConfig, out_dir: Path | None = None,
                       shortlist_k: int = 16) -> dict:
    """Train and evaluate the requested ablation rows with shared seeds.

    Rows that share loss toggles (text fusion is evaluation-only) share
    one trained model per seed; determinism makes this exactly equivalent
    to retraining. Returns per-row per-seed reports plus seed means.
    """
    for row in rows:
        if row not in ABLATION_ROWS:
            raise ValueError(
                f"row {row!r} not supported (detector rows are out of scope)")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    results: dict[str, dict] = {row: {"seeds": {}, "mean_rank_k": {}} for row in rows}
    trained: dict[tuple, tuple[CrossViewModel, float]] = {}
    for seed in seeds:
        for row in rows:
            spec_row = ABLATION_ROWS[row]
            key = (spec_row["losses"], seed)
            if key not in trained:
                cfg = TrainConfig.from_dict({**base_cfg.to_dict(),
                                             "losses": list(spec_row["losses"]),
                                             "seed": seed})
                t0 = time.perf_counter()
                model, _ = train_run(dataset, cfg,
                                     out / f"row_{row}_seed{seed}" if out else None)
                trained[key] = (model, time.perf_counter() - t0)
            model, train_seconds = trained[key]
            use_matching = "matching" in spec_row["losses"]
            eval_cfg = retrieval.EvalConfig(
                shortlist_k=shortlist_k if use_matching else 10 ** 9,
                use_matching=use_matching,
                use_text=spec_row["text"],
                box_input=base_cfg.box_input)
            report = retrieval.evaluate(model, dataset, eval_cfg)
            results[row]["seeds"][seed] = {
                "rank_k": report.rank_k,
                "per_variation": report.per_variation,
                "stage1_recall": report.stage1_recall,
                "train_seconds": train_seconds,
            }
    for row in rows:
        per_seed = results[row]["seeds"]
        for k in next(iter(per_seed.values()))["rank_k"]:
            results[row]["mean_rank_k"][k] = float(
                np.mean([per_seed[s]["rank_k"][k] for s in per_seed]))
    if out is not None:
        with open(out / "ablation.json", "w", encoding="utf-8") as f:
            json.dump(results, f, indent=2, sort_keys=True, default=str)
        with open(out / "ablation.csv", "w", encoding="utf-8") as f:
            f.write("row,seed,rank_1,rank_5,rank_10\n")
            for row in rows:
                for seed, rep in results[row]["seeds"].items():
                    f.write(f"{row},{seed},{rep['rank_k'][1]:.4f},"
                            f"{rep['rank_k'][5]:.4f},{rep['rank_k'][10]:.4f}\n")
                mean = results[row]["mean_rank_k"]
                f.write(f"{row},mean,{mean[1]:.4f},{mean[5]:.4f},{mean[10]:.4f}\n")
    return results
