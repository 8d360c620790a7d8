"""Full model bundle: shared encoder, matching decoder, coefficient net."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import MatchDecoder
from .encoder import EncoderConfig, VisualEncoder
from .nn import Module
from .reconstruction import CoefficientNet


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_heads: int = 8
    decoder_mlp_ratio: int = 4
    coef_mid: int = 4
    coef_kernel: int = 1
    coef_signed: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


class CrossViewModel(Module):
    """Everything trainable, with stable hierarchical parameter names."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = VisualEncoder(cfg.encoder, rng)
        self.decoder = MatchDecoder(rng, cfg.encoder.model_dim,
                                    heads=cfg.decoder_heads,
                                    mlp_ratio=cfg.decoder_mlp_ratio)
        self.coefnet = CoefficientNet(rng, heads=cfg.decoder_heads,
                                      mid=cfg.coef_mid,
                                      kernel_size=cfg.coef_kernel,
                                      signed=cfg.coef_signed)
        self.rename_parameters("")

    # ---- state ----

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"checkpoint missing tensor {name}")
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"{name}: checkpoint shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()

    def clone(self, dtype=None) -> "CrossViewModel":
        """Fresh model with copied (optionally cast) parameters."""
        twin = CrossViewModel(self.cfg, np.random.default_rng(0))
        for (_, src), (_, dst) in zip(self.named_parameters(),
                                      twin.named_parameters()):
            dst.data = src.data.copy() if dtype is None else src.data.astype(dtype)
        return twin

    def save(self, path: Path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["model_config"] = self.cfg.to_dict()
        save_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path: Path) -> tuple["CrossViewModel", dict]:
        tensors, meta = load_checkpoint(path)
        cfg = ModelConfig.from_dict(meta["model_config"])
        model = cls(cfg, np.random.default_rng(0))
        model.load_state_arrays(tensors)
        return model, meta
