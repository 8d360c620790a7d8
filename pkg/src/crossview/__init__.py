"""Cross-view semantic alignment for video-to-image product retrieval."""

from .autodiff import NonFiniteError, Parameter, Tensor, no_grad
from .encoder import EncoderConfig, GlobalEmbedding, ViewFeatures, VisualEncoder
from .decoder import DecodeResult, MatchDecoder
from .model import CrossViewModel, ModelConfig
from .reconstruction import CoefficientNet
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "CoefficientNet",
    "CrossViewModel",
    "DecodeResult",
    "EncoderConfig",
    "GlobalEmbedding",
    "MatchDecoder",
    "ModelConfig",
    "NonFiniteError",
    "Parameter",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "ViewFeatures",
    "VisualEncoder",
    "no_grad",
]
