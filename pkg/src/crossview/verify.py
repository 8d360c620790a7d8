"""Gradient verification harness: per-kernel and full-objective checks.

The full-objective check runs the complete training loss on a 2-pair
micro-batch (model_dim 16, N=4 image patches, M=8 video patches) in
float64 and compares every parameter gradient against central finite
differences.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter, Tensor, layer_norm, logsumexp, softmax
from .encoder import EncoderConfig
from .gradcheck import grad_check
from .model import CrossViewModel, ModelConfig
from .nn import AttentionConfig, MultiHeadAttention, conv2d, linear_forward
from .trainer import losses_forward

MICRO_MODEL = ModelConfig(
    encoder=EncoderConfig(image_size=8, patch_size=4, channels=1, layers=1,
                          model_dim=16, heads=2, frames=2, proj_dim=8,
                          mlp_ratio=1),
    decoder_heads=8,
    decoder_mlp_ratio=1,
)


def kernel_grad_errors(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Finite-difference error of each kernel's backward pass."""
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}

    def make_weigh(shape):
        # fixed projection so the scalar objective is sensitive to every
        # output entry and identical across finite-difference evaluations
        c = Tensor(rng.normal(size=shape))
        return lambda t: (t * c).sum()

    w = Parameter(rng.normal(size=(4, 3)), "linear.w")
    b = Parameter(rng.normal(size=(3,)), "linear.b")
    x_lin = Tensor(rng.normal(size=(5, 4)))
    weigh = make_weigh((5, 3))
    errors["linear"] = grad_check(lambda: weigh(linear_forward(x_lin, w, b)), [w, b], eps)

    x_sm = Parameter(rng.normal(size=(3, 5)), "softmax.x")
    weigh = make_weigh((3, 5))
    errors["softmax"] = grad_check(lambda: weigh(softmax(x_sm, axis=-1)), [x_sm], eps)

    x_lse = Parameter(rng.normal(size=(3, 5)), "lse.x")
    errors["logsumexp"] = grad_check(lambda: logsumexp(x_lse, axis=1).sum(), [x_lse], eps)

    x_ln = Parameter(rng.normal(size=(4, 6)), "ln.x")
    gamma = Parameter(rng.normal(size=(6,)) + 1.0, "ln.gamma")
    beta = Parameter(rng.normal(size=(6,)), "ln.beta")
    weigh = make_weigh((4, 6))
    errors["layer_norm"] = grad_check(
        lambda: weigh(layer_norm(x_ln, gamma, beta)), [x_ln, gamma, beta], eps)

    mha = MultiHeadAttention(rng, AttentionConfig(heads=2, model_dim=8))
    mha.rename_parameters("mha")
    q = Parameter(rng.normal(size=(3, 8)), "mha.q")
    kv = Parameter(rng.normal(size=(5, 8)), "mha.kv")
    weigh_out = make_weigh((3, 8))
    weigh_attn = make_weigh((2, 3, 5))

    def attn_obj():
        out, attn = mha(q, kv, kv)
        return weigh_out(out) + weigh_attn(attn)

    errors["attention"] = grad_check(attn_obj, mha.parameters() + [q, kv], eps)

    kern = Parameter(rng.normal(size=(3, 2, 3, 3)), "conv.kernel")
    cbias = Parameter(rng.normal(size=(3,)), "conv.bias")
    x_conv = Parameter(rng.normal(size=(2, 5, 5)), "conv.x")
    weigh = make_weigh((3, 5, 5))
    errors["conv2d"] = grad_check(
        lambda: weigh(conv2d(x_conv, kern, cbias)), [kern, cbias, x_conv], eps)

    # inputs kept away from the kink so central differences stay valid
    x_relu = Parameter(rng.normal(size=(4, 4)), "relu.x")
    x_relu.data[np.abs(x_relu.data) < 0.05] = 0.1
    weigh = make_weigh((4, 4))
    errors["relu"] = grad_check(lambda: weigh(x_relu.relu()), [x_relu], eps)

    x_gelu = Parameter(rng.normal(size=(4, 4)), "gelu.x")
    errors["gelu"] = grad_check(lambda: weigh(x_gelu.gelu()), [x_gelu], eps)

    return errors


def micro_batch(seed: int = 0, batch: int = 2,
                cfg: ModelConfig = MICRO_MODEL) -> tuple[CrossViewModel, Tensor, Tensor]:
    """Tiny model plus a synthetic batch for objective-level checks."""
    rng = np.random.default_rng(seed)
    model = CrossViewModel(cfg, rng)
    e = cfg.encoder
    images = Tensor(rng.uniform(0.0, 1.0, size=(batch, e.channels, e.image_size,
                                                e.image_size)))
    clips = Tensor(rng.uniform(0.0, 1.0, size=(batch, e.frames, e.channels,
                                               e.image_size, e.image_size)))
    return model, images, clips


def full_objective_grad_error(seed: int = 0, eps: float = 1e-5,
                              alpha: float = 0.1, temperature: float = 0.01,
                              cfg: ModelConfig = MICRO_MODEL) -> float:
    """FD error of the combined objective over every model parameter."""
    model, images, clips = micro_batch(seed, 2, cfg)
    loss_names = ("contrastive", "matching", "reconstruction")

    def objective():
        total, _ = losses_forward(model, images, clips, loss_names, alpha,
                                  temperature, n_neg=1)
        return total

    return grad_check(objective, model.parameters(), eps)
