"""Patch feature reconstruction: coefficients from attention, residual loss.

The cross-attention map (heads as channels over an N x M grid) passes
through two convolution+ReLU stages to produce coefficients W >= 0; the
loss penalizes how badly the image patch features are reproduced by the
W-weighted combination of video patch features. A ridge least-squares
solver provides the unconstrained optimum as a verification oracle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor
from .nn import Module, ShapeError, conv2d, truncated_normal

log = logging.getLogger(__name__)


@dataclass
class ReconstructionInputs:
    """One positive pair's reconstruction operands.

    ``video_patches`` X: [d, M], ``image_patches`` Y: [d, N],
    ``attn`` a: [heads, N, M] row-stochastic per head and row.
    """

    video_patches: Tensor
    image_patches: Tensor
    attn: Tensor


class CoefficientNet(Module):
    """Two conv+ReLU stages mapping head channels to one coefficient map.

    1x1 kernels keep each coefficient a function of the attention values
    at its own (query, key) position; 3x3 is available for context mixing.
    The trailing ReLU (default on) makes every coefficient non-negative;
    ``signed=True`` drops it.
    """

    def __init__(self, rng: np.random.Generator, heads: int = 8, mid: int = 4,
                 kernel_size: int = 1, signed: bool = False):
        if kernel_size % 2 == 0:
            raise ShapeError("kernel_size must be odd")
        k = kernel_size
        self.signed = signed
        # warm start near the head-average map so early coefficients are
        # already row-stochastic-ish
        w1 = np.full((mid, heads, k, k), 1.0 / (heads * k * k))
        w1 += truncated_normal(rng, w1.shape, std=0.01)
        w2 = np.full((1, mid, k, k), 1.0 / (mid * k * k))
        w2 += truncated_normal(rng, w2.shape, std=0.01)
        self.conv1 = Parameter(w1)
        self.conv2 = Parameter(w2)

    def __call__(self, attn: Tensor) -> Tensor:
        h = conv2d(attn, self.conv1).relu()
        out = conv2d(h, self.conv2)
        if not self.signed:
            out = out.relu()
        # drop the singleton channel axis: [..., 1, N, M] -> [..., N, M]
        return out.reshape(out.shape[:-3] + out.shape[-2:])


def coefficients_from_attention(attn: Tensor, net: CoefficientNet) -> Tensor:
    """Map an ``[8, N, M]`` attention stack (batched ok) to coefficients."""
    return net(attn)


def reconstruction_loss(video_patches: Tensor, image_patches: Tensor,
                        coefficients: Tensor) -> Tensor:
    """Mean squared residual of reconstructing Y from X with weights W.

    ``video_patches`` X: [..., d, M], ``image_patches`` Y: [..., d, N],
    ``coefficients`` W: [..., N, M]. The squared Frobenius norm of
    Y - X W^T is normalized by N*d (per pair), then averaged over any
    leading batch axis.
    """
    x, y, w = video_patches, image_patches, coefficients
    d, m = x.shape[-2], x.shape[-1]
    n = y.shape[-1]
    if y.shape[-2] != d or w.shape[-2] != n or w.shape[-1] != m:
        raise ShapeError(
            f"reconstruction: X {x.shape}, Y {y.shape}, W {w.shape} disagree")
    wt_axes = tuple(range(w.ndim - 2)) + (w.ndim - 1, w.ndim - 2)
    resid = y - x @ w.transpose(wt_axes)
    total = (resid * resid).sum()
    batch = int(np.prod(x.shape[:-2])) if x.ndim > 2 else 1
    return total * (1.0 / (n * d * batch))


def least_squares_oracle(video_patches: np.ndarray, image_patches: np.ndarray,
                         ridge: float = 1e-8) -> tuple[np.ndarray, float]:
    """Unconstrained minimum of the reconstruction objective.

    Solves (X^T X + ridge I) w_n = X^T y_n per image patch via normal
    equations and returns (W* as [N, M], residual normalized by N*d).
    If the regularized normal matrix is still not solvable, the ridge is
    escalated 1000x and the fallback is logged.
    """
    x = np.asarray(video_patches, dtype=np.float64)
    y = np.asarray(image_patches, dtype=np.float64)
    d, m = x.shape
    n = y.shape[1]
    gram = x.T @ x
    rhs = x.T @ y  # [M, N]
    lam = ridge
    while True:
        try:
            w_cols = np.linalg.solve(gram + lam * np.eye(m), rhs)  # [M, N]
            break
        except np.linalg.LinAlgError:
            lam *= 1000.0
            log.warning("least_squares_oracle: ridge escalated to %.1e", lam)
            if lam > 1.0:
                raise
    resid = y - x @ w_cols
    return w_cols.T.copy(), float((resid * resid).sum() / (n * d))
