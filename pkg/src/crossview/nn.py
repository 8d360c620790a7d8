"""Differentiable neural-net kernels: linear, attention, convolution, norms.

Everything is built from the autodiff primitives. Module classes are thin
parameter containers; the functional kernels accept explicit weights so
they stay directly testable against loop oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, layer_norm, softmax

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the kernel contract."""


@dataclass(frozen=True)
class AttentionConfig:
    """Multi-head attention geometry; model_dim must split evenly over heads."""

    heads: int = 8
    model_dim: int = 64

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ShapeError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     dtype=np.float64) -> np.ndarray:
    """Normal samples re-drawn until within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    mask = np.abs(out) > 2.0 * std
    while mask.any():
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))
        mask = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class Module:
    """Parameter container; children are discovered from attributes."""

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        found: list[tuple[str, Parameter]] = []
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                found.append((attr, value))
            elif isinstance(value, Module):
                found.extend((f"{attr}.{n}", p) for n, p in value.named_parameters())
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend((f"{attr}.{i}.{n}", p)
                                     for n, p in item.named_parameters())
                    elif isinstance(item, Parameter):
                        found.append((f"{attr}.{i}", item))
        return found

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def rename_parameters(self, prefix: str) -> None:
        """Assign hierarchical name paths; call once after construction."""
        for name, p in self.named_parameters():
            p.name = f"{prefix}.{name}" if prefix else name


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ weight + bias over the last axis; exact analytic backward."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
        y = y + bias
    return y


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 bias: bool = True, std: float = 0.02):
        self.weight = Parameter(truncated_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head softmax.

    Accepts ``q: [..., Nq, d]`` and ``k, v: [..., Nk, d]`` with matching
    leading axes. Returns the projected output and the attention map
    ``[..., H, Nq, Nk]``; the map stays in the graph so downstream losses
    can differentiate through it.
    """

    def __init__(self, rng: np.random.Generator, cfg: AttentionConfig):
        self.cfg = cfg
        d = cfg.model_dim
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if q.shape[-1] != cfg.model_dim or k.shape[-1] != cfg.model_dim:
            raise ShapeError("attention: model_dim mismatch")
        if k.shape[-2] == 0:
            raise ShapeError("attention: empty key sequence")
        if k.shape[:-2] != v.shape[:-2] or k.shape[-2] != v.shape[-2]:
            raise ShapeError("attention: key/value shapes disagree")
        lead = q.shape[:-2]
        nq, nk = q.shape[-2], k.shape[-2]
        h, hd = cfg.heads, cfg.head_dim

        def split_heads(t: Tensor, n: int) -> Tensor:
            t = t.reshape(lead + (n, h, hd))
            axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
            return t.transpose(axes)  # [..., H, n, hd]

        qh = split_heads(self.wq(q), nq)
        kh = split_heads(self.wk(k), nk)
        vh = split_heads(self.wv(v), nk)

        kt_axes = tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2)
        scores = (qh @ kh.transpose(kt_axes)) * (1.0 / np.sqrt(hd))
        attn = softmax(scores, axis=-1)  # [..., H, Nq, Nk]

        ctx = attn @ vh  # [..., H, Nq, hd]
        back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        merged = ctx.transpose(back).reshape(lead + (nq, h * hd))
        return self.wo(merged), attn


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    ``x: [..., Cin, H, W]`` with an optional single leading batch axis,
    ``kernel: [Cout, Cin, kh, kw]`` with odd kh, kw. Output spatial size
    equals the input's.
    """
    cout, cin, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel extents must be odd")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: expected 3- or 4-d input, got {x.ndim}-d")
    squeeze = x.ndim == 3
    xdata = x.data[None] if squeeze else x.data
    b, c, hgt, wid = xdata.shape
    if c != cin:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cin}")

    ph, pw = kh // 2, kw // 2
    xd = np.pad(xdata, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # im2col: [B, H*W, Cin*kh*kw]
    windows = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, hgt * wid, cin * kh * kw)
    kflat = kernel.data.reshape(cout, cin * kh * kw)
    out = cols @ kflat.T  # [B, H*W, Cout]
    if bias is not None:
        out = out + bias.data
    out_data = out.transpose(0, 2, 1).reshape(b, cout, hgt, wid)
    if squeeze:
        out_data = out_data[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gflat = g4.reshape(b, cout, hgt * wid).transpose(0, 2, 1)  # [B, HW, Cout]
        if kernel.requires_grad:
            gk = np.einsum("bnc,bnk->ck", gflat, cols)
            kernel._accum(gk.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(gflat.sum(axis=(0, 1)))
        if x.requires_grad:
            gcols = gflat @ kflat  # [B, HW, Cin*kh*kw]
            gpad = np.zeros_like(xd)
            gwin = gcols.reshape(b, hgt, wid, cin, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + hgt, j:j + wid] += gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gpad[:, :, ph:ph + hgt, pw:pw + wid]
            x._accum(gx[0] if squeeze else gx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out_data, parents, bw)


class FeedForward(Module):
    """Two-layer position-wise MLP with GELU."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())
