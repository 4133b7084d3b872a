"""Layer-level differentiable operations built on :mod:`sscp.tensor`."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .metrics import DataError
from .tensor import DTYPE, ConfigError, ShapeError, Tensor, _branch, _count, _result, reshape

BN_MOMENTUM = 0.1


def depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 1-D convolution with zero same-padding.

    ``x`` is (G, L), ``kernel`` is (G, k) with k odd, ``bias`` is (G,).
    out[g, t] = bias[g] + sum_j kernel[g, j] * x_padded[g, t + j]
    """
    if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[0] != x.shape[0]:
        raise ShapeError(f"depthwise_conv1d: x {x.shape} vs kernel {kernel.shape}")
    G, L = x.shape
    k = kernel.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"depthwise_conv1d needs an odd kernel, got {k}")
    if bias is not None and bias.shape != (G,):
        raise ShapeError(f"depthwise_conv1d: bias {bias.shape} vs {G} channels")
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=1)  # (G, L, k)
    out = np.einsum("glk,gk->gl", win, kernel.data)
    if bias is not None:
        out = out + bias.data[:, None]
    _count(2 * G * L * k + (G * L if bias is not None else 0))

    def backward(g):
        if kernel.requires_grad:
            kernel._accum(np.einsum("glk,gl->gk", win, g))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=1))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + L] += kernel.data[:, j:j + 1] * g
            x._accum(gxp[:, pad:pad + L])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution: ``weight @ x`` over (C_in, N) plus a broadcast bias."""
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"pointwise_conv: weight {weight.shape} vs x {x.shape}")
    cout, cin = weight.shape
    n = x.shape[1]
    out = weight.data @ x.data
    if bias is not None:
        out = out + bias.data[:, None]
    _count(2 * cout * cin * n + (cout * n if bias is not None else 0))

    def backward(g):
        if weight.requires_grad:
            weight._accum(g @ x.data.T)
        if x.requires_grad:
            x._accum(weight.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=1))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
               running_var: Tensor, eps: float = 1e-5, train: bool = True,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalisation of (C, N) with the N axis playing the batch role.

    In train mode the running buffers are updated in place.
    """
    if x.ndim != 2:
        raise ShapeError("batch_norm expects (C, N)")
    C, N = x.shape
    if N == 0:
        raise ShapeError("batch_norm on an empty batch")
    if eps <= 0:
        raise ConfigError("batch_norm eps must be positive")
    if train:
        mu = x.data.mean(axis=1, keepdims=True)
        var = x.data.var(axis=1, keepdims=True)
        unbiased = var * (N / (N - 1)) if N > 1 else var
        running_mean.data *= 1 - momentum
        running_mean.data += momentum * mu[:, 0]
        running_var.data *= 1 - momentum
        running_var.data += momentum * unbiased[:, 0]
    else:
        mu = running_mean.data[:, None]
        var = running_var.data[:, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data[:, None] + beta.data[:, None]
    _count(out.size)

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=1))
        if beta.requires_grad:
            beta._accum(g.sum(axis=1))
        if x.requires_grad:
            gx = g * gamma.data[:, None]
            if train:
                gx = inv * (gx - gx.mean(axis=1, keepdims=True)
                            - xhat * (gx * xhat).mean(axis=1, keepdims=True))
            else:
                gx = gx * inv
            x._accum(gx)

    return _result(out, (x, gamma, beta), backward)


def _group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    # x is (B, C, S); statistics per (sample, group)
    B, C, S = x.shape
    if C % groups:
        raise ConfigError(f"group_norm: {C} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ConfigError("group_norm eps must be positive")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = ((xg - mu) * inv).reshape(B, C, S)
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]
    _count(out.size)

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gx = (g * gamma.data[None, :, None]).reshape(B, groups, -1)
            xh = xhat.reshape(B, groups, -1)
            gx = inv * (gx - gx.mean(axis=2, keepdims=True)
                        - xh * (gx * xh).mean(axis=2, keepdims=True))
            x._accum(gx.reshape(B, C, S))

    return _result(out, (x, gamma, beta), backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation of a single (C, N) sample."""
    if x.ndim != 2:
        raise ShapeError("group_norm expects (C, N)")
    C, N = x.shape
    out = _group_norm(reshape(x, (1, C, N)), groups, gamma, beta, eps)
    return reshape(out, (C, N))


def group_norm2d(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation of a (B, C, H, W) batch; each sample independent."""
    B, C, H, W = x.shape
    out = _group_norm(reshape(x, (B, C, H * W)), groups, gamma, beta, eps)
    return reshape(out, (B, C, H, W))


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Average pooling over the last two axes (no padding)."""
    stride = kernel if stride is None else stride
    H, W = x.shape[-2:]
    if kernel > H or kernel > W or kernel < 1 or stride < 1:
        raise ShapeError(f"avg_pool2d: kernel {kernel} does not fit {H}x{W}")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(-2, -1))
    win = win[..., ::stride, ::stride, :, :][..., :Ho, :Wo, :, :]
    out = win.mean(axis=(-2, -1))
    _count(out.size * kernel * kernel)
    area = float(kernel * kernel)

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gs = g / area
        for i in range(kernel):
            for j in range(kernel):
                gx[..., i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += gs
        x._accum(gx)

    return _result(out, (x,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 same-padded 2-D convolution of a (B, C_in, H, W) batch."""
    B, cin, H, W = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError("conv2d needs odd kernels")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B, cin, H, W, kh, kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * H * W, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, H, W, cout).transpose(0, 3, 1, 2))
    _count(2 * B * H * W * cout * cin * kh * kw + (B * H * W * cout if bias is not None else 0))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * H * W, cout)
        if weight.requires_grad:
            weight._accum((gm.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(gm.sum(axis=0))
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(B, H, W, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + H, j:j + W] += gcols[..., i, j].transpose(0, 3, 1, 2)
            x._accum(gxp[:, :, ph:ph + H, pw:pw + W])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        *lead, H2, W2 = g.shape
        gr = g.reshape(*lead, H2 // factor, factor, W2 // factor, factor)
        x._accum(gr.sum(axis=(-3, -1)))

    return _result(out, (x,), backward)


def bce_loss(pred: Tensor, target: np.ndarray, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to [clamp, 1 - clamp]."""
    t = np.asarray(target, dtype=DTYPE)
    if t.shape != pred.shape:
        raise ShapeError(f"bce_loss: pred {pred.shape} vs target {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise DataError("bce_loss target must contain only 0 and 1")
    p = np.clip(pred.data, clamp, 1.0 - clamp)
    inside = (pred.data >= clamp) & (pred.data <= 1.0 - clamp)
    _branch(inside)
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    _count(4 * n)

    def backward(g):
        pred._accum(g * inside * (p - t) / (p * (1.0 - p)) / n)

    return _result(np.array(loss), (pred,), backward)
