"""Channel-wise self-attention with stepwise pooling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .functional import avg_pool2d, depthwise_conv1d
from .params import ParamStore, uniform_init
from .tensor import ShapeError, Tensor


@dataclass
class CsaParams:
    q: tuple[Tensor, Tensor]
    k: tuple[Tensor, Tensor]
    v: tuple[Tensor, Tensor]
    pool_kernel: int = 7
    pool_stride: int = 7

    @classmethod
    def init(cls, store: ParamStore, channels: int, rng: np.random.Generator | None = None,
             prefix: str = "csa", pool_kernel: int = 7, pool_stride: int = 7) -> "CsaParams":
        rng = np.random.default_rng(0) if rng is None else rng
        for name in ("q", "k", "v"):
            # kernel-size-1 depthwise conv: fan_in is 1
            store.add(f"{prefix}.{name}.scale", uniform_init(rng, channels, 1))
            store.add(f"{prefix}.{name}.bias", np.zeros(channels))
        return cls.from_store(store, prefix, pool_kernel, pool_stride)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str = "csa", pool_kernel: int = 7,
                   pool_stride: int = 7) -> "CsaParams":
        pair = lambda n: (store[f"{prefix}.{n}.scale"], store[f"{prefix}.{n}.bias"])
        return cls(pair("q"), pair("k"), pair("v"), pool_kernel, pool_stride)


def pool_geometry(H: int, W: int, kernel: int, stride: int) -> tuple[int, int, int, int]:
    """(kernel, stride, H', W') after clamping the window to the map."""
    if kernel > min(H, W):
        kernel = stride = min(H, W)
    return kernel, stride, (H - kernel) // stride + 1, (W - kernel) // stride + 1


def _project(xp: Tensor, pair: tuple[Tensor, Tensor]) -> Tensor:
    scale, bias = pair
    return depthwise_conv1d(xp, T.reshape(scale, (scale.shape[0], 1)), bias)


def csa_apply(x3: Tensor, p: CsaParams) -> tuple[Tensor, Tensor]:
    """Reweight the channels of an already-fused map ``x3``; returns (xf, w_ch)."""
    C, H, W = x3.shape
    k, s, Hp, Wp = pool_geometry(H, W, p.pool_kernel, p.pool_stride)
    xp = T.reshape(avg_pool2d(x3, k, s), (C, Hp * Wp))
    q, key, v = _project(xp, p.q), _project(xp, p.k), _project(xp, p.v)
    scores = T.scale(T.matmul(q, T.transpose(key)), 1.0 / math.sqrt(C))
    attn = T.matmul(T.softmax_rows(scores), v)
    w_ch = T.sigmoid(T.mean(attn, axis=1))
    return T.mul(x3, T.reshape(w_ch, (C, 1, 1))), w_ch


def csa_forward(x1: Tensor, x2: Tensor, p: CsaParams) -> tuple[Tensor, Tensor]:
    if x1.shape != x2.shape:
        raise ShapeError(f"csa_forward: {x1.shape} and {x2.shape} differ")
    return csa_apply(T.add(x1, x2), p)


def csa_cost(C: int, H: int, W: int, pool_kernel: int = 7, pool_stride: int = 7) -> tuple[int, int]:
    k, s, Hp, Wp = pool_geometry(H, W, pool_kernel, pool_stride)
    P = Hp * Wp
    params = 6 * C
    flops = C * P * k * k  # pooling
    flops += 3 * 3 * C * P  # three k=1 depthwise projections with bias
    flops += 2 * C * P * C + C * C + C * C  # scores, scaling, softmax
    flops += 2 * C * C * P + C * P + C  # attn @ V, spatial mean, sigmoid
    flops += C * H * W  # channel gating
    return params, flops
