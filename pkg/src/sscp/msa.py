"""Multi-semantic spatial attention.

The input map is average-pooled along each spatial axis into two 1-D
descriptors, each descriptor is cut into K channel groups, each group is
filtered by its own depthwise 1-D kernel (one kernel tensor serves both the
height and width descriptors), and the group-normalised, sigmoid-squashed
results gate the input along H and W.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .functional import depthwise_conv1d, group_norm
from .params import ParamStore, uniform_init
from .tensor import ConfigError, Tensor

DEFAULT_KERNELS = (3, 5, 7, 9)


@dataclass
class MsaParams:
    kernels: tuple[int, ...]
    dw_weight: list[Tensor]
    dw_bias: list[Tensor]
    gn_h: tuple[Tensor, Tensor]
    gn_w: tuple[Tensor, Tensor]
    eps: float = 1e-5

    @property
    def K(self) -> int:
        return len(self.kernels)

    @property
    def channels(self) -> int:
        return self.gn_h[0].shape[0]

    @classmethod
    def init(cls, store: ParamStore, channels: int, kernels=DEFAULT_KERNELS,
             rng: np.random.Generator | None = None, prefix: str = "msa",
             eps: float = 1e-5) -> "MsaParams":
        kernels = tuple(int(k) for k in kernels)
        _validate(channels, kernels)
        rng = np.random.default_rng(0) if rng is None else rng
        g = channels // len(kernels)
        for i, k in enumerate(kernels):
            store.add(f"{prefix}.dw.{i}.weight", uniform_init(rng, (g, k), k))
            store.add(f"{prefix}.dw.{i}.bias", np.zeros(g))
        for branch in ("gn_h", "gn_w"):
            store.add(f"{prefix}.{branch}.gamma", np.ones(channels))
            store.add(f"{prefix}.{branch}.beta", np.zeros(channels))
        return cls.from_store(store, kernels, prefix, eps)

    @classmethod
    def from_store(cls, store: ParamStore, kernels, prefix: str = "msa",
                   eps: float = 1e-5) -> "MsaParams":
        kernels = tuple(int(k) for k in kernels)
        return cls(
            kernels=kernels,
            dw_weight=[store[f"{prefix}.dw.{i}.weight"] for i in range(len(kernels))],
            dw_bias=[store[f"{prefix}.dw.{i}.bias"] for i in range(len(kernels))],
            gn_h=(store[f"{prefix}.gn_h.gamma"], store[f"{prefix}.gn_h.beta"]),
            gn_w=(store[f"{prefix}.gn_w.gamma"], store[f"{prefix}.gn_w.beta"]),
            eps=eps,
        )


def _validate(channels: int, kernels) -> None:
    if not kernels:
        raise ConfigError("MSA needs at least one kernel")
    if channels % len(kernels):
        raise ConfigError(f"channels ({channels}) not divisible by K={len(kernels)}")
    bad = [k for k in kernels if k < 1 or k % 2 == 0]
    if bad:
        raise ConfigError(f"MSA kernels must be odd, got {bad}")


def split_channels(x: Tensor, K: int) -> list[Tensor]:
    """Cut (C, L) into K consecutive (C/K, L) blocks."""
    if x.shape[0] % K:
        raise ConfigError(f"cannot split {x.shape[0]} channels into K={K} sub-features")
    return T.split(x, K, axis=0)


def msa_pool(x: Tensor) -> tuple[Tensor, Tensor]:
    """Return (mean over H -> (C, W), mean over W -> (C, H))."""
    return T.mean(x, axis=1), T.mean(x, axis=2)


def _branch(desc: Tensor, p: MsaParams, gamma: Tensor, beta: Tensor) -> Tensor:
    parts = split_channels(desc, p.K)
    convolved = [depthwise_conv1d(part, w, b) for part, w, b in zip(parts, p.dw_weight, p.dw_bias)]
    return T.sigmoid(group_norm(T.concat(convolved, axis=0), p.K, gamma, beta, p.eps))


def msa_forward(x: Tensor, p: MsaParams) -> tuple[Tensor, Tensor, Tensor]:
    """Gate ``x`` (C, H, W) by the height- and width-wise attention maps.

    Returns ``(x1, a_h, a_w)`` with ``a_h`` of shape (C, W) and ``a_w`` of
    shape (C, H).
    """
    C, H, W = x.shape
    _validate(C, p.kernels)
    x_h, x_w = msa_pool(x)
    a_h = _branch(x_h, p, *p.gn_h)
    a_w = _branch(x_w, p, *p.gn_w)
    x1 = T.mul(T.mul(x, T.reshape(a_h, (C, 1, W))), T.reshape(a_w, (C, H, 1)))
    return x1, a_h, a_w


def msa_cost(C: int, H: int, W: int, kernels) -> tuple[int, int]:
    """(trainable scalars, flops) of one MSA forward at (C, H, W)."""
    K = len(kernels)
    g = C // K
    params = sum(g * k + g for k in kernels) + 4 * C
    flops = 2 * C * H * W  # the two axis means
    for L in (W, H):
        flops += sum(2 * g * L * k + g * L for k in kernels)
        flops += 2 * C * L  # group norm + sigmoid
    flops += 2 * C * H * W  # two gating products
    return params, flops
