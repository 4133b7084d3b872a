"""Structural relation-aware global attention.

Every spatial position is a graph node.  Nodes are embedded twice, their
pairwise dot products form an N x N affinity matrix, and each node's row and
column of that matrix (its relation vector) is embedded together with a
channel-pooled embedding of the node itself.  A two-layer head turns the
result into one sigmoid weight per position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .functional import batch_norm, pointwise_conv
from .params import ParamStore, add_conv_bn
from .tensor import ConfigError, Tensor

EMBEDDINGS = ("phi", "psi", "theta", "eta", "w1", "w2")


def head_width(n: int, p1: int, p2: int) -> int:
    """Width of the first head layer: ceil((1 + N/p1) / p2), at least 1."""
    return max(1, math.ceil((1 + n // p1) / p2))


def check_dims(channels: int, n: int, p1: int, p2: int) -> None:
    if p1 < 1 or p2 < 1:
        raise ConfigError("p1 and p2 must be positive integers")
    if channels % p1:
        raise ConfigError(f"channels ({channels}) not divisible by p1={p1}")
    if n % p1:
        raise ConfigError(f"N=H*W ({n}) not divisible by p1={p1}")


@dataclass
class ConvBN:
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    mean: Tensor
    var: Tensor

    def __call__(self, x: Tensor, train: bool, eps: float) -> Tensor:
        return batch_norm(pointwise_conv(x, self.weight), self.gamma, self.beta,
                          self.mean, self.var, eps=eps, train=train)


@dataclass
class SrgaParams:
    p1: int
    p2: int
    phi: ConvBN
    psi: ConvBN
    theta: ConvBN
    eta: ConvBN
    w1: ConvBN
    w2: ConvBN
    eps: float = 1e-5
    train: bool = True

    @classmethod
    def init(cls, store: ParamStore, channels: int, height: int, width: int, p1: int = 8,
             p2: int = 8, rng: np.random.Generator | None = None, prefix: str = "srga",
             eps: float = 1e-5) -> "SrgaParams":
        n = height * width
        check_dims(channels, n, p1, p2)
        rng = np.random.default_rng(0) if rng is None else rng
        cr, m = channels // p1, n // p1
        hw = head_width(n, p1, p2)
        shapes = {
            "phi": (cr, channels), "psi": (cr, channels), "theta": (cr, channels),
            "eta": (m, 2 * n), "w1": (hw, 1 + m), "w2": (1, hw),
        }
        for name in EMBEDDINGS:
            add_conv_bn(store, f"{prefix}.{name}", *shapes[name], rng)
        return cls.from_store(store, p1, p2, prefix, eps)

    @classmethod
    def from_store(cls, store: ParamStore, p1: int, p2: int, prefix: str = "srga",
                   eps: float = 1e-5) -> "SrgaParams":
        blocks = {
            name: ConvBN(*(store[f"{prefix}.{name}.{s}"]
                           for s in ("weight", "bn_gamma", "bn_beta", "bn_mean", "bn_var")))
            for name in EMBEDDINGS
        }
        return cls(p1=p1, p2=p2, eps=eps, **blocks)


@dataclass
class AffinityMatrix:
    """Pairwise node affinities; nodes follow raster order over (h, w)."""
    r: Tensor

    @property
    def n(self) -> int:
        return self.r.shape[0]


def _nodes(x1: Tensor) -> Tensor:
    C, H, W = x1.shape
    return T.reshape(x1, (C, H * W))


def pairwise_affinity(x1: Tensor, p: SrgaParams) -> AffinityMatrix:
    C, H, W = x1.shape
    check_dims(C, H * W, p.p1, p.p2)
    nodes = _nodes(x1)
    phi = T.relu(p.phi(nodes, p.train, p.eps))
    psi = T.relu(p.psi(nodes, p.train, p.eps))
    return AffinityMatrix(T.matmul(T.transpose(phi), psi))


def relation_vector(rs: AffinityMatrix, u: int) -> Tensor:
    """Relation vector of node ``u`` (1-based): row u followed by column u."""
    n = rs.n
    if not 1 <= u <= n:
        raise IndexError(f"node index {u} outside 1..{n}")
    return T.concat([rs.r[u - 1, :], rs.r[:, u - 1]], axis=0)


def relation_matrix(rs: AffinityMatrix) -> Tensor:
    """All relation vectors at once as a (2N, N) matrix, column u = r_u."""
    return T.concat([T.transpose(rs.r), rs.r], axis=0)


def structural_features(x1: Tensor, rs: AffinityMatrix, p: SrgaParams) -> Tensor:
    """Stack of y~_u as columns: (1 + N/p1, N)."""
    nodes = _nodes(x1)
    theta = T.relu(p.theta(nodes, p.train, p.eps))
    pooled = T.mean(theta, axis=0, keepdims=True)
    eta = T.relu(p.eta(relation_matrix(rs), p.train, p.eps))
    return T.concat([pooled, eta], axis=0)


def srga_forward(x1: Tensor, p: SrgaParams) -> tuple[Tensor, Tensor]:
    """Gate ``x1`` (C, H, W) by per-position attention; returns (x2, a) with a (H, W)."""
    C, H, W = x1.shape
    rs = pairwise_affinity(x1, p)
    y = structural_features(x1, rs, p)
    hidden = T.relu(p.w1(y, p.train, p.eps))
    a = T.sigmoid(p.w2(hidden, p.train, p.eps))
    a = T.reshape(a, (H, W))
    return T.mul(x1, T.reshape(a, (1, H, W))), a


def srga_cost(C: int, H: int, W: int, p1: int, p2: int) -> tuple[int, int]:
    n = H * W
    cr, m = C // p1, n // p1
    hw = head_width(n, p1, p2)
    shapes = [(cr, C)] * 3 + [(m, 2 * n), (hw, 1 + m), (1, hw)]
    params = sum(o * i + 2 * o for o, i in shapes)
    flops = 0
    for o, i in shapes:
        flops += 2 * o * i * n + o * n  # 1x1 conv + batch norm
    flops += 3 * cr * n + m * n + hw * n  # relus on phi, psi, theta, eta, w1
    flops += 2 * n * cr * n  # affinity product
    flops += cr * n  # channel mean of theta
    flops += n  # sigmoid
    flops += C * n  # gating
    return params, flops
