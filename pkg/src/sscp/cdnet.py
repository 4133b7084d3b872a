"""Toy siamese change-detection network around the SSCP block.

Both acquisitions go through one shared encoder (3x3 conv, group norm, ReLU,
2x average-pool per stage).  SSCP refines the deepest feature of each branch,
the branches are compared by absolute difference at every scale, and a small
decoder (nearest upsample, concat skip difference, 3x3 conv, ReLU) maps the
result back to a per-pixel change probability.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .block import SscpConfig, SscpParams, build_variant, init_sscp, sscp_from_store
from .data import ChangeSample
from .functional import avg_pool2d, bce_loss, conv2d, group_norm2d, upsample_nearest2d
from .metrics import ConfusionCounts, DataError, confusion_from_masks, metric_report
from .params import ParamStore, uniform_init
from .tensor import ConfigError, ShapeError, Tensor, no_grad

log = logging.getLogger(__name__)

THRESHOLD = 0.5


class StateError(RuntimeError):
    pass


@dataclass
class CdNetConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    image_size: int = 64
    gn_groups: int = 4
    share_sscp_across_time: bool = True
    sscp: SscpConfig = field(default_factory=SscpConfig)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if isinstance(self.sscp, dict):
            self.sscp = SscpConfig.from_dict(self.sscp)
        side = self.deep_size
        # the block always runs at the deepest encoder resolution
        self.sscp = dataclasses.replace(self.sscp, channels=self.widths[-1], height=side, width=side)

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def deep_size(self) -> int:
        if self.image_size % (2 ** self.depth):
            raise ShapeError(f"image size {self.image_size} not divisible by 2^{self.depth}")
        return self.image_size // 2 ** self.depth

    def validate(self):
        if self.deep_size < 2:
            raise ConfigError("deepest feature map must be at least 2x2")
        if any(w % self.gn_groups for w in self.widths):
            raise ConfigError(f"encoder widths {self.widths} not divisible by {self.gn_groups} groups")
        self.sscp.validate()

    def sscp_prefixes(self) -> tuple[str, str]:
        if self.share_sscp_across_time:
            return "sscp.", "sscp."
        return "sscp_t1.", "sscp_t2."

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["sscp"] = self.sscp.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CdNetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown network config key(s): {unknown}")
        return cls(**d)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    iterations: int = 500
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hflip: bool = False

    def validate(self):
        for name in ("lr", "weight_decay", "eps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("AdamW betas must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown training config key(s): {unknown}")
        return cls(**d)


@dataclass
class CdNet:
    cfg: CdNetConfig
    store: ParamStore
    sscp: tuple[SscpParams, SscpParams]


def init_cdnet(cfg: CdNetConfig, seed: int = 0) -> CdNet:
    cfg.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    cin = cfg.in_channels
    for i, w in enumerate(cfg.widths):
        store.add(f"enc.{i}.conv.weight", uniform_init(rng, (w, cin, 3, 3), cin * 9))
        store.add(f"enc.{i}.conv.bias", np.zeros(w))
        store.add(f"enc.{i}.gn.gamma", np.ones(w))
        store.add(f"enc.{i}.gn.beta", np.zeros(w))
        cin = w
    p1, p2 = cfg.sscp_prefixes()
    init_sscp(cfg.sscp, store, rng, prefix=p1)
    if p2 != p1:
        init_sscp(cfg.sscp, store, rng, prefix=p2)
    for j, (cin, cout) in enumerate(_decoder_shapes(cfg)):
        store.add(f"dec.{j}.conv.weight", uniform_init(rng, (cout, cin, 3, 3), cin * 9))
        store.add(f"dec.{j}.conv.bias", np.zeros(cout))
    last = cfg.widths[0]
    store.add("head.weight", uniform_init(rng, (1, last, 1, 1), last))
    store.add("head.bias", np.zeros(1))
    return bind(cfg, store)


def bind(cfg: CdNetConfig, store: ParamStore) -> CdNet:
    """Wrap an existing store (for example a loaded checkpoint)."""
    p1, p2 = cfg.sscp_prefixes()
    a = sscp_from_store(cfg.sscp, store, p1)
    b = a if p2 == p1 else sscp_from_store(cfg.sscp, store, p2)
    return CdNet(cfg, store, (a, b))


def _decoder_shapes(cfg: CdNetConfig) -> list[tuple[int, int]]:
    # stage j upsamples, concatenates the skip difference of encoder stage
    # depth-1-j, and convolves down to the next-shallower width
    widths = cfg.widths
    shapes, cur = [], widths[-1]
    for j in range(cfg.depth):
        skip = widths[cfg.depth - 1 - j]
        out = widths[max(cfg.depth - 2 - j, 0)]
        shapes.append((cur + skip, out))
        cur = out
    return shapes


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    return T.reshape(t, (1,) + t.shape) if t.ndim == 3 else t


def cdnet_forward(t1, t2, net: CdNet, train: bool = True, trace: dict | None = None) -> Tensor:
    """Change probability map (B, 1, H, W), or (1, H, W) for unbatched input.

    ``trace`` (a dict) receives deep features of the time-2 branch of the
    first sample before SSCP (``"pre_sscp"``), after each SSCP stage and
    after the block (``"post_sscp"``).
    """
    cfg, s = net.cfg, net.store
    single = (t1.ndim if isinstance(t1, Tensor) else np.ndim(t1)) == 3
    a, b = _as_batch(t1), _as_batch(t2)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    B, _, H, W = a.shape
    if H % 2 ** cfg.depth or W % 2 ** cfg.depth:
        raise ShapeError(f"{H}x{W} is not divisible by 2^{cfg.depth}")
    x = T.concat([a, b], axis=0)
    skips = []
    for i in range(cfg.depth):
        x = conv2d(x, s[f"enc.{i}.conv.weight"], s[f"enc.{i}.conv.bias"])
        x = T.relu(group_norm2d(x, cfg.gn_groups, s[f"enc.{i}.gn.gamma"], s[f"enc.{i}.gn.beta"]))
        skips.append(x)
        x = avg_pool2d(x, 2, 2)

    forward = build_variant(cfg.sscp.spec, cfg.sscp)
    refined = []
    for k, feat in enumerate(T.unstack(x)):
        params = net.sscp[0] if k < B else net.sscp[1]
        stage_trace = {} if (trace is not None and k == B) else None
        out = forward(feat, params, train=train, trace=stage_trace)
        if stage_trace is not None:
            trace["pre_sscp"] = feat.data
            trace.update({f"post_{n}": v.data for n, v in stage_trace.items()})
            trace["post_sscp"] = out.data
        refined.append(out)
    deep = T.stack(refined, axis=0)

    def diff(f):
        return T.absolute(T.sub(T.take(f, slice(0, B)), T.take(f, slice(B, 2 * B))))

    y = diff(deep)
    for j in range(cfg.depth):
        y = upsample_nearest2d(y, 2)
        y = T.concat([y, diff(skips[cfg.depth - 1 - j])], axis=1)
        y = T.relu(conv2d(y, s[f"dec.{j}.conv.weight"], s[f"dec.{j}.conv.bias"]))
    prob = T.sigmoid(conv2d(y, s["head.weight"], s["head.bias"]))
    return T.reshape(prob, (1, H, W)) if single else prob


# -- optimisation ----------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(store: ParamStore, state: AdamWState, tc: TrainConfig, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update of every trainable parameter."""
    lr = tc.lr if lr is None else lr
    params = store.trainable()
    missing = [k for k, p in params if p.grad is None]
    if missing:
        raise StateError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.step += 1
    t = state.step
    c1 = 1 - tc.beta1 ** t
    c2 = 1 - tc.beta2 ** t
    for k, p in params:
        g = p.grad
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= tc.beta1
        m += (1 - tc.beta1) * g
        v *= tc.beta2
        v += (1 - tc.beta2) * g * g
        p.data -= lr * ((m / c1) / (np.sqrt(v / c2) + tc.eps) + tc.weight_decay * p.data)


# -- training loop ---------------------------------------------------------

@dataclass
class TraceRow:
    iter: int
    loss: float
    f1: float | None
    iou: float | None


def _batch_arrays(samples: Sequence[ChangeSample], flip: np.ndarray | None = None):
    t1 = np.stack([s.t1 for s in samples])
    t2 = np.stack([s.t2 for s in samples])
    m = np.stack([s.mask for s in samples]).astype(np.float64)[:, None]
    if flip is not None:
        t1[flip], t2[flip], m[flip] = t1[flip][..., ::-1], t2[flip][..., ::-1], m[flip][..., ::-1]
    return t1, t2, m


def train(dataset: Sequence[ChangeSample], net_cfg: CdNetConfig, tc: TrainConfig,
          on_step: Callable[[TraceRow], None] | None = None) -> tuple[CdNet, list[TraceRow]]:
    """Fit the network; deterministic for a fixed ``tc.seed``."""
    if not dataset:
        raise DataError("training set is empty")
    tc.validate()
    net = init_cdnet(net_cfg, tc.seed)
    rng = np.random.default_rng([tc.seed, 1])
    state = AdamWState()
    order: list[int] = []
    bs = min(tc.batch_size, len(dataset))
    rows = []
    for it in range(1, tc.iterations + 1):
        if len(order) < bs:
            order += rng.permutation(len(dataset)).tolist()
        idx, order = order[:bs], order[bs:]
        flip = rng.random(bs) < 0.5 if tc.hflip else None
        t1, t2, target = _batch_arrays([dataset[i] for i in idx], flip)
        net.store.zero_grad()
        prob = cdnet_forward(t1, t2, net, train=True)
        loss = bce_loss(prob, target)
        loss.backward()
        adamw_step(net.store, state, tc)
        rep = metric_report(confusion_from_masks(prob.data >= THRESHOLD, target.astype(np.uint8)))
        row = TraceRow(it, loss.item(), rep.f1, rep.iou)
        rows.append(row)
        if on_step:
            on_step(row)
    return net, rows


def predict(net: CdNet, samples: Sequence[ChangeSample], batch_size: int = 8) -> list[np.ndarray]:
    """Eval-mode probability maps (H, W) per sample."""
    out = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            t1, t2, _ = _batch_arrays(samples[i:i + batch_size])
            prob = cdnet_forward(t1, t2, net, train=False)
            out.extend(p[0] for p in prob.data)
    return out


def evaluate(net: CdNet, samples: Sequence[ChangeSample]) -> tuple[ConfusionCounts, list[ConfusionCounts]]:
    per = [confusion_from_masks(p >= THRESHOLD, s.mask) for p, s in zip(predict(net, samples), samples)]
    total = ConfusionCounts()
    for c in per:
        total = total + c
    return total, per
