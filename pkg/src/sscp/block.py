"""The SSCP block: MSA -> SRGA -> residual add -> CSA, plus ablation variants.

Variant names
-------------
``"sscp"`` (alias ``"canonical"``, ``"msa->srga->csa"``)
    the full block.
``"msa"``, ``"msa+srga"``, ``"srga+csa"`` ...
    a component subset run in canonical order.
``"srga->csa->msa"`` ...
    an explicit order.  Each stage consumes the previous stage's output; the
    residual add is only inserted where SRGA directly follows MSA.
``"parallel"``
    ``CSA(MSA(x) + SRGA(x))``.
``"none"`` (alias ``"-"``)
    identity.

Cost convention: one multiply-accumulate counts as 2 flops; every other
arithmetic step, including norms, activations and pooling reads, counts 1 per
element it produces (pooling counts its window reads).  Reshapes are free.
"""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .csa import CsaParams, csa_apply, csa_cost
from .msa import DEFAULT_KERNELS, MsaParams, msa_cost, msa_forward
from .params import ParamStore
from .srga import SrgaParams, check_dims, srga_cost, srga_forward
from .tensor import ConfigError, Tensor

COMPONENTS = ("msa", "srga", "csa")
CANONICAL = "msa->srga->csa"

# row order of the component on/off ablation table
COMPONENT_VARIANTS = ("none", "msa", "msa+srga", "srga", "srga+csa", "csa", "msa+csa", "msa+srga+csa")
# row order of the assembly-order ablation table
ORDER_VARIANTS = ("none", "srga->csa->msa", "csa->msa->srga", "csa->srga->msa",
                  "msa->csa->srga", "srga->msa->csa", "parallel", "sscp")


@dataclass(frozen=True)
class VariantSpec:
    stages: tuple[str, ...] = COMPONENTS
    parallel: bool = False
    residual_add: bool = True

    @property
    def enabled(self) -> frozenset[str]:
        return frozenset(self.stages)

    def fusions(self) -> int:
        """How many residual additions this variant performs."""
        if self.parallel:
            return 1
        if not self.residual_add:
            return 0
        return sum(1 for a, b in zip(self.stages, self.stages[1:]) if (a, b) == ("msa", "srga"))


def parse_variant(name: str) -> VariantSpec:
    raw = name.strip().lower()
    if raw in ("none", "-", "identity", ""):
        return VariantSpec(stages=())
    if raw in ("sscp", "canonical"):
        return VariantSpec()
    if raw == "parallel":
        return VariantSpec(parallel=True)
    if "->" in raw:
        stages = tuple(s.strip() for s in raw.split("->"))
        ordered = True
    else:
        stages = tuple(s.strip() for s in raw.split("+"))
        ordered = False
    unknown = [s for s in stages if s not in COMPONENTS]
    if unknown:
        raise ConfigError(f"unknown component(s) {unknown} in variant {name!r}; "
                          f"components are {list(COMPONENTS)}; named variants: "
                          f"{sorted(set(COMPONENT_VARIANTS) | set(ORDER_VARIANTS))}")
    if len(set(stages)) != len(stages):
        raise ConfigError(f"variant {name!r} repeats a component")
    if not ordered:
        stages = tuple(c for c in COMPONENTS if c in stages)
    return VariantSpec(stages=stages)


@dataclass
class SscpConfig:
    channels: int = 64
    height: int = 8
    width: int = 8
    kernels: tuple[int, ...] = DEFAULT_KERNELS
    p1: int = 8
    p2: int = 8
    pool_kernel: int = 7
    pool_stride: int = 7
    gn_eps: float = 1e-5
    bn_eps: float = 1e-5
    variant: str = "sscp"
    K: int | None = None

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        if self.K is None:
            self.K = len(self.kernels)
        if self.K != len(self.kernels):
            raise ConfigError(f"K={self.K} but {len(self.kernels)} kernels given")

    @property
    def spec(self) -> VariantSpec:
        return parse_variant(self.variant)

    def validate(self) -> None:
        spec = self.spec
        if "msa" in spec.enabled:
            if self.channels % self.K:
                raise ConfigError(f"channels ({self.channels}) not divisible by K={self.K}")
            if any(k % 2 == 0 for k in self.kernels):
                raise ConfigError(f"kernels must be odd: {list(self.kernels)}")
        if "srga" in spec.enabled:
            check_dims(self.channels, self.height * self.width, self.p1, self.p2)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kernels"] = list(self.kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SscpConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown SSCP config key(s): {unknown}")
        return cls(**d)


@dataclass
class SscpParams:
    msa: MsaParams | None = None
    srga: SrgaParams | None = None
    csa: CsaParams | None = None


def init_sscp(cfg: SscpConfig, store: ParamStore | None = None, rng: np.random.Generator | None = None,
              prefix: str = "") -> tuple[SscpParams, ParamStore]:
    """Create parameters for every enabled component of ``cfg.variant``."""
    cfg.validate()
    store = ParamStore() if store is None else store
    rng = np.random.default_rng(0) if rng is None else rng
    en = cfg.spec.enabled
    p = SscpParams()
    if "msa" in en:
        p.msa = MsaParams.init(store, cfg.channels, cfg.kernels, rng, prefix + "msa", cfg.gn_eps)
    if "srga" in en:
        p.srga = SrgaParams.init(store, cfg.channels, cfg.height, cfg.width, cfg.p1, cfg.p2,
                                 rng, prefix + "srga", cfg.bn_eps)
    if "csa" in en:
        p.csa = CsaParams.init(store, cfg.channels, rng, prefix + "csa", cfg.pool_kernel, cfg.pool_stride)
    return p, store


def sscp_from_store(cfg: SscpConfig, store: ParamStore, prefix: str = "") -> SscpParams:
    en = cfg.spec.enabled
    return SscpParams(
        msa=MsaParams.from_store(store, cfg.kernels, prefix + "msa", cfg.gn_eps) if "msa" in en else None,
        srga=SrgaParams.from_store(store, cfg.p1, cfg.p2, prefix + "srga", cfg.bn_eps) if "srga" in en else None,
        csa=CsaParams.from_store(store, prefix + "csa", cfg.pool_kernel, cfg.pool_stride) if "csa" in en else None,
    )


Forward = Callable[..., Tensor]


def build_variant(spec: VariantSpec, cfg: SscpConfig | None = None) -> Forward:
    """Return ``forward(x, params, train=True, trace=None) -> Tensor``.

    ``trace``, when a dict, receives the output of every stage keyed by
    component name (and ``"add"`` for the residual fusion).
    """
    stages = spec.stages
    if len(set(stages)) != len(stages) or any(s not in COMPONENTS for s in stages):
        raise ConfigError(f"invalid stage list {stages}")

    def run(name: str, x: Tensor, p: SscpParams, train: bool) -> Tensor:
        if name == "msa":
            return msa_forward(x, p.msa)[0]
        if name == "srga":
            return srga_forward(x, dataclasses.replace(p.srga, train=train))[0]
        return csa_apply(x, p.csa)[0]

    def forward(x: Tensor, p: SscpParams, train: bool = True, trace: dict | None = None) -> Tensor:
        trace = {} if trace is None else trace
        if spec.parallel:
            x1 = trace["msa"] = run("msa", x, p, train)
            x2 = trace["srga"] = run("srga", x, p, train)
            x3 = trace["add"] = T.add(x1, x2)
            trace["csa"] = out = run("csa", x3, p, train)
            return out
        cur, i = x, 0
        while i < len(stages):
            name = stages[i]
            out = trace[name] = run(name, cur, p, train)
            if name == "msa" and spec.residual_add and stages[i + 1:i + 2] == ("srga",):
                x2 = trace["srga"] = run("srga", out, p, train)
                out = trace["add"] = T.add(out, x2)
                i += 1
            cur = out
            i += 1
        return cur

    return forward


def sscp_forward(x: Tensor, cfg: SscpConfig, params: SscpParams, train: bool = True,
                 trace: dict | None = None) -> Tensor:
    C, H, W = x.shape
    if (C, H, W) != (cfg.channels, cfg.height, cfg.width):
        raise T.ShapeError(f"input {x.shape} does not match config "
                           f"({cfg.channels}, {cfg.height}, {cfg.width})")
    return build_variant(cfg.spec, cfg)(x, params, train=train, trace=trace)


def component_costs(cfg: SscpConfig, input_shape: tuple[int, int, int] | None = None) -> dict[str, tuple[int, int]]:
    """Per-component (params, flops) of one forward; ``"add"`` is the residual fusion."""
    C, H, W = input_shape or (cfg.channels, cfg.height, cfg.width)
    spec = cfg.spec
    out = {}
    if "msa" in spec.enabled:
        out["msa"] = msa_cost(C, H, W, cfg.kernels)
    if "srga" in spec.enabled:
        out["srga"] = srga_cost(C, H, W, cfg.p1, cfg.p2)
    if "csa" in spec.enabled:
        out["csa"] = csa_cost(C, H, W, cfg.pool_kernel, cfg.pool_stride)
    if spec.fusions():
        out["add"] = (0, spec.fusions() * C * H * W)
    return out


def count_params_flops(cfg: SscpConfig, input_shape: tuple[int, int, int] | None = None) -> tuple[int, int]:
    costs = component_costs(cfg, input_shape)
    return sum(p for p, _ in costs.values()), sum(f for _, f in costs.values())


def all_orders() -> list[str]:
    """Every sequential ordering of the three components."""
    return ["->".join(p) for p in itertools.permutations(COMPONENTS)]
