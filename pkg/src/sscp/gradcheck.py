"""Central-difference verification of reverse-mode gradients.

ReLU, abs and clamping make the objectives piecewise smooth.  When the
``±eps`` stencil of an entry lands on a different piece than the base point,
a central difference measures the average of two one-sided slopes rather
than the derivative.  Such entries are detected through
:class:`~sscp.tensor.KinkMonitor` and re-differenced with ``eps/10``,
``eps/100``, ... until the stencil stays on one piece.  The uncorrected error
is reported alongside.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .params import ParamStore
from .tensor import KinkMonitor, Tensor, no_grad

log = logging.getLogger(__name__)

MIN_EPS = 1e-8


class EvaluationError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_error: float = 0.0
    raw_max_error: float = 0.0
    checked: int = 0
    kinked: int = 0
    worst: tuple[str, int] | None = None
    per_path: dict[str, float] = field(default_factory=dict)


def _evaluate(f: Callable[[], Tensor]) -> tuple[float, KinkMonitor]:
    with KinkMonitor() as km:
        val = f().item()
    if not np.isfinite(val):
        raise EvaluationError(f"objective evaluated to {val}")
    return val, km


def grad_check_report(f: Callable[[], Tensor], inputs: ParamStore, eps: float = 1e-3,
                      paths: Iterable[str] | None = None,
                      entries: dict[str, Iterable[int]] | None = None,
                      kink_aware: bool = True) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` must rebuild its scalar objective from ``inputs`` on every call.
    The error for one scalar is ``|g_ad - g_fd| / max(1, |g_fd|)``.
    ``entries`` restricts the check to given flat indices per path.  Buffers
    (running statistics) are restored after each evaluation.
    """
    if not 1e-5 <= eps <= 1e-2:
        log.warning("grad_check eps=%g is outside the recommended [1e-5, 1e-2]", eps)
    names = list(paths) if paths is not None else [k for k, _ in inputs.trainable()]
    buffers = {k: t.data.copy() for k, t in inputs.items() if not t.requires_grad}

    def restore():
        for k, v in buffers.items():
            inputs[k].data[...] = v

    inputs.zero_grad()
    with KinkMonitor() as base:
        out = f()
    if not np.isfinite(out.item()):
        raise EvaluationError(f"objective evaluated to {out.item()}")
    out.backward()
    restore()

    rep = GradCheckReport()
    with no_grad():
        for name in names:
            t = inputs[name]
            g_ad = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy()
            flat = t.data.reshape(-1)
            idx = range(t.size) if entries is None or name not in entries else entries[name]
            path_worst = 0.0
            for i in idx:
                orig = flat[i]

                def central(h):
                    flat[i] = orig + h
                    fp, kp = _evaluate(f)
                    restore()
                    flat[i] = orig - h
                    fm, km = _evaluate(f)
                    restore()
                    flat[i] = orig
                    return (fp - fm) / (2 * h), base.same_piece(kp) and base.same_piece(km)

                g_fd, smooth = central(eps)
                raw = abs(g_ad[i] - g_fd) / max(1.0, abs(g_fd))
                err = raw
                if kink_aware and not smooth:
                    rep.kinked += 1
                    h = eps
                    while not smooth and h > MIN_EPS:
                        h /= 10
                        g_fd, smooth = central(h)
                    err = abs(g_ad[i] - g_fd) / max(1.0, abs(g_fd))
                rep.checked += 1
                rep.raw_max_error = max(rep.raw_max_error, raw)
                path_worst = max(path_worst, err)
                if err > rep.max_error or rep.worst is None:
                    rep.max_error = max(rep.max_error, err)
                    rep.worst = (name, int(i))
            rep.per_path[name] = path_worst
    return rep


def grad_check(f: Callable[[], Tensor], inputs: ParamStore, eps: float = 1e-3,
               paths: Iterable[str] | None = None,
               entries: dict[str, Iterable[int]] | None = None) -> float:
    """Max relative error between tape gradients and central differences."""
    return grad_check_report(f, inputs, eps, paths, entries).max_error
