"""Change-detection scores and Welch's t-test.

Dataset-level scores are micro-averaged: confusion counts are summed over all
images first and the formulas are applied once to the totals.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

UNDEFINED = "–"
COLUMNS = ("f1", "precision", "recall", "iou", "oa")
HEADERS = {"f1": "F1", "precision": "Pre", "recall": "Rec", "iou": "IoU", "oa": "OA"}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class MetricReport:
    """Scores in [0, 1]; ``None`` marks a score whose denominator is zero."""
    oa: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    iou: float | None

    def as_percent(self) -> dict[str, str]:
        return {k: UNDEFINED if getattr(self, k) is None else f"{100 * getattr(self, k):.2f}"
                for k in COLUMNS}


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise DataError(f"{name} mask contains values other than 0 and 1")
    return arr.astype(bool)


def confusion_from_masks(pred, truth) -> ConfusionCounts:
    p, t = np.asarray(pred), np.asarray(truth)
    if p.shape != t.shape:
        raise DataError(f"mask shapes differ: {p.shape} vs {t.shape}")
    p, t = _binary(p, "predicted"), _binary(t, "ground-truth")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def metric_report(c: ConfusionCounts) -> MetricReport:
    if c.total <= 0:
        raise DataError("no pixels to score")
    pre = _ratio(c.tp, c.tp + c.fp)
    rec = _ratio(c.tp, c.tp + c.fn)
    if pre is None or rec is None or pre + rec == 0:
        f1 = None
    else:
        f1 = 2 * pre * rec / (pre + rec)
    return MetricReport(
        oa=_ratio(c.tp + c.tn, c.total),
        precision=pre,
        recall=rec,
        f1=f1,
        iou=_ratio(c.tp, c.tp + c.fn + c.fp),
    )


def aggregate(counts: Iterable[ConfusionCounts]) -> MetricReport:
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return metric_report(total)


# -- reporting -------------------------------------------------------------

def report_rows(named: Sequence[tuple[str, MetricReport]]) -> list[list[str]]:
    rows = [["name"] + [HEADERS[k] for k in COLUMNS]]
    for name, rep in named:
        pct = rep.as_percent()
        rows.append([name] + [pct[k] for k in COLUMNS])
    return rows


def report_csv(named: Sequence[tuple[str, MetricReport]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(report_rows(named))
    return buf.getvalue()


def format_table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        cells = [str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths))]
        lines.append("  ".join(cells))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_table(named: Sequence[tuple[str, MetricReport]]) -> str:
    return format_table(report_rows(named))


# -- Student t distribution ------------------------------------------------

def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 500) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float, xc: float | None = None) -> float:
    """Regularised incomplete beta I_x(a, b).

    ``xc`` optionally supplies ``1 - x`` computed without cancellation.
    """
    xc = 1.0 - x if xc is None else xc
    if x <= 0.0:
        return 0.0
    if xc <= 0.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(xc))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, xc) / b


def t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student t with ``df``."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t), t * t / (df + t * t))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_sf2(t, df)
    return 1.0 - tail if t >= 0 else tail


def t_ppf(q: float, df: float) -> float:
    """Quantile of Student t by bisection on :func:`t_cdf`."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must be in (0, 1)")
    lo, hi = -1.0, 1.0
    while t_cdf(lo, df) > q:
        lo *= 2
    while t_cdf(hi, df) < q:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


class WelchResult(NamedTuple):
    t: float
    df: float
    p: float
    ci95: tuple[float, float]


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    """Two-sided unequal-variance t-test of mean(a) - mean(b)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise DataError("each sample needs at least two values")
    va, vb = float(a.var(ddof=1)) / a.size, float(b.var(ddof=1)) / b.size
    diff = float(a.mean() - b.mean())
    se = math.sqrt(va + vb)
    if se == 0.0:
        if diff == 0.0:
            return WelchResult(0.0, float("nan"), 1.0, (0.0, 0.0))
        return WelchResult(math.copysign(math.inf, diff), float("nan"), 0.0, (diff, diff))
    t = diff / se
    df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = min(1.0, t_sf2(t, df))
    half = t_ppf(0.975, df) * se
    return WelchResult(t, df, p, (diff - half, diff + half))
