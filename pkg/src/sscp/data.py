"""Bi-temporal datasets: PNG loading, synthetic water scenes, splits.

On-disk layout::

    root/A/NAME.png      image at time 1
    root/B/NAME.png      image at time 2
    root/label/NAME.png  change mask, pixels in {0, 255}
"""
from __future__ import annotations

import json
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .metrics import DataError
from .tensor import ConfigError

SUBDIRS = ("A", "B", "label")


@dataclass
class ChangeSample:
    t1: np.ndarray  # (3, H, W) in [0, 1]
    t2: np.ndarray
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str
    rasters: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        H, W = self.mask.shape
        if self.t1.shape != (3, H, W) or self.t2.shape != (3, H, W):
            raise DataError(f"sample {self.id}: image/mask shapes disagree")


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def to_json(self) -> str:
        return json.dumps({"train": self.train, "val": self.val, "test": self.test}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        return cls(list(d["train"]), list(d["val"]), list(d["test"]))


# -- PNG I/O ---------------------------------------------------------------

def box_downscale(arr: np.ndarray, factor: int) -> np.ndarray:
    """Integer-factor mean filter over the last two axes."""
    if factor == 1:
        return arr
    *lead, H, W = arr.shape
    if H % factor or W % factor:
        raise DataError(f"{H}x{W} is not divisible by downscale factor {factor}")
    return arr.reshape(*lead, H // factor, factor, W // factor, factor).mean(axis=(-3, -1))


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise DataError(f"{path.name}: label pixel value {int(arr[bad][0])} outside {{0, 255}}")
    return (arr == 255).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def write_gray(path, arr: np.ndarray) -> None:
    """Save a real-valued map as an 8-bit PNG stretched to its own range."""
    a = np.asarray(arr, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)


def write_image(path, img: np.ndarray) -> None:
    rgb = np.round(np.clip(img, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)


def load_dataset(root, downscale: int = 1) -> list[ChangeSample]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    dirs = [root / d for d in SUBDIRS]
    names = sorted({p.stem for d in dirs if d.is_dir() for p in d.glob("*.png")})
    samples = []
    for name in names:
        paths = [d / f"{name}.png" for d in dirs]
        missing = [str(p.relative_to(root)) for p in paths if not p.is_file()]
        if missing:
            raise DataError(f"sample {name!r} is missing {', '.join(missing)}")
        t1, t2 = read_image(paths[0]), read_image(paths[1])
        mask = read_mask(paths[2])
        if downscale > 1:
            t1, t2 = box_downscale(t1, downscale), box_downscale(t2, downscale)
            mask = (box_downscale(mask.astype(np.float64), downscale) >= 0.5).astype(np.uint8)
        samples.append(ChangeSample(t1, t2, mask, name))
    return samples


def save_dataset(samples: Sequence[ChangeSample], root) -> None:
    root = Path(root)
    for d in SUBDIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / "A" / f"{s.id}.png", s.t1)
        write_image(root / "B" / f"{s.id}.png", s.t2)
        write_mask(root / "label" / f"{s.id}.png", s.mask)


# -- synthetic scenes ------------------------------------------------------

@dataclass
class Ellipse:
    cx: float
    cy: float
    rx: float
    ry: float
    angle: float

    def sdf(self, yy, xx):
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (xx - self.cx) * c + (yy - self.cy) * s
        v = -(xx - self.cx) * s + (yy - self.cy) * c
        return (np.sqrt((u / self.rx) ** 2 + (v / self.ry) ** 2) - 1.0) * min(self.rx, self.ry)


@dataclass
class Polyline:
    points: list[tuple[float, float]]  # (x, y)
    width: float

    def sdf(self, yy, xx):
        best = np.full(xx.shape, np.inf)
        for (x0, y0), (x1, y1) in zip(self.points, self.points[1:]):
            dx, dy = x1 - x0, y1 - y0
            t = ((xx - x0) * dx + (yy - y0) * dy) / max(dx * dx + dy * dy, 1e-12)
            t = np.clip(t, 0.0, 1.0)
            best = np.minimum(best, np.hypot(xx - x0 - t * dx, yy - y0 - t * dy))
        return best - self.width / 2.0


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def water_sdf(regions: Sequence, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    out = np.full((size, size), np.inf)
    for r in regions:
        out = np.minimum(out, r.sdf(yy, xx))
    return out


def water_raster(regions: Sequence, size: int) -> np.ndarray:
    """Hard (binary) water raster of a region list."""
    return (water_sdf(regions, size) <= 0).astype(np.uint8)


def _random_region(rng: np.random.Generator, size: int):
    if rng.random() < 0.55:
        return Ellipse(cx=rng.uniform(0.15, 0.85) * size, cy=rng.uniform(0.15, 0.85) * size,
                       rx=rng.uniform(0.06, 0.18) * size, ry=rng.uniform(0.05, 0.14) * size,
                       angle=rng.uniform(0, math.pi))
    n = int(rng.integers(2, 5))
    x = np.linspace(0, size, n) + rng.uniform(-0.1, 0.1, n) * size
    y = rng.uniform(0.1, 0.9) * size + np.cumsum(rng.uniform(-0.25, 0.25, n)) * size
    pts = list(zip(x.tolist(), y.tolist()))
    if rng.random() < 0.5:
        pts = [(py, px) for px, py in pts]
    return Polyline(pts, width=rng.uniform(0.04, 0.09) * size)


def _jitter(region, rng: np.random.Generator, size: int):
    if isinstance(region, Ellipse):
        k = rng.uniform(0.75, 1.35)
        return Ellipse(region.cx + rng.normal(0, 0.04) * size, region.cy + rng.normal(0, 0.04) * size,
                       region.rx * k, region.ry * rng.uniform(0.75, 1.35), region.angle)
    return Polyline(region.points, region.width * rng.uniform(0.6, 1.8))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.random((3, size // 8, size // 8))
    tex = coarse.repeat(8, axis=1).repeat(8, axis=2)
    k = np.ones(5) / 5
    for ax in (1, 2):
        tex = np.apply_along_axis(lambda v: np.convolve(np.pad(v, 2, mode="edge"), k, "valid"), ax, tex)
    base = np.array([0.42, 0.50, 0.30]) + rng.uniform(-0.06, 0.06, 3)  # vegetation/soil
    return np.clip(base[:, None, None] + 0.18 * (tex - 0.5), 0, 1)


def render_scene(regions: Sequence, size: int, rng: np.random.Generator,
                 background: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Anti-aliased image and hard raster for a list of water regions."""
    bg = _background(rng, size) if background is None else background
    sdf = water_sdf(regions, size)
    cover = np.clip(0.5 - sdf, 0.0, 1.0)
    water = np.array([0.10, 0.22, 0.38]) + rng.uniform(-0.03, 0.03, 3)
    img = bg * (1 - cover) + water[:, None, None] * cover
    img = np.clip(img + rng.normal(0, 0.015, img.shape), 0, 1)
    return img, (sdf <= 0).astype(np.uint8)


def synth_pair(regions_t1: Sequence, regions_t2: Sequence, size: int, rng: np.random.Generator,
               id: str = "pair") -> ChangeSample:
    bg = _background(rng, size)
    # mild seasonal shift between the two acquisitions
    bg2 = np.clip(bg + rng.uniform(-0.03, 0.03, (3, 1, 1)), 0, 1)
    img1, r1 = render_scene(regions_t1, size, rng, bg)
    img2, r2 = render_scene(regions_t2, size, rng, bg2)
    return ChangeSample(img1, img2, (r1 ^ r2).astype(np.uint8), id, rasters=(r1, r2))


def synth_generate(n: int, size: int = 64, seed: int = 0, debug: bool = False,
                   max_tries: int = 100) -> list[ChangeSample]:
    """Deterministic synthetic water-change pairs.

    Each image holds 1-3 lake/waterway regions.  Time 2 keeps some of the
    time-1 regions (resized or shifted) and may add new ones, so the change
    mask (XOR of the two rasters) covers partial overlaps.  Samples whose
    mask is empty or covers half the scene or more are redrawn.
    """
    if size < 32 or size % 8:
        raise ConfigError(f"synthetic size must be >= 32 and a multiple of 8, got {size}")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        for _ in range(max_tries):
            first = [_random_region(rng, size) for _ in range(int(rng.integers(1, 4)))]
            keep = [r for r in first if rng.random() < 0.7] or first[:1]
            second = [_jitter(r, rng, size) if rng.random() < 0.6 else r for r in keep]
            room = 3 - len(second)
            second += [_random_region(rng, size) for _ in range(int(rng.integers(0, room + 1)))]
            if rng.random() < 0.5:
                first, second = second, first
            sample = synth_pair(first, second, size, rng, id=f"synth_{seed}_{i:04d}")
            frac = sample.mask.mean()
            if 0 < frac < 0.5:
                break
        else:
            raise RuntimeError(f"could not draw a valid synthetic sample {i}")
        if not debug:
            sample.rasters = None
        out.append(sample)
    return out


# -- splitting -------------------------------------------------------------

def split_sizes(n: int, ratios: Sequence[float] = (7, 1, 2)) -> list[int]:
    """Largest-remainder apportionment; ties go to the earlier subset."""
    if any(r <= 0 for r in ratios):
        raise ConfigError("split ratios must be positive")
    total = Fraction(sum(Fraction(r) for r in ratios))
    exact = [n * Fraction(r) / total for r in ratios]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(samples: Sequence[ChangeSample], ratios: Sequence[float] = (7, 1, 2),
                  seed: int = 0) -> DatasetSplit:
    ids = [s.id for s in samples]
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    a, b, _ = split_sizes(len(ids), ratios)
    return DatasetSplit(shuffled[:a], shuffled[a:a + b], shuffled[a + b:])
