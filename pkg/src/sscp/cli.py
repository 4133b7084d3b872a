"""``sscp`` command-line tool: train, eval, ablate, bench, gradcheck, synth.

Exit codes: 0 success, 1 validation or config error, 2 I/O error,
3 acceptance threshold failed.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .block import COMPONENT_VARIANTS, ORDER_VARIANTS, SscpConfig, component_costs, init_sscp, parse_variant
from .cdnet import (CdNet, CdNetConfig, TrainConfig, bind, cdnet_forward, evaluate, init_cdnet, train)
from .data import (ChangeSample, DatasetSplit, load_dataset, save_dataset, split_dataset, synth_generate,
                   write_gray, write_mask)
from .gradcheck import EvaluationError, grad_check_report
from .metrics import DataError, metric_report, report_csv, report_table
from .params import FormatError, ParamStore
from .tensor import ConfigError, ShapeError, Tensor, mul, no_grad, sum_all

log = logging.getLogger("sscp")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_THRESHOLD = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4
CONFIG_SECTIONS = ("sscp", "net", "train")
# small-shape default for gradient checks: 16 channels on an 8x8 grid
GRADCHECK_SSCP = {"channels": 16, "height": 8, "width": 8, "p1": 4, "p2": 4}
# desk-scale optimiser: a few hundred steps instead of tens of thousands
DESK_TRAIN = {"lr": 2e-3}


class ThresholdError(Exception):
    pass


# -- configuration ---------------------------------------------------------

def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(cfg) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s) {unknown}; expected {list(CONFIG_SECTIONS)}")
    return cfg


def net_config(cfg: dict, image_size: int, variant: str | None = None) -> CdNetConfig:
    net = dict(cfg.get("net", {}))
    sscp = SscpConfig.from_dict({**cfg.get("sscp", {}), **({"variant": variant} if variant else {})})
    net.setdefault("image_size", image_size)
    out = CdNetConfig.from_dict({**net, "sscp": sscp})
    out.validate()
    return out


def train_config(cfg: dict, iters: int | None, seed: int | None) -> TrainConfig:
    d = {**DESK_TRAIN, **cfg.get("train", {})}
    if iters is not None:
        d["iterations"] = iters
    if seed is not None:
        d["seed"] = seed
    tc = TrainConfig.from_dict(d)
    tc.validate()
    return tc


def parse_shape(text: str) -> tuple[int, int, int]:
    try:
        c, h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"malformed shape {text!r}; expected CxHxW, e.g. 16x8x8") from None
    if min(c, h, w) < 1:
        raise ConfigError(f"shape {text!r} must be positive")
    return c, h, w


# -- data ------------------------------------------------------------------

def resolve_data(args) -> list[ChangeSample]:
    if args.data:
        root = Path(args.data)
        if not root.is_dir():
            raise FileNotFoundError(f"data directory {root} does not exist")
        samples = load_dataset(root, getattr(args, "downscale", 1))
    else:
        samples = synth_generate(args.synth, args.size, args.seed)
    if not samples:
        raise DataError("no samples found")
    sizes = {s.mask.shape for s in samples}
    if len(sizes) != 1 or next(iter(sizes))[0] != next(iter(sizes))[1]:
        raise DataError(f"all samples must share one square size, got {sorted(sizes)}")
    return samples


def resolve_split(args, samples: Sequence[ChangeSample], seed: int) -> DatasetSplit:
    if args.data and (Path(args.data) / "split.json").is_file():
        return DatasetSplit.from_json((Path(args.data) / "split.json").read_text(encoding="utf-8"))
    return split_dataset(samples, seed=seed)


def subset(samples: Sequence[ChangeSample], ids: Sequence[str]) -> list[ChangeSample]:
    by_id = {s.id: s for s in samples}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"split refers to unknown sample(s) {missing[:3]}")
    return [by_id[i] for i in ids]


# -- outputs ---------------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None else f"{v:.17g}"


def loss_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "loss", "f1", "iou"])
    for r in rows:
        w.writerow([r.iter, _fmt(r.loss), _fmt(r.f1), _fmt(r.iou)])
    return buf.getvalue()


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, command: str, config: dict, seed: int, store: ParamStore | None,
                   started: str) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "param_hash": store.content_hash() if store is not None else None,
        "started": started,
        "finished": _now(),
    }
    write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def score(net: CdNet, samples: Sequence[ChangeSample]):
    return metric_report(evaluate(net, samples)[0]) if samples else None


# -- commands --------------------------------------------------------------

def cmd_train(args) -> int:
    started = _now()
    cfg = load_config(args.config)
    samples = resolve_data(args)
    tc = train_config(cfg, args.iters, args.seed)
    net_cfg = net_config(cfg, samples[0].mask.shape[0])
    split = resolve_split(args, samples, tc.seed)
    train_set, val_set = subset(samples, split.train), subset(samples, split.val)
    if not train_set:
        raise DataError("training split is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()

    def progress(row):
        if row.iter % max(1, tc.iterations // 10) == 0:
            log.info("iter %d  loss %.4f  batch F1 %s", row.iter, row.loss,
                     "-" if row.f1 is None else f"{row.f1:.3f}")

    net, rows = train(train_set, net_cfg, tc, on_step=progress)
    log.info("trained %d iterations in %.1f s", tc.iterations, time.perf_counter() - t0)

    snapshot = {"net": net_cfg.to_dict(), "train": dataclasses.asdict(tc)}
    net.store.save(out / "checkpoint.sscp")
    write_text(out / "checkpoint.json", json.dumps({"format": 1, **snapshot}, indent=2, sort_keys=True) + "\n")
    write_text(out / "split.json", split.to_json() + "\n")
    write_text(out / "loss.csv", loss_csv(rows))

    named = [(name, rep) for name, rep in (("train", score(net, train_set)), ("val", score(net, val_set)))
             if rep is not None]
    write_text(out / "report.csv", report_csv(named))
    write_text(out / "report.txt", report_table(named) + "\n")
    print(report_table(named))
    if rows:
        from .plotting import plot_loss
        plot_loss([r.iter for r in rows], [r.loss for r in rows], [r.f1 for r in rows], out / "loss.png")
    write_manifest(out, "train", snapshot, tc.seed, net.store, started)
    return EXIT_OK


def load_checkpoint(path: str, override: dict | None = None) -> tuple[CdNet, dict]:
    ckpt = Path(path)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    side = ckpt.with_suffix(".json")
    if not side.is_file():
        raise FileNotFoundError(f"checkpoint config {side} not found")
    meta = json.loads(side.read_text(encoding="utf-8"))
    if meta.get("format") != 1:
        raise FormatError(f"{side}: unsupported checkpoint format {meta.get('format')!r}")
    net_cfg = CdNetConfig.from_dict(meta["net"])
    if override:
        requested = net_config(override, net_cfg.image_size)
        if requested.to_dict() != net_cfg.to_dict():
            raise FormatError("checkpoint was trained with a different network configuration")
    store = ParamStore.load(ckpt)
    template = init_cdnet(net_cfg).store
    want = {k: t.shape for k, t in template.items()}
    have = {k: t.shape for k, t in store.items()}
    if want != have:
        diff = sorted(set(want.items()) ^ set(have.items()))
        raise FormatError(f"checkpoint tensors do not match the configuration: {diff[:3]}")
    return bind(net_cfg, store), meta


def _activation_map(feat: np.ndarray, size: int) -> np.ndarray:
    m = np.abs(feat).mean(axis=0)
    span = m.max() - m.min()
    m = (m - m.min()) / span if span > 0 else np.zeros_like(m)
    f = size // m.shape[0]
    return np.kron(m, np.ones((f, f)))


def dump_maps(net: CdNet, samples: Sequence[ChangeSample], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        for s in samples:
            trace: dict = {}
            prob = cdnet_forward(s.t1, s.t2, net, train=False, trace=trace).data[0]
            size = s.mask.shape[0]
            pre = trace["pre_sscp"]
            write_mask(out / f"{s.id}_pred.png", (prob >= 0.5).astype(np.uint8))
            write_gray(out / f"{s.id}_pre_sscp.png", _activation_map(pre, size))
            write_gray(out / f"{s.id}_post_msa.png", _activation_map(trace.get("post_msa", pre), size))
            write_gray(out / f"{s.id}_post_sscp.png", _activation_map(trace["post_sscp"], size))


def cmd_eval(args) -> int:
    net, meta = load_checkpoint(args.checkpoint, load_config(args.config) if args.config else None)
    if args.synth is not None and args.size is None:
        args.size = net.cfg.image_size
    seed = meta["train"]["seed"] if args.seed is None else args.seed
    if args.seed is None:
        args.seed = seed
    samples = resolve_data(args)
    if samples[0].mask.shape[0] != net.cfg.image_size:
        raise ShapeError(f"data is {samples[0].mask.shape[0]}px but the checkpoint expects "
                         f"{net.cfg.image_size}px")
    if args.split == "all":
        chosen = list(samples)
    else:
        chosen = subset(samples, getattr(resolve_split(args, samples, seed), args.split))
    if not chosen:
        raise DataError(f"split {args.split!r} is empty")
    rep = score(net, chosen)
    print(report_table([(args.split, rep)]))
    if args.out:
        write_text(Path(args.out) / "eval.csv", report_csv([(args.split, rep)]))
    if args.dump_maps:
        dump_maps(net, chosen, Path(args.dump_maps))
    return EXIT_OK


def expand_variants(text: str) -> list[str]:
    if text == "all-orders":
        return list(ORDER_VARIANTS)
    if text == "all-components":
        return list(COMPONENT_VARIANTS)
    names = [v.strip() for v in text.split(",") if v.strip()]
    if not names:
        raise ConfigError("no variants given")
    for n in names:
        parse_variant(n)
    return names


def cmd_ablate(args) -> int:
    started = _now()
    variants = expand_variants(args.variants)
    cfg = load_config(args.config)
    samples = resolve_data(args)
    tc = train_config(cfg, args.iters, args.seed)
    split = resolve_split(args, samples, tc.seed)
    train_set = subset(samples, split.train)
    test_set = subset(samples, split.test) or subset(samples, split.val) or train_set
    named, costs = [], []
    for v in variants:
        net_cfg = net_config(cfg, samples[0].mask.shape[0], variant=v)
        net, _ = train(train_set, net_cfg, tc)
        rep = score(net, test_set)
        log.info("%-16s F1 %s", v, rep.as_percent()["f1"])
        named.append((v, rep))
        costs.append(component_costs(net_cfg.sscp))
    out = Path(args.out)
    rows = list(csv.reader(io.StringIO(report_csv(named))))
    rows[0] += ["params", "flops"]
    for r, c in zip(rows[1:], costs):
        r += [sum(p for p, _ in c.values()), sum(f for _, f in c.values())]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    write_text(out / "ablation.csv", buf.getvalue())
    print(report_table(named))
    from .plotting import plot_ablation
    plot_ablation([n for n, _ in named], [r.f1 for _, r in named], [r.iou for _, r in named],
                  out / "ablation.png", title=args.variants)
    write_manifest(out, "ablate", {"variants": variants, "train": dataclasses.asdict(tc)}, tc.seed, None, started)
    return EXIT_OK


def bench_rows(sscp: SscpConfig) -> list[tuple[str, int, int]]:
    costs = component_costs(sscp)
    rows = [(k, p, f) for k, (p, f) in costs.items()]
    rows.append(("total", sum(r[1] for r in rows), sum(r[2] for r in rows)))
    return rows


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    c, h, w = parse_shape(args.shape)
    sscp = SscpConfig.from_dict({**cfg.get("sscp", {}), "channels": c, "height": h, "width": w})
    sscp.validate()
    rows = bench_rows(sscp)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["component", "params", "flops"])
    writer.writerows(rows)
    sys.stdout.write(buf.getvalue())
    if args.out:
        out = Path(args.out)
        write_text(out / "bench.csv", buf.getvalue())
        from .plotting import plot_costs
        parts = rows[:-1]
        plot_costs([r[0] for r in parts], [r[1] for r in parts], [r[2] for r in parts], out / "bench.png")
    return EXIT_OK


def run_gradcheck(sscp: SscpConfig, eps: float, seed: int):
    rng = np.random.default_rng(seed)
    params, store = init_sscp(sscp, rng=rng)
    from .block import sscp_forward
    x = Tensor(rng.standard_normal((sscp.channels, sscp.height, sscp.width)))
    # random projection so every output element contributes its own adjoint
    w = Tensor(rng.standard_normal(x.shape))
    return grad_check_report(lambda: sum_all(mul(sscp_forward(x, sscp, params, train=True), w)), store, eps)


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    base = cfg.get("sscp", GRADCHECK_SSCP if args.config is None else {})
    c, h, w = parse_shape(args.shape)
    sscp = SscpConfig.from_dict({**base, "channels": c, "height": h, "width": w})
    sscp.validate()
    if h * w > 256:
        log.warning("gradcheck on %d nodes will be slow; N <= 256 is recommended", h * w)
    t0 = time.perf_counter()
    rep = run_gradcheck(sscp, args.eps, args.seed)
    modules: dict[str, float] = {}
    for path, err in rep.per_path.items():
        mod = path.split(".")[0]
        modules[mod] = max(modules.get(mod, 0.0), err)
    print("module,max_rel_error")
    for mod, err in modules.items():
        print(f"{mod},{err:.3e}")
    print(f"overall,{rep.max_error:.3e}")
    log.info("checked %d scalars (%d kink-corrected, uncorrected max %.3e) in %.1f s",
             rep.checked, rep.kinked, rep.raw_max_error, time.perf_counter() - t0)
    if rep.max_error >= GRADCHECK_TOL:
        raise ThresholdError(f"max relative error {rep.max_error:.3e} >= {GRADCHECK_TOL:g} at {rep.worst}")
    return EXIT_OK


def cmd_synth(args) -> int:
    samples = synth_generate(args.n, args.size, args.seed)
    out = Path(args.out)
    save_dataset(samples, out)
    write_text(out / "split.json", split_dataset(samples, seed=args.seed).to_json() + "\n")
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

def _data_args(p: argparse.ArgumentParser, default_synth: int | None = None, size_default: int | None = 64):
    g = p.add_mutually_exclusive_group(required=default_synth is None)
    g.add_argument("--data", metavar="DIR", help="dataset root with A/, B/ and label/")
    g.add_argument("--synth", type=int, metavar="N", default=default_synth,
                   help="generate N synthetic pairs instead of reading data")
    p.add_argument("--size", type=int, default=size_default, help="synthetic image size")
    p.add_argument("--downscale", type=int, default=1, help="box-filter factor applied when reading --data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sscp", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy change-detection network")
    _data_args(p)
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and optionally dump maps")
    _data_args(p, size_default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--seed", type=int, default=None, help="split/synthetic seed (default: training seed)")
    p.add_argument("--dump-maps", metavar="DIR")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score several block variants")
    _data_args(p, default_synth=8)
    p.add_argument("--variants", default="all-components",
                   help="comma-separated variant names, 'all-orders' or 'all-components'")
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/ablate")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="parameter and FLOP counts per component")
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--shape", default="64x8x8", help="CxHxW")
    p.add_argument("--out", metavar="DIR", help="also write bench.csv and bench.png")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="compare tape gradients with central differences")
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--shape", default="16x8x8", help="CxHxW")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset to disk")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", force=True)
    try:
        return args.func(args)
    except ThresholdError as exc:
        log.error("%s", exc)
        return EXIT_THRESHOLD
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ConfigError, ShapeError, DataError, FormatError, EvaluationError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
