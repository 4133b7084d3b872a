import csv
import io
import json

import numpy as np
import pytest

from sscp import tensor as T
from sscp.block import COMPONENT_VARIANTS, SscpConfig, count_params_flops
from sscp.cdnet import CdNetConfig, init_cdnet
from sscp.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_THRESHOLD, main
from sscp.params import ParamStore

SMALL = {"net": {"widths": [4, 8, 8]}, "sscp": {"kernels": [3, 5], "p1": 4, "p2": 2}}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def read_csv(text):
    return list(csv.reader(io.StringIO(text)))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = write_cfg(root, SMALL)
    out = root / "run"
    rc = main(["-q", "train", "--synth", "8", "--size", "32", "--iters", "3", "--seed", "2",
               "--config", cfg, "--out", str(out)])
    assert rc == EXIT_OK
    return out, cfg


# -- bench -----------------------------------------------------------------

def test_bench_all_off_is_zero(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"sscp": {"variant": "none"}})
    assert main(["bench", "--config", cfg, "--shape", "16x8x8"]) == EXIT_OK
    rows = read_csv(capsys.readouterr().out)
    assert rows[-1] == ["total", "0", "0"]


def test_bench_total_is_sum_and_matches_library(capsys, tmp_path):
    assert main(["bench", "--shape", "64x16x16", "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(capsys.readouterr().out)
    assert rows[0] == ["component", "params", "flops"]
    body, total = rows[1:-1], rows[-1]
    assert int(total[1]) == sum(int(r[1]) for r in body)
    assert int(total[2]) == sum(int(r[2]) for r in body)
    assert (int(total[1]), int(total[2])) == count_params_flops(SscpConfig(channels=64, height=16, width=16))
    assert (tmp_path / "bench.csv").is_file() and (tmp_path / "bench.png").is_file()


@pytest.mark.parametrize("shape", ["16x8", "axbxc", "0x8x8", ""])
def test_bench_malformed_shape(shape):
    assert main(["bench", "--shape", shape]) == EXIT_INVALID


# -- gradcheck -------------------------------------------------------------

def test_gradcheck_canonical_passes(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "module,max_rel_error"
    assert {l.split(",")[0] for l in lines[1:]} == {"msa", "srga", "csa", "overall"}


def test_gradcheck_catches_broken_adjoint(monkeypatch):
    monkeypatch.setattr(T, "_sigmoid_grad", lambda s: 1.1 * s * (1.0 - s))
    assert main(["-q", "gradcheck", "--shape", "8x4x4"]) == EXIT_THRESHOLD


def test_gradcheck_eps_out_of_range_warns(capsys):
    rc = main(["gradcheck", "--shape", "8x4x4", "--eps", "0.05"])
    assert rc in (EXIT_OK, EXIT_THRESHOLD)
    assert "outside the recommended" in capsys.readouterr().err


# -- config and variants ---------------------------------------------------

def test_unknown_variant_lists_valid_names(tmp_path, capsys):
    rc = main(["ablate", "--variants", "msa,bogus", "--synth", "2", "--size", "16",
               "--out", str(tmp_path)])
    assert rc == EXIT_INVALID
    msg = capsys.readouterr().err
    assert "bogus" in msg and "msa+srga+csa" in msg


def test_unknown_config_key_is_named(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"train": {"lr": 1e-3, "momentum": 0.9}})
    rc = main(["train", "--synth", "2", "--size", "32", "--config", cfg, "--out", str(tmp_path / "o")])
    assert rc == EXIT_INVALID
    assert "momentum" in capsys.readouterr().err


def test_unknown_config_section_is_named(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"optim": {}})
    assert main(["bench", "--config", cfg]) == EXIT_INVALID
    assert "optim" in capsys.readouterr().err


def test_missing_data_dir(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_missing_config_file(tmp_path):
    assert main(["bench", "--config", str(tmp_path / "none.json")]) == EXIT_IO


# -- train / eval ----------------------------------------------------------

def test_train_writes_artifacts(trained):
    out, _ = trained
    for name in ("checkpoint.sscp", "checkpoint.json", "split.json", "loss.csv", "report.csv",
                 "report.txt", "loss.png", "manifest.json"):
        assert (out / name).is_file(), name
    rows = read_csv((out / "loss.csv").read_text())
    assert rows[0] == ["iter", "loss", "f1", "iou"] and len(rows) == 4
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 2
    assert manifest["param_hash"] == ParamStore.load(out / "checkpoint.sscp").content_hash()
    report = read_csv((out / "report.csv").read_text())
    assert [r[0] for r in report[1:]] == ["train", "val"]


def test_zero_iterations_saves_initialisation(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    out = tmp_path / "o"
    assert main(["-q", "train", "--synth", "3", "--size", "32", "--iters", "0", "--seed", "5",
                 "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert (out / "loss.csv").read_text() == "iter,loss,f1,iou\n"
    net_cfg = CdNetConfig.from_dict(json.loads((out / "checkpoint.json").read_text())["net"])
    assert ParamStore.load(out / "checkpoint.sscp").to_bytes() == init_cdnet(net_cfg, seed=5).store.to_bytes()


def test_eval_and_dump_maps(trained, tmp_path, capsys):
    out, _ = trained
    maps = tmp_path / "maps"
    rc = main(["eval", "--checkpoint", str(out / "checkpoint.sscp"), "--synth", "8", "--split", "all",
               "--dump-maps", str(maps), "--out", str(tmp_path)])
    assert rc == EXIT_OK
    assert "all" in capsys.readouterr().out
    pngs = sorted(p.name for p in maps.iterdir())
    assert len(pngs) == 4 * 8
    assert sum(n.endswith("_pre_sscp.png") for n in pngs) == 8
    assert (tmp_path / "eval.csv").is_file()


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "x.sscp"), "--synth", "2"]) == EXIT_IO


def test_eval_config_mismatch(trained, tmp_path, capsys):
    out, _ = trained
    other = write_cfg(tmp_path, {**SMALL, "net": {"widths": [4, 8, 16]}})
    rc = main(["eval", "--checkpoint", str(out / "checkpoint.sscp"), "--synth", "2", "--config", other])
    assert rc == EXIT_INVALID
    assert "different network configuration" in capsys.readouterr().err


def test_eval_format_and_shape_mismatch(trained, tmp_path):
    out, _ = trained
    bad = tmp_path / "bad"
    bad.mkdir()
    meta = json.loads((out / "checkpoint.json").read_text())
    (bad / "checkpoint.sscp").write_bytes((out / "checkpoint.sscp").read_bytes())
    (bad / "checkpoint.json").write_text(json.dumps({**meta, "format": 2}))
    assert main(["eval", "--checkpoint", str(bad / "checkpoint.sscp"), "--synth", "2"]) == EXIT_INVALID
    meta["net"]["widths"] = [4, 8, 16]
    (bad / "checkpoint.json").write_text(json.dumps(meta))
    assert main(["eval", "--checkpoint", str(bad / "checkpoint.sscp"), "--synth", "2"]) == EXIT_INVALID


def test_eval_wrong_image_size(trained):
    out, _ = trained
    assert main(["eval", "--checkpoint", str(out / "checkpoint.sscp"), "--synth", "2",
                 "--size", "64"]) == EXIT_INVALID


# -- ablate / synth --------------------------------------------------------

def test_ablate_single_variant(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    out = tmp_path / "abl"
    assert main(["-q", "ablate", "--variants", "msa", "--synth", "4", "--size", "32", "--iters", "2",
                 "--config", cfg, "--out", str(out)]) == EXIT_OK
    rows = read_csv((out / "ablation.csv").read_text())
    assert len(rows) == 2 and rows[1][0] == "msa"
    assert rows[0][-2:] == ["params", "flops"]
    assert (out / "ablation.png").is_file() and (out / "manifest.json").is_file()


def test_synth_then_train_from_disk(tmp_path, trained):
    data = tmp_path / "ds"
    assert main(["synth", "--n", "8", "--size", "32", "--seed", "2", "--out", str(data)]) == EXIT_OK
    for sub in ("A", "B", "label"):
        assert len(list((data / sub).iterdir())) == 8
    out, cfg = trained
    run = tmp_path / "run"
    assert main(["-q", "train", "--data", str(data), "--iters", "2", "--seed", "7", "--config", cfg,
                 "--out", str(run)]) == EXIT_OK
    # the split stored next to the data wins over a fresh seeded split
    assert json.loads((run / "split.json").read_text()) == json.loads((data / "split.json").read_text())
    assert json.loads((run / "split.json").read_text()) == json.loads((out / "split.json").read_text())


def test_component_variant_names_are_valid():
    assert len(COMPONENT_VARIANTS) == 8
    assert np.unique(COMPONENT_VARIANTS).size == 8


def test_shipped_config_trains(tmp_path):
    from pathlib import Path
    cfg = Path(__file__).parent.parent / "configs" / "small.json"
    assert main(["-q", "train", "--synth", "2", "--size", "32", "--iters", "1", "--config", str(cfg),
                 "--out", str(tmp_path)]) == EXIT_OK
