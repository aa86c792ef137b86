import subprocess
import sys

import pytest
from PIL import Image

from bppnet.archive import parse_kv
from bppnet.cli import build_parser, main, resolve_config
from bppnet.errors import ConfigError


def _run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_precedence_and_provenance(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 5\nmax_epochs = 7\nbudget = \"toy\"\n")
    args = build_parser().parse_args(["train", "--config", str(cfg), "--max-epochs", "9"])
    values, source = resolve_config(args, environ={"BPPNET_SEED": "6", "BPPNET_BATCH_SIZE": "3"})
    assert values["seed"] == 6 and source["seed"] == "env:BPPNET_SEED"
    assert values["max_epochs"] == 9 and source["max_epochs"] == "flag"
    assert values["batch_size"] == 3
    assert values["budget"] == "toy" and source["budget"].startswith("file:")
    assert source["unets"] == "default"


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 1\n")
    args = build_parser().parse_args(["train", "--config", str(cfg)])
    with pytest.raises(ConfigError, match="learning_rate"):
        resolve_config(args, environ={})


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--unets", "many"])
    assert exc.value.code == 2


def test_runtime_error_is_one_line(tmp_path, capsys):
    code, out, err = _run(["infer", "--checkpoint", str(tmp_path / "none"), "--out-dir", str(tmp_path)], capsys)
    assert code == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: CheckpointError:")


def test_missing_dataset_flag(tmp_path, capsys):
    code, _, err = _run(["train", "--out-dir", str(tmp_path)], capsys)
    assert code == 1 and "--dataset" in err


def test_end_to_end(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert _run(["synth", "--n", "2", "--size", "32", "--seed", "1", "--out-dir", str(data)], capsys)[0] == 0
    assert (data / "hazy" / "01_hazy.png").exists()

    code, out, _ = _run(["train", "--dataset", str(data), "--resize", "32", "--max-epochs", "1",
                         "--unets", "2", "--drop-loss", "adv", "--out-dir", str(run)], capsys)
    assert code == 0 and (run / "checkpoint.bppnet").exists()
    resolved = parse_kv((run / "run_config.txt").read_text())
    assert resolved["command"] == "train" and resolved["values"]["unets"] == 2
    assert resolved["source"]["unets"] == "flag" and resolved["source"]["seed"] == "default"

    ckpt = str(run / "checkpoint.bppnet")
    code, _, _ = _run(["resume", "--checkpoint", ckpt, "--max-epochs", "2", "--out-dir", str(tmp_path / "run2")], capsys)
    assert code == 0

    code, out, _ = _run(["eval", "--checkpoint", ckpt, "--dataset", str(data), "--out-dir", str(tmp_path / "ev")], capsys)
    assert code == 0 and "Synthetic dataset" in out and "SSIM" in out and "PSNR" in out
    assert (tmp_path / "ev" / "report.csv").read_text().startswith("id,ssim,psnr_db,inference_ms")

    out_png = tmp_path / "out.png"
    code, _, _ = _run(["infer", "--checkpoint", ckpt, "--input", str(data / "hazy" / "01_hazy.png"),
                       "--output", str(out_png), "--eval-size", "64", "--out-dir", str(tmp_path / "inf")], capsys)
    assert code == 0
    im = Image.open(out_png)
    assert im.size == (64, 64) and im.mode == "RGB"

    code, _, _ = _run(["inspect", "--checkpoint", ckpt, "--input", str(data / "hazy" / "01_hazy.png"),
                       "--out-dir", str(tmp_path / "insp")], capsys)
    inter = tmp_path / "insp" / "intermediates"
    assert code == 0 and (inter / "unet_2.png").exists() and (inter / "pycon_branch_45_hist.csv").exists()
    assert "unet_1 =" in (inter / "std.txt").read_text()


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "bppnet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synth", "train", "resume", "infer", "eval", "ablate", "inspect"):
        assert cmd in res.stdout
