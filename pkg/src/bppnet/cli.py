"""Command-line entry point.

Settings resolve as defaults <- ``--config`` file <- ``BPPNET_*`` environment
variables <- command-line flags. Every command writes the resolved settings,
with the source of each value, to ``<out-dir>/run_config.txt``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .archive import dump_kv, parse_kv, write_atomic
from .datapipe import DatasetSpec, bicubic_resize, load_dataset, to_colorspace
from .errors import BPPNetError, ConfigError
from .image import ColorSpace, hwc_to_batch, read_image, write_png

ENV_PREFIX = "BPPNET_"

DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/latest",
    "dataset": None,
    "dataset_name": "synthetic",
    "eval_dataset": None,
    "split": "train",
    "colorspace": None,
    "unets": None,
    "no_pycon": False,
    "drop_loss": None,
    "crop_plan": None,
    "resize": None,
    "eval_size": None,
    "budget": "toy",
    "max_epochs": None,
    "max_steps": None,
    "batch_size": None,
    "checkpoint": None,
    "input": None,
    "output": None,
    "n": 4,
    "size": 64,
    "mode": "homogeneous",
    "content_extractor": None,
    "vgg_weights": None,
    "cells": None,
    "dump": False,
}
_TYPES = {
    "seed": int, "unets": int, "resize": int, "eval_size": int, "max_epochs": int,
    "max_steps": int, "batch_size": int, "n": int, "size": int,
    "no_pycon": bool, "dump": bool,
}


def _coerce(key, value):
    if value is None:
        return None
    typ = _TYPES.get(key, str)
    if typ is bool:
        if isinstance(value, bool):
            return value
        return str(value).lower() in ("1", "true", "yes", "on")
    return typ(value)


def resolve_config(args: argparse.Namespace, environ=None):
    """Merge the settings layers; returns (values, provenance)."""
    environ = os.environ if environ is None else environ
    values = dict(DEFAULTS)
    source = {k: "default" for k in DEFAULTS}
    config_path = getattr(args, "config", None)
    if config_path:
        file_values = parse_kv(Path(config_path).read_text(), nested=False)
        unknown = sorted(set(file_values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown keys in {config_path}: {unknown}")
        for k, v in file_values.items():
            values[k] = _coerce(k, v)
            source[k] = f"file:{config_path}"
    for k in DEFAULTS:
        env_key = ENV_PREFIX + k.upper()
        if env_key in environ:
            values[k] = _coerce(k, environ[env_key])
            source[k] = f"env:{env_key}"
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            values[k] = _coerce(k, v)
            source[k] = "flag"
    return values, source


def _write_run_config(out_dir: Path, command: str, values: dict, source: dict):
    body = {"command": command, "values": values, "source": source}
    write_atomic(out_dir / "run_config.txt", dump_kv(body).encode())


def _parse_crop_plan(text):
    if text in (None, "", "full"):
        return None
    plan = []
    for part in str(text).split(","):
        size, _, count = part.strip().partition("x")
        plan.append((int(size), int(count or 1)))
    return plan


# ------------------------------------------------------------- commands


def _dataset_spec(v, root_key="dataset", split=None) -> DatasetSpec:
    if not v[root_key]:
        raise ConfigError(f"--{root_key.replace('_', '-')} is required")
    kwargs = {"name": v["dataset_name"], "root": v[root_key], "split": split or v["split"]}
    if v["colorspace"]:
        kwargs["colorspace"] = v["colorspace"]
    if v["crop_plan"] is not None:
        kwargs["crop_plan"] = _parse_crop_plan(v["crop_plan"])
    spec = DatasetSpec(**kwargs)
    if v["resize"]:
        spec.resize = v["resize"]
    elif v["budget"] == "toy":
        spec.resize = 64
    return spec


def _train_config(v):
    from dataclasses import replace

    from .trainer import TrainConfig, budget_preset

    over = budget_preset(v["budget"])
    cfg = TrainConfig(seed=v["seed"], dataset=_dataset_spec(v), **over)
    gen = cfg.generator
    if v["unets"] is not None:
        gen = replace(gen, num_unets=v["unets"])
    if v["no_pycon"]:
        gen = replace(gen, use_pycon=False)
    cfg.generator = replace(gen, seed=v["seed"])
    cfg.discriminator = replace(cfg.discriminator, seed=v["seed"] + 1)
    cfg.weights = cfg.weights.dropping(v["drop_loss"])
    if v["max_epochs"] is not None:
        cfg.max_epochs = v["max_epochs"]
    if v["max_steps"] is not None:
        cfg.max_steps = v["max_steps"]
    if v["batch_size"] is not None:
        cfg.batch_size = v["batch_size"]
    if v["content_extractor"]:
        cfg.content_extractor = v["content_extractor"]
    elif v["budget"] == "full" and v["vgg_weights"]:
        cfg.content_extractor = "vgg19"
    cfg.vgg_weights = v["vgg_weights"]
    cfg.validate()
    cfg.generator.validate()
    return cfg


def cmd_synth(v, out: Path):
    from .hazesynth import generate_pairs

    path = generate_pairs(v["n"], v["size"], v["mode"], v["seed"], out)
    print(path)


def cmd_train(v, out: Path):
    from .discriminator import build_discriminator
    from .generator import build_generator
    from .trainer import train

    cfg = _train_config(v)
    gen, disc = build_generator(cfg.generator), build_discriminator(cfg.discriminator)
    path, history = train(gen, disc, cfg, out_dir=out)
    print(path)


def cmd_resume(v, out: Path):
    from .trainer import load_checkpoint, resume

    if not v["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    ckpt = load_checkpoint(v["checkpoint"])
    cfg = ckpt.config
    if v["max_epochs"] is not None:
        cfg.max_epochs = v["max_epochs"]
    if v["max_steps"] is not None:
        cfg.max_steps = v["max_steps"]
    if v["dataset"]:
        cfg.dataset.root = v["dataset"]
    path, _, _, _ = resume(ckpt, cfg, out_dir=out)
    print(path)


def _load_generator(v):
    from .trainer import load_checkpoint

    if not v["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    ckpt = load_checkpoint(v["checkpoint"])
    gen = ckpt.generator().eval()
    return gen, ckpt.config


def cmd_infer(v, out: Path):
    from .generator import generator_forward

    gen, cfg = _load_generator(v)
    if not v["input"]:
        raise ConfigError("--input is required")
    size = v["eval_size"] or 512
    x = hwc_to_batch(bicubic_resize(read_image(v["input"]), size))
    space = cfg.dataset.colorspace
    with torch.no_grad():
        y = generator_forward(gen, to_colorspace(x, ColorSpace.RGB, space), clamp=True)
    rgb = to_colorspace(y, space, ColorSpace.RGB)
    target = Path(v["output"]) if v["output"] else out / "dehazed.png"
    write_png(target, rgb[0].double().numpy().transpose(1, 2, 0))
    print(target)


def cmd_eval(v, out: Path):
    from .evalsuite import EvalOptions, config_fingerprint, evaluate

    gen, cfg = _load_generator(v)
    spec = _dataset_spec(v, split=v["split"])
    data = load_dataset(spec)
    opts = EvalOptions(
        eval_size=v["eval_size"] or cfg.dataset.resize,
        colorspace=cfg.dataset.colorspace,
        dump_dir=str(out) if v["dump"] else None,
        fingerprint=config_fingerprint(cfg.to_dict()),
    )
    report = evaluate(gen, data, opts)
    label = {"ihaze": "I-Haze", "ohaze": "O-Haze", "densehaze": "Dense-Haze",
             "ntire2020": "NTIRE 2020", "synthetic": "Synthetic"}[spec.name.value]
    report.write(out, label)
    sys.stdout.write(report.render_table(label))


def cmd_ablate(v, out: Path):
    """Full-budget runs need the I-Haze / O-Haze training and validation
    folders (``--dataset``, ``--eval-dataset``) and a GPU-scale time budget."""
    from .evalsuite import AblationGrid, run_ablation

    cfg = _train_config(v)
    if v["cells"]:
        grid = AblationGrid.select([c.strip() for c in v["cells"].split(",")], seed=v["seed"])
    else:
        grid = AblationGrid.full(seed=v["seed"])
    eval_root = v["eval_dataset"] or v["dataset"]
    eval_spec = _dataset_spec({**v, "dataset": eval_root}, split="val" if not v["eval_dataset"] else v["split"])
    table = run_ablation(grid, cfg, load_dataset(eval_spec), out_dir=out)
    sys.stdout.write(table.render(cfg.dataset.name.value))


def cmd_inspect(v, out: Path):
    from .evalsuite import write_histograms
    from .generator import dump_intermediates

    gen, cfg = _load_generator(v)
    if not v["input"]:
        raise ConfigError("--input is required")
    size = v["eval_size"] or cfg.dataset.resize
    x = hwc_to_batch(bicubic_resize(read_image(v["input"]), size))
    x = to_colorspace(x, ColorSpace.RGB, cfg.dataset.colorspace)
    dumps = dump_intermediates(gen, x)
    lines = ["name = std per channel"]
    for name, d in dumps.items():
        t = d["tensor"][0, :3].double().numpy().transpose(1, 2, 0)
        write_png(out / "intermediates" / f"{name}.png", equalize(t))
        write_histograms(out / "intermediates" / f"{name}_hist.csv", d["tensor"])
        lines.append(f"{name} = {[round(float(s), 6) for s in d['std']]}")
    write_atomic(out / "intermediates" / "std.txt", ("\n".join(lines) + "\n").encode())
    print(out / "intermediates")


def equalize(img: np.ndarray, bins: int = 256) -> np.ndarray:
    """Per-channel histogram equalisation to [0, 1] for display."""
    out = np.empty_like(img, dtype=np.float64)
    for c in range(img.shape[-1]):
        ch = img[..., c]
        ranks = np.argsort(np.argsort(ch, axis=None), axis=None).reshape(ch.shape)
        out[..., c] = ranks / max(ch.size - 1, 1)
    return out


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "resume": cmd_resume,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", help="dataset root directory")
    data.add_argument("--dataset-name", dest="dataset_name",
                      choices=["ihaze", "ohaze", "densehaze", "ntire2020", "synthetic"])
    data.add_argument("--split", choices=["train", "val", "test"])
    data.add_argument("--colorspace", choices=["rgb", "ycbcr"])
    data.add_argument("--crop-plan", dest="crop_plan", help="e.g. 1024x4,2048x4, or 'full'")
    data.add_argument("--resize", type=int)
    data.add_argument("--budget", choices=["toy", "full"])

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--unets", type=int, help="number of UNet units M")
    model.add_argument("--no-pycon", dest="no_pycon", action="store_const", const=True)
    model.add_argument("--drop-loss", dest="drop_loss", choices=["adv", "con", "l2", "ssim"])
    model.add_argument("--max-epochs", dest="max_epochs", type=int)
    model.add_argument("--max-steps", dest="max_steps", type=int)
    model.add_argument("--batch-size", dest="batch_size", type=int)
    model.add_argument("--content-extractor", dest="content_extractor", choices=["tiny", "vgg19"])
    model.add_argument("--vgg-weights", dest="vgg_weights", help="tensor archive with VGG-19 features")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint")
    ckpt.add_argument("--eval-size", dest="eval_size", type=int)

    p = argparse.ArgumentParser(prog="bppnet", description="Single-image dehazing GAN toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic paired dataset")
    s.add_argument("--n", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--mode", choices=["homogeneous", "dense", "inhomogeneous"])
    sub.add_parser("train", parents=[common, data, model], help="train generator and discriminator")
    sub.add_parser("resume", parents=[common, data, model, ckpt], help="continue training from a checkpoint")
    s = sub.add_parser("infer", parents=[common, ckpt], help="dehaze one image")
    s.add_argument("--input")
    s.add_argument("--output")
    s = sub.add_parser("eval", parents=[common, data, ckpt], help="SSIM/PSNR report on a dataset")
    s.add_argument("--dump", action="store_const", const=True, help="write dehazed/diff/histogram files")
    s = sub.add_parser("ablate", parents=[common, data, model], help="run the ablation grid")
    s.add_argument("--eval-dataset", dest="eval_dataset")
    s.add_argument("--cells", help="comma-separated cell labels (default: full grid)")
    s = sub.add_parser("inspect", parents=[common, ckpt], help="dump UNet and pyramid intermediates")
    s.add_argument("--input")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values, source = resolve_config(args)
        out = Path(values["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        _write_run_config(out, args.command, values, source)
        COMMANDS[args.command](values, out)
    except (BPPNetError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
