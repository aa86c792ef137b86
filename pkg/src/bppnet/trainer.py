"""Alternating adversarial training with a plateau-driven generator LR schedule."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch

from .archive import load_archive, load_module_tensors, module_tensors, save_archive, write_atomic
from .datapipe import DatasetSpec, PairedDataset, epoch_patches, load_dataset
from .discriminator import DiscriminatorConfig, PatchDiscriminator, build_discriminator
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .generator import BPPNetGenerator, GeneratorConfig, UNetConfig, build_generator
from .losses import (
    ContentLossConfig,
    GeneratorObjective,
    LossWeights,
    SSIMParams,
    adv_disc_loss_logits,
    tiny_extractor,
    total_discriminator_loss,
    vgg19_extractor,
)

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "bppnet-checkpoint"
HISTORY_FIELDS = ("epoch", "adv", "content", "l2", "ssim", "loss_g", "loss_d", "lr_gen", "lr_disc", "seconds")


@dataclass
class TrainConfig:
    lr_gen_init: float = 1e-3
    lr_disc: float = 1e-3
    lr_decay_factor: float = 0.1
    plateau_window: int = 10
    plateau_threshold: float = 0.01
    lr_floor: float = 1e-5
    max_epochs: int = 200
    max_steps: Optional[int] = None
    batch_size: int = 1
    seed: int = 0
    adam_betas: tuple = (0.5, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    content_extractor: str = "tiny"
    content_layers: Optional[list] = None
    content_norm: str = "l1"
    vgg_weights: Optional[str] = None
    ssim_window: int = 11
    workers: int = 0
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec.from_dict(self.dataset)
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig.from_dict(self.generator)
        if isinstance(self.discriminator, dict):
            self.discriminator = DiscriminatorConfig.from_dict(self.discriminator)
        self.adam_betas = tuple(self.adam_betas)

    def validate(self):
        if not self.lr_floor < self.lr_gen_init:
            raise ConfigError("lr_floor must be below lr_gen_init")
        if self.plateau_window < 2:
            raise ConfigError("plateau_window must be >= 2")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive when set")
        if self.content_extractor not in ("tiny", "vgg19"):
            raise ConfigError(f"unknown content extractor {self.content_extractor!r}")
        if self.content_extractor == "vgg19" and self.weights.content and not self.vgg_weights:
            raise ConfigError("the vgg19 content loss needs pretrained weights (vgg_weights)")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["adam_betas"] = list(self.adam_betas)
        d["weights"] = self.weights.to_dict()
        d["dataset"] = self.dataset.to_dict()
        d["generator"] = self.generator.to_dict()
        d["discriminator"] = self.discriminator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        return cls(**d)


TOY_DISC_LAYERS = ((3, 16, 4, 2, 0), (16, 32, 4, 2, 0), (32, 64, 4, 2, 1), (64, 1, 4, 1, 1))


def budget_preset(budget: str) -> dict:
    """Overrides for the named compute budget.

    ``toy`` shrinks the UNets (depth 2, 16 base channels), the pyramid
    (4 channels per kernel, full kernel ladder) and the discriminator widths
    (16/32/64, same kernels, strides and padding), clips the generator
    gradient norm at 1 and trains on 64x64 images, so a run fits in minutes
    on one CPU core.
    """
    if budget == "full":
        return {}
    if budget == "toy":
        return {
            "generator": GeneratorConfig(unet=UNetConfig(depth=2, base_channels=16), pycon_channels_per_kernel=4),
            "discriminator": DiscriminatorConfig(layers=TOY_DISC_LAYERS),
            "grad_clip": 1.0,
            "batch_size": 4,
            "checkpoint_every": 50,
            "plateau_window": 200,
        }
    raise ConfigError(f"unknown budget {budget!r}")


# ------------------------------------------------------------ LR schedule


@dataclass
class PlateauState:
    lr: float
    epochs_since_change: int = 0
    decays: int = 0
    terminate: bool = False


def windowed_improvement(losses, window: int) -> float:
    """Relative drop of the median over the newer half of the last ``window``
    losses versus the older half."""
    recent = list(losses)[-window:]
    half = window // 2
    older, newer = statistics.median(recent[:half]), statistics.median(recent[half:])
    return (older - newer) / max(abs(older), 1e-12)


def lr_plateau_step(history: List[float], state: PlateauState, cfg: TrainConfig) -> float:
    """Advance the schedule by one finished epoch; returns the generator LR.

    Only epochs since the last change count towards the window. On a plateau
    the LR is multiplied by the decay factor, never going below the floor; a
    plateau already at the floor sets ``state.terminate``.
    """
    state.epochs_since_change += 1
    if state.epochs_since_change < cfg.plateau_window or len(history) < cfg.plateau_window:
        return state.lr
    if windowed_improvement(history, cfg.plateau_window) >= cfg.plateau_threshold:
        return state.lr
    floor = cfg.lr_floor
    if state.lr <= floor * (1 + 1e-9):
        state.lr = floor
        state.terminate = True
        return state.lr
    new = state.lr * cfg.lr_decay_factor
    state.lr = floor if new <= floor * (1 + 1e-9) else new
    state.decays += 1
    state.epochs_since_change = 0
    return state.lr


# --------------------------------------------------------------- history


@dataclass
class TrainHistory:
    records: List[dict] = field(default_factory=list)

    def append(self, rec: dict):
        if self.records and rec["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> List[float]:
        return [r[name] for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in HISTORY_FIELDS})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        h = cls()
        for row in csv.DictReader(io.StringIO(text)):
            h.records.append({k: int(v) if k == "epoch" else float(v) for k, v in row.items()})
        return h


# ----------------------------------------------------------- checkpoints


def _optimizer_payload(opt: torch.optim.Optimizer, prefix: str):
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{prefix}{idx}/{key}"] = torch.as_tensor(val)
    return tensors, json.dumps(sd["param_groups"], sort_keys=True)


def _restore_optimizer(opt, tensors, groups_json, prefix):
    state = {}
    for name, t in tensors.items():
        if not name.startswith(prefix):
            continue
        idx, key = name[len(prefix):].split("/", 1)
        state.setdefault(int(idx), {})[key] = t
    groups = json.loads(groups_json)
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(path, gen, disc, cfg: TrainConfig, epoch: int, opt_g=None, opt_d=None,
                    sched: Optional[PlateauState] = None, history: Optional[TrainHistory] = None) -> Path:
    tensors = {}
    tensors.update(module_tensors(gen, "gen/"))
    tensors.update(module_tensors(disc, "disc/"))
    extra = {}
    if opt_g is not None:
        t, groups = _optimizer_payload(opt_g, "optim_gen/")
        tensors.update(t)
        extra["optim_gen.json"] = groups
    if opt_d is not None:
        t, groups = _optimizer_payload(opt_d, "optim_disc/")
        tensors.update(t)
        extra["optim_disc.json"] = groups
    tensors["rng/torch"] = torch.get_rng_state()
    if history is not None:
        extra["history.csv"] = history.to_csv()
    manifest = {
        "kind": CHECKPOINT_KIND,
        "epoch": epoch,
        "seed": cfg.seed,
        "num_unets": cfg.generator.num_unets,
        "pycon_kernels": list(cfg.generator.pycon_kernels),
        "schedule": asdict(sched) if sched is not None else {},
        "config": cfg.to_dict(),
    }
    save_archive(path, tensors, manifest, extra)
    return Path(path)


@dataclass
class Checkpoint:
    path: Path
    manifest: dict
    tensors: dict
    extra: dict

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.manifest["config"])

    @property
    def epoch(self) -> int:
        return int(self.manifest["epoch"])

    def history(self) -> TrainHistory:
        return TrainHistory.from_csv(self.extra["history.csv"]) if "history.csv" in self.extra else TrainHistory()

    def generator(self) -> BPPNetGenerator:
        gen = build_generator(self.config.generator)
        load_module_tensors(gen, self.tensors, "gen/")
        return gen

    def discriminator(self) -> PatchDiscriminator:
        disc = build_discriminator(self.config.discriminator)
        load_module_tensors(disc, self.tensors, "disc/")
        return disc


def load_checkpoint(path, expect_generator: Optional[GeneratorConfig] = None) -> Checkpoint:
    tensors, manifest, extra = load_archive(path)
    if manifest.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not a training checkpoint")
    ckpt = Checkpoint(Path(path), manifest, tensors, extra)
    if expect_generator is not None and ckpt.config.generator.to_dict() != expect_generator.to_dict():
        raise CheckpointError(f"{path}: generator config does not match the requested one")
    return ckpt


def _check_resume_compatible(saved: TrainConfig, cfg: TrainConfig):
    fixed = ("generator", "discriminator", "weights", "seed", "batch_size", "lr_decay_factor",
             "plateau_window", "plateau_threshold", "lr_floor", "adam_betas", "adam_eps",
             "content_extractor", "content_layers", "content_norm", "ssim_window")
    a, b = saved.to_dict(), cfg.to_dict()
    diffs = [k for k in fixed if a[k] != b[k]]
    ds_a, ds_b = dict(a["dataset"]), dict(b["dataset"])
    ds_a.pop("root"), ds_b.pop("root")
    if ds_a != ds_b:
        diffs.append("dataset")
    if diffs:
        raise CheckpointError(f"cannot resume: configuration differs in {diffs}")


# -------------------------------------------------------------- training


def make_objective(cfg: TrainConfig) -> GeneratorObjective:
    if cfg.content_extractor == "vgg19":
        ext = vgg19_extractor(cfg.vgg_weights, cfg.content_layers)
        layers = None
    else:
        ext = tiny_extractor(seed=cfg.seed)
        layers = cfg.content_layers
    content = ContentLossConfig(ext, layers, cfg.content_norm)
    return GeneratorObjective(cfg.weights, content, SSIMParams(window_size=cfg.ssim_window))


def _assert_no_grad(module, what):
    for name, p in module.named_parameters():
        if p.grad is not None and torch.count_nonzero(p.grad):
            raise AssertionError(f"{what}: parameter {name} received a gradient")


def _all_finite(values) -> bool:
    return all(math.isfinite(v) for v in values)


def train(gen: BPPNetGenerator, disc: PatchDiscriminator, cfg: TrainConfig, out_dir=None,
          dataset: Optional[PairedDataset] = None, resume_from=None,
          loss_hook: Optional[Callable[[int, dict], dict]] = None,
          check_isolation: bool = False):
    """Train ``gen`` and ``disc`` in place.

    Each step updates the discriminator on real GT vs detached generator
    output, then the generator on the weighted objective against the
    just-updated discriminator. Returns ``(checkpoint_path, history)``;
    checkpoint_path is ``None`` when ``out_dir`` is not given.

    ``loss_hook(epoch, record)`` may replace an epoch's record before it is
    used by the LR schedule (used to script schedule tests).
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / "checkpoint.bppnet" if out is not None else None

    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_gen_init, betas=cfg.adam_betas, eps=cfg.adam_eps)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc, betas=cfg.adam_betas, eps=cfg.adam_eps)
    sched = PlateauState(cfg.lr_gen_init)
    history = TrainHistory()
    start_epoch = 0

    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        _check_resume_compatible(ckpt.config, cfg)
        for key in ("optim_gen.json", "optim_disc.json"):
            if key not in ckpt.extra:
                raise CheckpointError(f"{ckpt.path}: optimizer state missing ({key}); cannot resume")
        load_module_tensors(gen, ckpt.tensors, "gen/")
        load_module_tensors(disc, ckpt.tensors, "disc/")
        _restore_optimizer(opt_g, ckpt.tensors, ckpt.extra["optim_gen.json"], "optim_gen/")
        _restore_optimizer(opt_d, ckpt.tensors, ckpt.extra["optim_disc.json"], "optim_disc/")
        if "rng/torch" in ckpt.tensors:
            torch.set_rng_state(ckpt.tensors["rng/torch"])
        sched = PlateauState(**ckpt.manifest["schedule"])
        history = ckpt.history()
        start_epoch = ckpt.epoch
    else:
        torch.manual_seed(cfg.seed)

    if cfg.max_epochs <= start_epoch:
        if ckpt_path is not None and resume_from is None:
            save_checkpoint(ckpt_path, gen, disc, cfg, start_epoch, opt_g, opt_d, sched, history)
        return ckpt_path, history

    if dataset is None:
        dataset = load_dataset(cfg.dataset)
    objective = make_objective(cfg)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    steps = start_epoch * math.ceil(len(dataset) * _patches_per_image(cfg) / cfg.batch_size)
    epoch = start_epoch
    try:
        while epoch < cfg.max_epochs and not sched.terminate:
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            t0 = time.perf_counter()
            for g in opt_g.param_groups:
                g["lr"] = sched.lr
            patches = epoch_patches(dataset, cfg.dataset, cfg.seed, epoch, cfg.workers)
            order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(patches))
            sums = {k: 0.0 for k in ("adv", "content", "l2", "ssim", "loss_g", "loss_d")}
            n_batches = 0
            gen.train()
            disc.train()
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
                idx = order[start:start + cfg.batch_size]
                hazy = torch.stack([patches[i][0] for i in idx])
                gt = torch.stack([patches[i][1] for i in idx])

                # discriminator step
                opt_g.zero_grad(set_to_none=True)
                opt_d.zero_grad(set_to_none=True)
                disc.requires_grad_(True)
                # generator weights are unchanged until its own step, so one
                # forward serves both updates
                pred = gen(hazy)
                fake = pred.detach()
                loss_d = total_discriminator_loss(cfg.weights, adv_disc_loss_logits(disc.logits(gt), disc.logits(fake)))
                if loss_d.requires_grad:
                    loss_d.backward()
                    opt_d.step()
                if check_isolation:
                    _assert_no_grad(gen, "discriminator step")

                # generator step
                disc.requires_grad_(False)
                opt_g.zero_grad(set_to_none=True)
                opt_d.zero_grad(set_to_none=True)
                loss_g, terms = objective(disc, gt, pred)
                loss_g.backward()
                if check_isolation:
                    _assert_no_grad(disc, "generator step")
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(gen.parameters(), cfg.grad_clip)
                opt_g.step()
                disc.requires_grad_(True)

                values = {k: float(v.detach()) for k, v in terms.items()}
                values["loss_g"], values["loss_d"] = float(loss_g.detach()), float(loss_d.detach())
                if not _all_finite(values.values()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {steps + 1}: {values}")
                for k, v in values.items():
                    sums[k] += v
                n_batches += 1
                steps += 1
            if n_batches == 0:
                break
            epoch += 1
            rec = {k: v / n_batches for k, v in sums.items()}
            rec.update(epoch=epoch, lr_gen=sched.lr, lr_disc=opt_d.param_groups[0]["lr"],
                       seconds=time.perf_counter() - t0)
            if loss_hook is not None:
                rec = loss_hook(epoch, rec)
            history.append(rec)
            lr_plateau_step(history.column("loss_g"), sched, cfg)
            log.info("epoch %d  L_G %.5f  L_D %.5f  lr_g %.2e", epoch, rec["loss_g"], rec["loss_d"], rec["lr_gen"])
            if ckpt_path is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, gen, disc, cfg, epoch, opt_g, opt_d, sched, history)
    except TrainingDiverged:
        log.error("training diverged; last good checkpoint kept at %s", ckpt_path)
        raise

    if ckpt_path is not None:
        save_checkpoint(ckpt_path, gen, disc, cfg, epoch, opt_g, opt_d, sched, history)
        write_atomic(out / "history.csv", history.to_csv().encode())
    return ckpt_path, history


def _patches_per_image(cfg: TrainConfig) -> int:
    plan = cfg.dataset.crop_plan
    return 1 if plan is None else sum(c for _, c in plan)


def resume(checkpoint, cfg: Optional[TrainConfig] = None, out_dir=None, dataset=None, **kw):
    """Continue a run from ``checkpoint`` up to ``cfg.max_epochs``."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    cfg = cfg or ckpt.config
    gen = build_generator(cfg.generator)
    disc = build_discriminator(cfg.discriminator)
    path, history = train(gen, disc, cfg, out_dir=out_dir, dataset=dataset, resume_from=ckpt, **kw)
    return path, history, gen, disc
