"""RGB-space SSIM/PSNR evaluation, reports, and the ablation grid runner."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch

from .archive import write_atomic
from .datapipe import DatasetSpec, PairedDataset, bicubic_resize, load_dataset, to_colorspace
from .discriminator import build_discriminator
from .errors import DimensionError
from .generator import BPPNetGenerator, build_generator, channel_stats, generator_forward
from .image import ColorSpace, ImageTensor, hwc_to_batch, write_png
from .losses import SSIMParams, l2_loss, ssim
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)


def psnr(gt, pred) -> float:
    """PSNR in dB for data in [0, 1]; identical inputs give ``inf``."""
    mse = float(l2_loss(gt, pred))
    if mse == 0:
        return math.inf
    return 10 * math.log10(1.0 / mse)


def metric_ssim(gt, pred, params: SSIMParams = SSIMParams()) -> float:
    """SSIM computed per channel and averaged, in double precision."""
    g = torch.as_tensor(gt.data if isinstance(gt, ImageTensor) else gt).double()
    p = torch.as_tensor(pred.data if isinstance(pred, ImageTensor) else pred).double()
    return float(ssim(g, p, params))


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


@dataclass
class EvalReport:
    rows: List[dict] = field(default_factory=list)
    fingerprint: str = ""
    label: str = ""

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r["ssim"] for r in self.rows])) if self.rows else math.nan

    @property
    def mean_psnr(self) -> float:
        vals = [r["psnr_db"] for r in self.rows]
        if not vals:
            return math.nan
        return math.inf if any(math.isinf(v) for v in vals) else float(np.mean(vals))

    @property
    def mean_ms(self) -> float:
        return float(np.mean([r["inference_ms"] for r in self.rows])) if self.rows else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "ssim", "psnr_db", "inference_ms"])
        for r in self.rows:
            w.writerow([r["id"], _fmt(r["ssim"]), _fmt(r["psnr_db"]), f"{r['inference_ms']:.3f}"])
        w.writerow(["mean", _fmt(self.mean_ssim), _fmt(self.mean_psnr), f"{self.mean_ms:.3f}"])
        return buf.getvalue()

    def render_table(self, dataset_label: str = "") -> str:
        title = f"{dataset_label} dataset" if dataset_label else "Evaluation"
        psnr_s = "inf" if math.isinf(self.mean_psnr) else f"{self.mean_psnr:.2f}"
        lines = [
            title,
            f"{'Metric':<8} | {'Our model':>10}",
            f"{'SSIM':<8} | {self.mean_ssim:>10.4f}",
            f"{'PSNR':<8} | {psnr_s:>10}",
            f"mean running time {self.mean_ms / 1000:.4f} s ({self.mean_ms:.1f} ms) per image",
        ]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, dataset_label: str = "") -> None:
        out = Path(out_dir)
        write_atomic(out / "report.csv", self.to_csv().encode())
        write_atomic(out / "report.txt", self.render_table(dataset_label).encode())


@dataclass
class EvalOptions:
    eval_size: int = 512
    colorspace: ColorSpace = ColorSpace.YCBCR
    ssim_params: SSIMParams = SSIMParams()
    dump_dir: Optional[str] = None
    metric_hook: Optional[Callable[[str, ColorSpace, ColorSpace], None]] = None
    fingerprint: str = ""

    def __post_init__(self):
        self.colorspace = ColorSpace.parse(self.colorspace)


def config_fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@torch.no_grad()
def evaluate(model, dataset: PairedDataset, opts: EvalOptions = None) -> EvalReport:
    """Score ``model`` on every pair of ``dataset``.

    Inputs are resized to ``opts.eval_size``, converted to the model's colour
    space, dehazed, clamped and converted back to RGB; metrics always compare
    RGB tensors. Timing covers the forward pass only. ``model`` may be a
    generator or any callable on (B, 3, H, W) tensors.
    """
    opts = opts or EvalOptions()
    if isinstance(model, torch.nn.Module):
        model.eval()
    report = EvalReport(fingerprint=opts.fingerprint)
    for pid, hazy, gt in dataset:
        hazy_t = hwc_to_batch(bicubic_resize(hazy, opts.eval_size))
        gt_rgb = ImageTensor(hwc_to_batch(bicubic_resize(gt, opts.eval_size), torch.float64), ColorSpace.RGB)
        x = to_colorspace(hazy_t, ColorSpace.RGB, opts.colorspace)
        t0 = time.perf_counter()
        if isinstance(model, BPPNetGenerator):
            y = generator_forward(model, x, clamp=True)
        else:
            y = model(x).clamp(0.0, 1.0)
        ms = (time.perf_counter() - t0) * 1000.0
        pred_rgb = ImageTensor(to_colorspace(y.double(), opts.colorspace, ColorSpace.RGB), ColorSpace.RGB)
        if opts.metric_hook is not None:
            opts.metric_hook(pid, gt_rgb.colorspace, pred_rgb.colorspace)
        if gt_rgb.colorspace != ColorSpace.RGB or pred_rgb.colorspace != ColorSpace.RGB:
            raise DimensionError("metrics must be computed on RGB tensors")
        report.rows.append({
            "id": pid,
            "ssim": metric_ssim(gt_rgb, pred_rgb, opts.ssim_params),
            "psnr_db": psnr(gt_rgb.data, pred_rgb.data),
            "inference_ms": ms,
        })
        if opts.dump_dir is not None:
            _dump(Path(opts.dump_dir), pid, pred_rgb.data, gt_rgb.data)
    return report


def _dump(out: Path, pid: str, pred: torch.Tensor, gt: torch.Tensor):
    p = pred[0].cpu().numpy().transpose(1, 2, 0)
    g = gt[0].cpu().numpy().transpose(1, 2, 0)
    write_png(out / "dehazed" / f"{pid}_dehazed.png", p)
    write_png(out / "diff" / f"{pid}_diff.png", np.abs(p - g))
    write_histograms(out / "hist" / f"{pid}_hist.csv", pred)


def write_histograms(path, t: torch.Tensor, bins: int = 64):
    stats = channel_stats(t, bins)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["channel", "bin_lo", "bin_hi", "count"])
    for ch, (counts, edges) in enumerate(stats["histograms"]):
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            w.writerow([ch, f"{lo:.6g}", f"{hi:.6g}", int(c)])
    w.writerow([])
    w.writerow(["channel", "std"])
    for ch, s in enumerate(stats["std"]):
        w.writerow([ch, f"{s:.6g}"])
    write_atomic(Path(path), buf.getvalue().encode())


# -------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationCell:
    label: str
    num_unets: int = 4
    use_pycon: bool = True
    drop_loss: Optional[str] = None
    colorspace: ColorSpace = ColorSpace.YCBCR


REFERENCE = AblationCell("reference")


@dataclass
class AblationGrid:
    cells: List[AblationCell] = field(default_factory=lambda: [REFERENCE])
    seed: int = 0

    def __post_init__(self):
        if not any(c == REFERENCE or c.label == "reference" for c in self.cells):
            self.cells = [REFERENCE] + list(self.cells)

    @classmethod
    def full(cls, seed: int = 0) -> "AblationGrid":
        """Every single-factor variation around the reference cell."""
        cells = [REFERENCE]
        cells += [AblationCell(f"{m} UNet" + ("s" if m > 1 else ""), num_unets=m) for m in (1, 2, 3, 5)]
        cells.append(AblationCell("No PyCon", use_pycon=False))
        cells += [AblationCell(f"drop {t}", drop_loss=t) for t in ("adv", "con", "l2", "ssim")]
        cells.append(AblationCell("RGB", colorspace=ColorSpace.RGB))
        return cls(cells, seed)

    @classmethod
    def select(cls, labels, seed: int = 0) -> "AblationGrid":
        by_label = {c.label: c for c in cls.full(seed).cells}
        unknown = [l for l in labels if l not in by_label]
        if unknown:
            raise ValueError(f"unknown ablation cells {unknown}; known: {list(by_label)}")
        return cls([by_label[l] for l in labels], seed)

    def cell_seed(self, cell: AblationCell) -> int:
        state = np.random.SeedSequence([self.seed, zlib.crc32(cell.label.encode())]).generate_state(1)[0]
        return int(state % (2**31))


def cell_config(base: TrainConfig, cell: AblationCell, seed: int) -> TrainConfig:
    cfg = copy.deepcopy(base)
    cfg.seed = seed
    cfg.generator = replace(cfg.generator, num_unets=cell.num_unets, use_pycon=cell.use_pycon, seed=seed)
    cfg.discriminator = replace(cfg.discriminator, seed=seed + 1)
    cfg.weights = cfg.weights.dropping(cell.drop_loss)
    cfg.dataset = replace(cfg.dataset, colorspace=cell.colorspace)
    return cfg


@dataclass
class AblationTable:
    reports: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    labels: List[str] = field(default_factory=list)

    def render(self, dataset_label: str = "") -> str:
        head = ["Dataset", "Metric"] + self.labels
        rows = []
        for metric in ("SSIM", "PSNR"):
            row = [dataset_label if metric == "SSIM" else "", metric]
            for label in self.labels:
                rep = self.reports.get(label)
                if rep is None:
                    row.append("failed")
                elif metric == "SSIM":
                    row.append(f"{rep.mean_ssim:.4f}")
                else:
                    row.append("inf" if math.isinf(rep.mean_psnr) else f"{rep.mean_psnr:.2f}")
            rows.append(row)
        widths = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: " | ".join(str(v).ljust(w) for v, w in zip(r, widths))
        out = [fmt(head), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in rows]
        for label, err in self.errors.items():
            out.append(f"# {label}: {err}")
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "ssim", "psnr_db", "error"])
        for label in self.labels:
            rep = self.reports.get(label)
            if rep is None:
                w.writerow([label, "", "", self.errors.get(label, "")])
            else:
                w.writerow([label, _fmt(rep.mean_ssim), _fmt(rep.mean_psnr), ""])
        return buf.getvalue()


def run_ablation(grid: AblationGrid, base_cfg: TrainConfig, eval_data: PairedDataset,
                 train_data: Optional[PairedDataset] = None, out_dir=None,
                 eval_size: Optional[int] = None) -> AblationTable:
    """Train and evaluate one model per grid cell, sequentially.

    A failing cell is recorded in ``table.errors`` and the rest still run.
    """
    if train_data is None:
        train_data = load_dataset(base_cfg.dataset)
    eval_size = eval_size or base_cfg.dataset.resize
    table = AblationTable(labels=[c.label for c in grid.cells])
    for cell in grid.cells:
        seed = grid.cell_seed(cell)
        cfg = cell_config(base_cfg, cell, seed)
        cell_dir = Path(out_dir) / _slug(cell.label) if out_dir is not None else None
        log.info("ablation cell %s (seed %d)", cell.label, seed)
        try:
            gen = build_generator(cfg.generator)
            disc = build_discriminator(cfg.discriminator)
            train(gen, disc, cfg, out_dir=cell_dir, dataset=train_data)
            opts = EvalOptions(eval_size=eval_size, colorspace=cfg.dataset.colorspace,
                               fingerprint=config_fingerprint(cfg.to_dict()))
            report = evaluate(gen, eval_data, opts)
            report.label = cell.label
            table.reports[cell.label] = report
            if cell_dir is not None:
                report.write(cell_dir)
        except Exception as exc:  # recorded, remaining cells proceed
            log.exception("ablation cell %s failed", cell.label)
            table.errors[cell.label] = f"{type(exc).__name__}: {exc}"
    if out_dir is not None:
        write_atomic(Path(out_dir) / "ablation.csv", table.to_csv().encode())
        write_atomic(Path(out_dir) / "ablation.txt", table.render().encode())
    return table


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label.lower()).strip("_")
