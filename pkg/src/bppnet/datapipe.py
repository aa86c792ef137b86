"""Colour conversion, crop/resize patch preparation and paired dataset loading."""

from __future__ import annotations

import enum
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import DatasetError, DimensionError
from .image import ColorSpace, ImageTensor, as_tensor, hwc_to_batch, read_image, write_png

# Full-range BT.601 (JFIF); chroma offset by 0.5 for [0, 1] data.
_KR, _KB = 0.299, 0.114
_KG = 1.0 - _KR - _KB
RGB_TO_YCBCR = np.array(
    [
        [_KR, _KG, _KB],
        [-_KR / (2 * (1 - _KB)), -_KG / (2 * (1 - _KB)), 0.5],
        [0.5, -_KG / (2 * (1 - _KR)), -_KB / (2 * (1 - _KR))],
    ]
)
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)
CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


def _color_transform(img, matrix, pre_offset, post_offset):
    t = as_tensor(img)
    if t.dim() < 3 or t.shape[-3] != 3:
        raise DimensionError(f"colour conversion needs 3 channels, got shape {tuple(t.shape)}")
    m = torch.as_tensor(matrix, dtype=t.dtype, device=t.device)
    pre = torch.as_tensor(pre_offset, dtype=t.dtype, device=t.device).view(3, 1, 1)
    post = torch.as_tensor(post_offset, dtype=t.dtype, device=t.device).view(3, 1, 1)
    out = torch.einsum("ij,...jhw->...ihw", m, t - pre) + post
    return out.clamp(0.0, 1.0)


def rgb_to_ycbcr(img):
    out = _color_transform(img, RGB_TO_YCBCR, np.zeros(3), CHROMA_OFFSET)
    return ImageTensor(out, ColorSpace.YCBCR) if isinstance(img, ImageTensor) else out


def ycbcr_to_rgb(img):
    out = _color_transform(img, YCBCR_TO_RGB, CHROMA_OFFSET, np.zeros(3))
    return ImageTensor(out, ColorSpace.RGB) if isinstance(img, ImageTensor) else out


def to_colorspace(img: torch.Tensor, src, dst) -> torch.Tensor:
    src, dst = ColorSpace.parse(src), ColorSpace.parse(dst)
    if src == dst:
        return img
    if (src, dst) == (ColorSpace.RGB, ColorSpace.YCBCR):
        return rgb_to_ycbcr(img)
    if (src, dst) == (ColorSpace.YCBCR, ColorSpace.RGB):
        return ycbcr_to_rgb(img)
    raise ValueError(f"no conversion from {src.value} to {dst.value}")


# ---------------------------------------------------------------- resize

BICUBIC_A = -0.5


def cubic_kernel(x, a: float = BICUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def bicubic_weights(n_in: int, n_out: int, a: float = BICUBIC_A) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centres, edge replication."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = int(np.floor(src))
        for tap in range(base - 1, base + 3):
            w[i, min(max(tap, 0), n_in - 1)] += cubic_kernel(src - tap, a)
    return w


def bicubic_resize(img, target=512, a: float = BICUBIC_A):
    """Separable bicubic resize of the last two axes; output clamped to [0, 1].

    Accepts numpy (H, W, C) arrays or tensors (..., H, W).
    """
    th, tw = (target, target) if np.isscalar(target) else target
    if isinstance(img, np.ndarray):
        h, w = img.shape[:2]
        if (h, w) == (th, tw):
            return np.clip(img, 0.0, 1.0)
        wh, ww = bicubic_weights(h, th, a), bicubic_weights(w, tw, a)
        out = np.einsum("ih,hwc,jw->ijc", wh, img.astype(np.float64), ww)
        return np.clip(out, 0.0, 1.0)
    t = as_tensor(img)
    h, w = t.shape[-2:]
    if (h, w) == (th, tw):
        out = t.clamp(0.0, 1.0)
    else:
        wh = torch.from_numpy(bicubic_weights(h, th, a)).to(t.dtype)
        ww = torch.from_numpy(bicubic_weights(w, tw, a)).to(t.dtype)
        out = (wh @ t @ ww.T).clamp(0.0, 1.0)
    return img.with_data(out) if isinstance(img, ImageTensor) else out


# ----------------------------------------------------------------- crops


def random_crops(pair, plan, rng: np.random.Generator):
    """Aligned random square crops of a (hazy, gt) pair of (H, W, C) arrays.

    Returns a list of (hazy_patch, gt_patch, (top, left, size)).
    """
    hazy, gt = pair
    if hazy.shape != gt.shape:
        raise DimensionError(f"pair shapes differ: {hazy.shape} vs {gt.shape}")
    h, w = hazy.shape[:2]
    out = []
    for size, count in plan:
        if size > min(h, w):
            raise DimensionError(f"crop {size} exceeds image {h}x{w}")
        for _ in range(count):
            top = int(rng.integers(0, h - size + 1))
            left = int(rng.integers(0, w - size + 1))
            sl = (slice(top, top + size), slice(left, left + size))
            out.append((hazy[sl], gt[sl], (top, left, size)))
    return out


# --------------------------------------------------------------- datasets


class DatasetName(str, enum.Enum):
    IHAZE = "ihaze"
    OHAZE = "ohaze"
    DENSEHAZE = "densehaze"
    NTIRE2020 = "ntire2020"
    SYNTHETIC = "synthetic"


_DEFAULT_PLANS = {
    DatasetName.IHAZE: [(1024, 4), (2048, 4)],
    DatasetName.OHAZE: [(1024, 4), (2048, 4)],
    DatasetName.DENSEHAZE: [(1024, 4)],
    DatasetName.NTIRE2020: [(1024, 4)],
    DatasetName.SYNTHETIC: None,
}
_DEFAULT_SPACE = {
    DatasetName.IHAZE: ColorSpace.YCBCR,
    DatasetName.OHAZE: ColorSpace.YCBCR,
    DatasetName.DENSEHAZE: ColorSpace.RGB,
    DatasetName.NTIRE2020: ColorSpace.YCBCR,
    DatasetName.SYNTHETIC: ColorSpace.YCBCR,
}


@dataclass
class DatasetSpec:
    """Where a paired dataset lives and how its training patches are made.

    ``crop_plan`` of ``None`` means one full-image crop (the image must be
    square).
    """

    name: DatasetName = DatasetName.SYNTHETIC
    root: str = "."
    split: str = "train"
    colorspace: Optional[ColorSpace] = None
    crop_plan: Optional[List[Tuple[int, int]]] = field(default=None)
    resize: int = 512

    def __post_init__(self):
        self.name = DatasetName(str(getattr(self.name, "value", self.name)).lower().replace("-", ""))
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        self.colorspace = ColorSpace.parse(self.colorspace or _DEFAULT_SPACE[self.name])
        if self.colorspace not in (ColorSpace.RGB, ColorSpace.YCBCR):
            raise ValueError("dataset colorspace must be rgb or ycbcr")
        if self.crop_plan is None:
            self.crop_plan = _DEFAULT_PLANS[self.name]
        if self.crop_plan is not None:
            self.crop_plan = [(int(s), int(c)) for s, c in self.crop_plan]

    def to_dict(self) -> dict:
        return {
            "name": self.name.value,
            "root": str(self.root),
            "split": self.split,
            "colorspace": self.colorspace.value,
            "crop_plan": None if self.crop_plan is None else [list(p) for p in self.crop_plan],
            "resize": self.resize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
_HAZY_RE = re.compile(r"^(?P<id>.+?)[_-](hazy|haze)$", re.IGNORECASE)
_GT_RE = re.compile(r"^(?P<id>.+?)[_-](gt|clear|clean)$", re.IGNORECASE)


def _image_files(d: Path):
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _index(files, pattern, strict):
    out = {}
    for p in files:
        m = pattern.match(p.stem)
        if m:
            key = m.group("id")
        elif strict:
            continue
        else:
            key = p.stem
        if key in out:
            raise DatasetError(f"duplicate image id {key!r}: {out[key]} and {p}")
        out[key] = p
    return out


def _find_subdir(root: Path, names):
    for n in names:
        for cand in root.iterdir():
            if cand.is_dir() and cand.name.lower() == n:
                return cand
    return None


class PairedDataset:
    """Hazy/ground-truth pairs addressed by stable string IDs, decoded lazily."""

    def __init__(self, pairs: List[Tuple[str, Path, Path]]):
        self.pairs = pairs
        self._cache = {}

    @property
    def ids(self):
        return [p[0] for p in self.pairs]

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        pid, hazy_path, gt_path = self.pairs[i]
        if pid not in self._cache:
            hazy, gt = read_image(hazy_path), read_image(gt_path)
            if hazy.shape != gt.shape:
                raise DatasetError(f"pair {pid}: {hazy_path} is {hazy.shape} but {gt_path} is {gt.shape}")
            self._cache[pid] = (hazy, gt)
        return (pid, *self._cache[pid])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_dataset(spec: DatasetSpec) -> PairedDataset:
    """Find hazy/GT pairs under ``spec.root`` (or ``root/<split>`` if present).

    Recognises ``hazy/`` + ``GT/`` subdirectories and flat directories with
    ``NN_hazy.*`` / ``NN_GT.*`` naming. Ordering is lexicographic by ID.
    """
    root = Path(spec.root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    if (root / spec.split).is_dir():
        root = root / spec.split
    hazy_dir = _find_subdir(root, ("hazy", "haze"))
    gt_dir = _find_subdir(root, ("gt", "clear", "clean"))
    if hazy_dir is not None and gt_dir is not None:
        hazy = _index(_image_files(hazy_dir), _HAZY_RE, strict=False)
        gt = _index(_image_files(gt_dir), _GT_RE, strict=False)
    else:
        files = _image_files(root)
        hazy = _index(files, _HAZY_RE, strict=True)
        gt = _index(files, _GT_RE, strict=True)
    orphans = sorted(set(hazy) ^ set(gt))
    if orphans:
        named = [str(hazy.get(o) or gt.get(o)) for o in orphans]
        raise DatasetError(f"unpaired images (no partner found): {', '.join(named)}")
    if not hazy:
        raise DatasetError(f"no image pairs found under {root}")
    return PairedDataset([(k, hazy[k], gt[k]) for k in sorted(hazy)])


# ---------------------------------------------------------- patch stream


def _prepare_image(spec: DatasetSpec, hazy, gt, rng):
    if spec.crop_plan is None:
        h, w = hazy.shape[:2]
        crops = [(hazy, gt, (0, 0, min(h, w)))] if h == w else random_crops((hazy, gt), [(min(h, w), 1)], rng)
    else:
        crops = random_crops((hazy, gt), spec.crop_plan, rng)
    out = []
    for hz, g, _ in crops:
        hz_t = hwc_to_batch(bicubic_resize(hz, spec.resize))[0]
        g_t = hwc_to_batch(bicubic_resize(g, spec.resize))[0]
        if spec.colorspace == ColorSpace.YCBCR:
            hz_t, g_t = rgb_to_ycbcr(hz_t), rgb_to_ycbcr(g_t)
        out.append((hz_t, g_t))
    return out


def epoch_patches(dataset: PairedDataset, spec: DatasetSpec, seed: int, epoch: int,
                  workers: int = 0) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """All (hazy, gt) training patches for one epoch, as (3, S, S) float32
    tensors in the training colour space.

    Every image draws crops from its own stream seeded by (seed, epoch, index),
    so output does not depend on ``workers``.
    """

    def job(i):
        _, hazy, gt = dataset[i]
        rng = np.random.default_rng([seed, epoch, i])
        return _prepare_image(spec, hazy, gt, rng)

    if workers > 0:
        with ThreadPoolExecutor(workers) as pool:
            per_image = list(pool.map(job, range(len(dataset))))
    else:
        per_image = [job(i) for i in range(len(dataset))]
    return [p for patches in per_image for p in patches]


def save_patch(path, tensor: torch.Tensor, colorspace=ColorSpace.RGB) -> None:
    """Save a (3, H, W) or (1, 3, H, W) tensor as an RGB PNG."""
    t = tensor if tensor.dim() == 4 else tensor.unsqueeze(0)
    t = to_colorspace(t, colorspace, ColorSpace.RGB)
    write_png(path, t[0].detach().cpu().double().numpy().transpose(1, 2, 0))
