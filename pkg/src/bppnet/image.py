"""Color-space tagged image batches and a few raster helpers."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class ColorSpace(str, enum.Enum):
    RGB = "rgb"
    YCBCR = "ycbcr"
    FEATURE = "feature"

    @classmethod
    def parse(cls, value) -> "ColorSpace":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown colorspace {value!r}") from None


@dataclass
class ImageTensor:
    """A (batch, channels, height, width) tensor carrying its color space."""

    data: torch.Tensor
    colorspace: ColorSpace = ColorSpace.RGB

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"expected a 4-axis tensor, got shape {tuple(self.data.shape)}")
        b, _, h, w = self.data.shape
        if b < 1 or h < 1 or w < 1:
            raise ValueError(f"empty image tensor of shape {tuple(self.data.shape)}")
        self.colorspace = ColorSpace.parse(self.colorspace)

    @property
    def shape(self):
        return tuple(self.data.shape)

    def with_data(self, data: torch.Tensor, colorspace=None) -> "ImageTensor":
        return ImageTensor(data, self.colorspace if colorspace is None else colorspace)


def as_tensor(img) -> torch.Tensor:
    return img.data if isinstance(img, ImageTensor) else img


def read_image(path) -> np.ndarray:
    """Decode an RGB image file to a float64 (H, W, 3) array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def write_png(path, arr: np.ndarray) -> None:
    """Write an (H, W, 3) or (H, W) float array in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8).save(path, format="PNG")


def hwc_to_batch(arr: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def batch_to_hwc(t: torch.Tensor) -> np.ndarray:
    if t.dim() == 4:
        t = t[0]
    return t.detach().cpu().double().numpy().transpose(1, 2, 0)
