"""Synthetic haze via the Koschmieder scattering model, I = J*t + A*(1 - t).

Used to build small, fully seeded paired datasets for training and testing;
the scenes are procedural and the depth maps are invented, so the results
say nothing about real haze statistics.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .archive import dump_kv, write_atomic
from .errors import DimensionError
from .image import write_png


class HazeMode(str, enum.Enum):
    HOMOGENEOUS = "homogeneous"
    DENSE = "dense"
    INHOMOGENEOUS = "inhomogeneous"


BETA_RANGES = {
    HazeMode.HOMOGENEOUS: (0.6, 1.2),
    HazeMode.DENSE: (2.0, 3.0),
    HazeMode.INHOMOGENEOUS: (1.0, 2.0),
}


@dataclass
class HazeParams:
    atmospheric_light: np.ndarray
    beta: float
    depth_map: np.ndarray
    mode: HazeMode = HazeMode.HOMOGENEOUS
    field: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        self.mode = HazeMode(self.mode)
        self.atmospheric_light = np.asarray(self.atmospheric_light, dtype=np.float64)
        if np.any(self.atmospheric_light < 0) or np.any(self.atmospheric_light > 1):
            raise ValueError("atmospheric light components must lie in [0, 1]")
        if np.any(np.asarray(self.depth_map) < 0):
            raise ValueError("depth must be nonnegative")


def smooth_field(shape, seed: int, correlation: float = 0.25) -> np.ndarray:
    """Seeded low-frequency noise rescaled to [0, 1]; correlation length is a
    fraction of the image width."""
    h, w = shape
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((h, w))
    f = gaussian_filter(noise, sigma=max(correlation * w / 2, 1.0), mode="wrap")
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)


def synthetic_depth(shape, seed: int) -> np.ndarray:
    """Vertical ramp (far at the top) plus smooth noise; values in about [0.3, 1.5]."""
    h, w = shape
    ramp = np.linspace(1.2, 0.3, h)[:, None] * np.ones((1, w))
    return ramp + 0.3 * smooth_field(shape, seed + 7919, correlation=0.25)


def transmission(params: HazeParams) -> np.ndarray:
    if not params.beta > 0:
        raise ValueError(f"scattering coefficient must be positive, got {params.beta}")
    optical = params.beta * np.asarray(params.depth_map, dtype=np.float64)
    if params.mode == HazeMode.INHOMOGENEOUS:
        field = params.field
        if field is None:
            field = 0.2 + 0.8 * smooth_field(optical.shape, params.seed)
        optical = optical * field
    return np.exp(-optical)


def apply_koschmieder(clear: np.ndarray, t: np.ndarray, airlight, clamp: bool = True) -> np.ndarray:
    """Hazy image from clear (H, W, C) scene, (H, W) transmission and per-channel light."""
    clear = np.asarray(clear, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == clear.ndim - 1:
        t = t[..., None]
    if t.shape[:2] != clear.shape[:2]:
        raise DimensionError(f"transmission {t.shape} does not match image {clear.shape}")
    a = np.asarray(airlight, dtype=np.float64)
    hazy = clear * t + a * (1 - t)
    return np.clip(hazy, 0.0, 1.0) if clamp else hazy


def procedural_scene(size: int, rng: np.random.Generator) -> np.ndarray:
    """Textured gradient background with a few random rectangles and discs."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(size - 1, 1)
    c0, c1 = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0 + (c1 - c0) * ramp[..., None]
    freq = rng.uniform(3, 9, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    texture = np.sin(2 * np.pi * freq[0] * xx + phase[0]) * np.sin(2 * np.pi * freq[1] * yy + phase[1])
    img = img + 0.08 * texture[..., None]
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0, 1, 3)
        if rng.random() < 0.5:
            y0, x0 = rng.uniform(0, 0.8, 2)
            hh, ww = rng.uniform(0.1, 0.4, 2)
            mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:
            cy, cx = rng.uniform(0.1, 0.9, 2)
            r = rng.uniform(0.06, 0.2)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[mask] = color
    img = img + rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def sample_params(size: int, mode, rng: np.random.Generator, image_seed: int,
                  beta_range=None) -> HazeParams:
    mode = HazeMode(mode)
    lo, hi = beta_range or BETA_RANGES[mode]
    beta = lo + (hi - lo) * rng.random()
    base = rng.uniform(0.7, 0.9)
    airlight = np.clip(base + rng.uniform(-0.05, 0.05, 3), 0, 1)
    depth = synthetic_depth((size, size), image_seed)
    field = 0.2 + 0.8 * smooth_field((size, size), image_seed + 104729) if mode == HazeMode.INHOMOGENEOUS else None
    return HazeParams(airlight, beta, depth, mode, field, image_seed)


def synthesize_pair(size: int, mode, seed: int, beta_range=None):
    """(clear, hazy, params) for one seeded image."""
    rng = np.random.default_rng(seed)
    clear = procedural_scene(size, rng)
    params = sample_params(size, mode, rng, seed, beta_range)
    hazy = apply_koschmieder(clear, transmission(params), params.atmospheric_light)
    return clear, hazy, params


def generate_pairs(n: int, size: int, mode, seed: int, out_dir, beta_range=None) -> Path:
    """Write ``n`` seeded pairs as ``hazy/NN_hazy.png`` + ``GT/NN_GT.png``
    under ``out_dir`` with a ``haze_manifest.txt`` sidecar."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mode = HazeMode(mode)
    out = Path(out_dir)
    (out / "hazy").mkdir(parents=True, exist_ok=True)
    (out / "GT").mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(n)))
    records = {}
    for i in range(n):
        image_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        clear, hazy, params = synthesize_pair(size, mode, image_seed, beta_range)
        pid = f"{i + 1:0{width}d}"
        write_png(out / "hazy" / f"{pid}_hazy.png", hazy)
        write_png(out / "GT" / f"{pid}_GT.png", clear)
        t = transmission(params)
        records[pid] = {
            "seed": image_seed,
            "beta": round(float(params.beta), 9),
            "atmospheric_light": [round(float(v), 9) for v in params.atmospheric_light],
            "mean_transmission": round(float(t.mean()), 9),
        }
    manifest = {
        "generator": "koschmieder",
        "n": n,
        "size": size,
        "mode": mode.value,
        "seed": seed,
        "beta_range": list(beta_range or BETA_RANGES[mode]),
        "pairs": records,
    }
    write_atomic(out / "haze_manifest.txt", dump_kv(manifest).encode())
    return out
