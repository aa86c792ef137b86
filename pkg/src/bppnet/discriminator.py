"""Patch discriminator: a stack of 4x4 convolutions ending in a sigmoid map,
one realness probability per overlapping receptive-field patch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import torch
import torch.nn as nn

from .errors import ConfigError, DimensionError
from .generator import init_weights
from .image import as_tensor

# (in_ch, out_ch, kernel, stride, padding); 512 -> 255 -> 126 -> 63 -> 62
DEFAULT_LAYERS = (
    (3, 64, 4, 2, 0),
    (64, 128, 4, 2, 0),
    (128, 256, 4, 2, 1),
    (256, 1, 4, 1, 1),
)


@dataclass
class DiscriminatorConfig:
    layers: Tuple[Tuple[int, int, int, int, int], ...] = DEFAULT_LAYERS
    leaky_slope: float = 0.2
    seed: int = 1

    def __post_init__(self):
        self.layers = tuple(tuple(int(v) for v in layer) for layer in self.layers)

    def validate(self):
        if not self.layers:
            raise ConfigError("discriminator needs at least one layer")
        prev_out = 3
        for i, (cin, cout, k, s, p) in enumerate(self.layers):
            if k != 4:
                raise ConfigError(f"layer {i}: kernels must be 4x4, got {k}")
            if cin != prev_out:
                raise ConfigError(f"layer {i}: expects {cin} channels but receives {prev_out}")
            if s < 1 or p < 0 or cout < 1:
                raise ConfigError(f"layer {i}: invalid stride/padding/channels {(cin, cout, k, s, p)}")
            prev_out = cout
        if prev_out != 1:
            raise ConfigError("last discriminator layer must output one channel")
        rf, stride = receptive_field(self.layers)
        if rf <= stride:
            raise ConfigError(f"patches do not overlap: receptive field {rf} <= stride {stride}")

    def to_dict(self) -> dict:
        return {"layers": [list(l) for l in self.layers], "leaky_slope": self.leaky_slope, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        return cls(**d)


def conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def output_size(layers, n: int) -> int:
    for _, _, k, s, p in layers:
        n = conv_out_size(n, k, s, p)
    return n


def receptive_field(layers) -> Tuple[int, int]:
    """(receptive field in pixels, effective stride) of a conv stack."""
    rf, jump = 1, 1
    for _, _, k, s, _ in layers:
        rf += (k - 1) * jump
        jump *= s
    return rf, jump


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        mods: List[nn.Module] = []
        for i, (cin, cout, k, s, p) in enumerate(cfg.layers):
            mods.append(nn.Conv2d(cin, cout, k, stride=s, padding=p))
            if i < len(cfg.layers) - 1:
                mods.append(nn.LeakyReLU(cfg.leaky_slope, inplace=True))
        self.net = nn.Sequential(*mods)

    def output_size(self, n: int) -> int:
        return output_size(self.cfg.layers, n)

    def logits(self, x):
        """Pre-sigmoid patch scores; training losses are computed from these."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise DimensionError(f"discriminator expects (B, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if self.output_size(h) < 1 or self.output_size(w) < 1:
            raise DimensionError(f"input {h}x{w} is too small for the discriminator stack")
        return self.net(x)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def build_discriminator(cfg: DiscriminatorConfig = None) -> PatchDiscriminator:
    cfg = cfg or DiscriminatorConfig()
    cfg.validate()
    return init_weights(PatchDiscriminator(cfg), cfg.seed)


def discriminator_forward(model: PatchDiscriminator, img) -> torch.Tensor:
    return model(as_tensor(img))
