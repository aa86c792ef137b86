"""Dehazing generator: a chain of UNets whose outputs are concatenated and
passed through a bank of parallel odd-sized convolutions (the pyramid block)
before a final 3x3 reconstruction convolution."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy.fft import next_fast_len

from .errors import ConfigError, DimensionError
from .image import ColorSpace, ImageTensor, as_tensor

DEFAULT_PYCON_KERNELS = (3, 5, 7, 11, 17, 25, 35, 45)


@dataclass
class UNetConfig:
    in_channels: int = 3
    out_channels: int = 3
    depth: int = 4
    base_channels: int = 64
    skip_connections: bool = True

    def channel_ladder(self) -> list:
        return [self.base_channels * 2**i for i in range(self.depth)]

    def validate(self):
        if self.in_channels != 3 or self.out_channels != 3:
            raise ConfigError("every UNet unit maps 3 channels to 3 channels")
        if self.depth < 1:
            raise ConfigError(f"UNet depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if not self.skip_connections:
            raise ConfigError("skip connections cannot be disabled")


@dataclass
class GeneratorConfig:
    num_unets: int = 4
    pycon_kernels: tuple = DEFAULT_PYCON_KERNELS
    pycon_channels_per_kernel: Optional[int] = 16
    pycon_total_channels: Optional[int] = None
    use_pycon: bool = True
    final_kernel: int = 3
    unet: UNetConfig = field(default_factory=UNetConfig)
    seed: int = 0

    def __post_init__(self):
        self.pycon_kernels = tuple(int(k) for k in self.pycon_kernels)
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)

    @property
    def per_kernel(self) -> int:
        if self.pycon_total_channels is not None:
            n = len(self.pycon_kernels)
            if n == 0 or self.pycon_total_channels % n:
                raise ConfigError(
                    f"{self.pycon_total_channels} pyramid channels cannot be split "
                    f"evenly over {n} kernels"
                )
            per = self.pycon_total_channels // n
            if self.pycon_channels_per_kernel not in (None, per):
                raise ConfigError("pycon_total_channels disagrees with pycon_channels_per_kernel")
            return per
        if self.pycon_channels_per_kernel is None:
            raise ConfigError("pyramid channel budget is unset")
        return self.pycon_channels_per_kernel

    @property
    def pycon_out_channels(self) -> int:
        return self.per_kernel * len(self.pycon_kernels)

    def validate(self):
        if self.num_unets < 1:
            raise ConfigError(f"num_unets must be >= 1, got {self.num_unets}")
        self.unet.validate()
        if self.use_pycon:
            if not self.pycon_kernels:
                raise ConfigError("pyramid block needs at least one kernel")
            for k in self.pycon_kernels:
                if k < 1 or k % 2 == 0:
                    raise ConfigError(f"pyramid kernel sizes must be odd and positive, got {k}")
            if self.per_kernel < 1:
                raise ConfigError("pyramid branches need at least one channel")
        if self.final_kernel < 1 or self.final_kernel % 2 == 0:
            raise ConfigError(f"final kernel must be odd, got {self.final_kernel}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pycon_kernels"] = list(self.pycon_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["unet"] = UNetConfig(**d.get("unet", {}))
        return cls(**d)


def _conv(cin, cout, k):
    return nn.Conv2d(cin, cout, k, padding=(k - 1) // 2)


class _DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(_conv(cin, cout, 3), nn.ReLU(inplace=True), _conv(cout, cout, 3), nn.ReLU(inplace=True))


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ladder = cfg.channel_ladder()
        self.encoders = nn.ModuleList()
        cin = cfg.in_channels
        for c in ladder:
            self.encoders.append(_DoubleConv(cin, c))
            cin = c
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _DoubleConv(ladder[-1], ladder[-1] * 2)
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        cin = ladder[-1] * 2
        for c in reversed(ladder):
            self.upconvs.append(nn.ConvTranspose2d(cin, c, kernel_size=2, stride=2))
            self.decoders.append(_DoubleConv(2 * c, c))
            cin = c
        self.head = _conv(ladder[0], cfg.out_channels, 3)

    @property
    def divisor(self) -> int:
        return 2**self.cfg.depth

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def _fft_conv_same(x_f, size, weight, bias, out_hw):
    """Zero-padded 'same' cross-correlation computed in the frequency domain.

    ``x_f`` is the rfft2 of the input at ``size``; ``size`` must be at least
    H + k - 1 per axis so the circular product equals the linear one.
    """
    k_h, k_w = weight.shape[-2:]
    w_f = torch.fft.rfft2(weight.flip(-1, -2), s=size)
    y = torch.fft.irfft2(torch.einsum("bihw,oihw->bohw", x_f, w_f), s=size)
    ph, pw = (k_h - 1) // 2, (k_w - 1) // 2
    h, w = out_hw
    y = y[..., ph : ph + h, pw : pw + w]
    return y + bias.view(1, -1, 1, 1) if bias is not None else y


class PyramidConv(nn.Module):
    """Parallel zero-padded convolutions over the same input, concatenated.

    Branches with kernels wider than ``fft_threshold`` are evaluated via FFT;
    the CPU direct path for those sizes is orders of magnitude slower.
    """

    fft_threshold = 11

    def __init__(self, in_channels: int, kernels: Sequence[int], per_kernel: int):
        super().__init__()
        self.in_channels = in_channels
        self.kernels = tuple(kernels)
        self.branches = nn.ModuleList(_conv(in_channels, per_kernel, k) for k in self.kernels)

    def forward(self, x, return_branches=False):
        h, w = x.shape[-2:]
        big = [k for k in self.kernels if k > self.fft_threshold]
        x_f = size = None
        if big:
            kmax = max(big)
            size = (next_fast_len(h + kmax - 1), next_fast_len(w + kmax - 1))
            x_f = torch.fft.rfft2(x, s=size)
        outs = []
        for k, branch in zip(self.kernels, self.branches):
            if k > self.fft_threshold:
                outs.append(_fft_conv_same(x_f, size, branch.weight, branch.bias, (h, w)))
            else:
                outs.append(branch(x))
        y = torch.cat(outs, dim=1)
        return (y, outs) if return_branches else y


class BPPNetGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.unets = nn.ModuleList(UNet(cfg.unet) for _ in range(cfg.num_unets))
        concat_channels = 3 * cfg.num_unets
        if cfg.use_pycon:
            self.pycon = PyramidConv(concat_channels, cfg.pycon_kernels, cfg.per_kernel)
            final_in = cfg.pycon_out_channels
        else:
            self.pycon = None
            final_in = concat_channels
        self.final = _conv(final_in, 3, cfg.final_kernel)

    @property
    def concat_channels(self) -> int:
        return 3 * self.cfg.num_unets

    def check_input(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != 3:
            raise DimensionError(f"generator expects (B, 3, H, W) input, got {tuple(x.shape)}")
        d = self.unets[0].divisor
        h, w = x.shape[-2:]
        if h % d or w % d:
            raise DimensionError(f"spatial size {h}x{w} is not divisible by {d}")

    def iub(self, x):
        intermediates = []
        for unet in self.unets:
            x = unet(x)
            intermediates.append(x)
        return torch.cat(intermediates, dim=1), intermediates

    def reconstruct(self, feat):
        if self.pycon is not None:
            feat = self.pycon(feat)
        return self.final(feat)

    def forward(self, x):
        self.check_input(x)
        concat, _ = self.iub(x)
        return self.reconstruct(concat)


def init_weights(model: nn.Module, seed: int = 0) -> nn.Module:
    """Uniform fan-in initialisation from a seeded stream; biases start at zero.

    Convolutions feeding a ReLU use bound sqrt(6 / fan_in), the rest
    sqrt(3 / fan_in), so activations keep roughly unit variance.
    """
    gen = torch.Generator().manual_seed(int(seed))
    relu_fed = set()
    for m in model.modules():
        if isinstance(m, nn.Sequential):
            children = list(m)
            for a, b in zip(children, children[1:]):
                if isinstance(b, (nn.ReLU, nn.LeakyReLU)):
                    relu_fed.add(id(a))
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w.shape[2] * w.shape[3] // (m.stride[0] * m.stride[1])
            else:
                fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            bound = math.sqrt((6.0 if id(m) in relu_fed else 3.0) / max(fan_in, 1))
            with torch.no_grad():
                w.copy_(torch.rand(w.shape, generator=gen, dtype=torch.float64).mul_(2 * bound).sub_(bound))
                if m.bias is not None:
                    m.bias.zero_()
    return model


def build_generator(cfg: Optional[GeneratorConfig] = None) -> BPPNetGenerator:
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    return init_weights(BPPNetGenerator(cfg), cfg.seed)


def _wrap(like, data, colorspace):
    if isinstance(like, ImageTensor):
        return ImageTensor(data, colorspace)
    return data


def iub_forward(model: BPPNetGenerator, haze):
    """Run the UNet chain; returns the 3M-channel concat and each unit's output."""
    x = as_tensor(haze)
    model.check_input(x)
    concat, intermediates = model.iub(x)
    return (
        _wrap(haze, concat, ColorSpace.FEATURE),
        [_wrap(haze, t, ColorSpace.FEATURE) for t in intermediates],
    )


def pycon_forward(model: BPPNetGenerator, feat):
    x = as_tensor(feat)
    if model.pycon is None:
        raise ConfigError("model was built without the pyramid block")
    if x.dim() != 4 or x.shape[1] != model.pycon.in_channels:
        raise DimensionError(
            f"pyramid block expects {model.pycon.in_channels} channels, got shape {tuple(x.shape)}"
        )
    return _wrap(feat, model.pycon(x), ColorSpace.FEATURE)


def generator_forward(model: BPPNetGenerator, haze, clamp: Optional[bool] = None):
    """Dehaze a batch. Output is clamped to [0, 1] unless the model is training."""
    x = as_tensor(haze)
    y = model(x)
    if clamp is None:
        clamp = not model.training
    if clamp:
        y = y.clamp(0.0, 1.0)
    cs = haze.colorspace if isinstance(haze, ImageTensor) else None
    return _wrap(haze, y, cs)


def channel_stats(t: torch.Tensor, bins: int = 64) -> dict:
    """Per-channel std and histogram of the first batch item."""
    arr = t.detach()[0].double().cpu().numpy()
    std = arr.reshape(arr.shape[0], -1).std(axis=1)
    hists = []
    for ch in arr:
        lo, hi = float(ch.min()), float(ch.max())
        if hi <= lo:
            hi = lo + 1e-12
        counts, edges = np.histogram(ch, bins=bins, range=(lo, hi))
        hists.append((counts, edges))
    return {"std": std, "histograms": hists}


@torch.no_grad()
def dump_intermediates(model: BPPNetGenerator, haze, bins: int = 64) -> dict:
    """Every UNet output and pyramid branch output, with per-channel statistics.

    Keys are ``unet_1..unet_M`` and ``pycon_branch_<kernel>``; each value is a
    dict with ``tensor``, ``std`` and ``histograms``.
    """
    x = as_tensor(haze)
    model.check_input(x)
    concat, intermediates = model.iub(x)
    out = {}
    for i, t in enumerate(intermediates, start=1):
        out[f"unet_{i}"] = {"tensor": t, **channel_stats(t, bins)}
    if model.pycon is not None:
        _, branches = model.pycon(concat, return_branches=True)
        for k, t in zip(model.pycon.kernels, branches):
            out[f"pycon_branch_{k}"] = {"tensor": t, **channel_stats(t, bins)}
    return out


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
