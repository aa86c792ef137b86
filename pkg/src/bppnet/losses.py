"""Training objectives: adversarial terms, MSE, perceptual content loss,
SSIM, and their weighted combinations."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .image import as_tensor

EPS = 1e-7


@dataclass
class LossWeights:
    adv: float = 0.7
    content: float = 0.5
    l2: float = 1.0
    ssim: float = 1.0
    disc: float = 1.0

    TERMS = ("adv", "content", "l2", "ssim")

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative, got {v}")

    def dropping(self, term: Optional[str]) -> "LossWeights":
        """Copy with one generator term switched off (``None`` keeps all)."""
        if term in (None, "none"):
            return LossWeights(**asdict(self))
        aliases = {"con": "content", "l2": "l2", "adv": "adv", "ssim": "ssim", "content": "content"}
        if term not in aliases:
            raise ConfigError(f"unknown loss term {term!r}")
        d = asdict(self)
        d[aliases[term]] = 0.0
        return LossWeights(**d)

    def to_dict(self):
        return asdict(self)


def _check_finite(name, *tensors):
    for t in tensors:
        t = torch.as_tensor(t)
        if not torch.isfinite(t).all():
            raise ValueError(f"{name}: non-finite input")


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def adv_gen_loss(pred_map: torch.Tensor) -> torch.Tensor:
    """-mean(log D(pred)), the non-saturating generator objective."""
    _check_finite("adv_gen_loss", pred_map)
    return -torch.log(pred_map.clamp(EPS, 1 - EPS)).mean()


def adv_disc_loss(real_map: torch.Tensor, fake_map: torch.Tensor) -> torch.Tensor:
    _check_finite("adv_disc_loss", real_map, fake_map)
    real = torch.log(real_map.clamp(EPS, 1 - EPS)).mean()
    fake = torch.log1p(-fake_map.clamp(EPS, 1 - EPS)).mean()
    return -(real + fake)


def adv_gen_loss_logits(pred_logits: torch.Tensor) -> torch.Tensor:
    """``adv_gen_loss`` on sigmoid(pred_logits) without clamping:
    -log(sigmoid(z)) = softplus(-z)."""
    _check_finite("adv_gen_loss_logits", pred_logits)
    return F.softplus(-pred_logits).mean()


def adv_disc_loss_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """``adv_disc_loss`` from logits; -log(1 - sigmoid(z)) = softplus(z).

    A saturated sigmoid in float32 is exactly 0 or 1, where the clamped
    probability form has zero gradient and the discriminator cannot recover.
    """
    _check_finite("adv_disc_loss_logits", real_logits, fake_logits)
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def l2_loss(gt, pred) -> torch.Tensor:
    gt, pred = as_tensor(gt), as_tensor(pred)
    _check_same_shape(gt, pred)
    return (gt - pred).pow(2).mean()


# ---------------------------------------------------------------- SSIM


@dataclass(frozen=True)
class SSIMParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ConfigError(f"SSIM window size must be odd, got {self.window_size}")

    @property
    def c1(self):
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.data_range) ** 2


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    """Normalised 2-D Gaussian window, shape (size, size)."""
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(gt, pred, params: SSIMParams = SSIMParams()) -> torch.Tensor:
    """Local SSIM at every full window position (no padding), per channel."""
    x, y = as_tensor(gt), as_tensor(pred)
    _check_same_shape(x, y)
    if x.dim() != 4:
        raise DimensionError(f"expected (B, C, H, W), got {tuple(x.shape)}")
    ws = params.window_size
    if x.shape[-1] < ws or x.shape[-2] < ws:
        raise DimensionError(f"image {tuple(x.shape[-2:])} is smaller than the {ws}x{ws} SSIM window")
    c = x.shape[1]
    win = gaussian_window(ws, params.sigma, x.dtype).to(x.device).expand(c, 1, ws, ws)

    def filt(t):
        return F.conv2d(t, win, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = params.c1, params.c2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(gt, pred, params: SSIMParams = SSIMParams()) -> torch.Tensor:
    return ssim_map(gt, pred, params).mean()


def ssim_loss(gt, pred, params: SSIMParams = SSIMParams()) -> torch.Tensor:
    return 1 - ssim(gt, pred, params)


# ---------------------------------------------------------- content loss


class FeatureExtractor(nn.Module):
    """Sequential network with named taps; returns the tapped activations."""

    def __init__(self, layers: nn.Sequential, taps: dict, mean=None, std=None):
        super().__init__()
        last = max(taps.values())
        self.layers = nn.Sequential(*list(layers)[: last + 1])
        self.taps = dict(taps)
        self.register_buffer("mean", None if mean is None else torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", None if std is None else torch.tensor(std).view(1, -1, 1, 1))
        self.freeze()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # always evaluated in inference mode
        return super().train(False)

    @property
    def names(self):
        return list(self.taps)

    def forward(self, x):
        if self.mean is not None:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        by_index = {i: n for n, i in self.taps.items()}
        out = OrderedDict()
        if -1 in by_index:
            out[by_index[-1]] = x
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in by_index:
                out[by_index[i]] = x
        return OrderedDict((n, out[n]) for n in self.taps)


class IdentityExtractor(FeatureExtractor):
    """Single activation equal to the input."""

    def __init__(self):
        super().__init__(nn.Sequential(), {"input": -1})


VGG19_TAPS = {"relu1_2": 3, "relu2_2": 8, "relu3_2": 13, "relu4_2": 22, "relu5_2": 31}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def vgg19_extractor(weights_path=None, taps: Optional[Sequence[str]] = None) -> FeatureExtractor:
    """VGG-19 feature stack tapped after the second conv (+ReLU) of each block.

    Weights come from a tensor archive whose entries are named like
    torchvision's ``features`` state dict (``0.weight``, ``0.bias``, ...).
    """
    from torchvision.models import vgg19

    from .archive import load_archive

    features = vgg19(weights=None).features
    if weights_path is not None:
        tensors, _, _ = load_archive(weights_path)
        tensors = {k.removeprefix("features."): v for k, v in tensors.items()}
        features.load_state_dict(tensors, strict=False)
        missing = [k for k in features.state_dict() if k not in tensors]
        if missing:
            raise ConfigError(f"VGG-19 archive {weights_path} is missing {missing[:3]}")
    names = list(taps) if taps else list(VGG19_TAPS)
    unknown = [n for n in names if n not in VGG19_TAPS]
    if unknown:
        raise ConfigError(f"unknown VGG-19 activations {unknown}")
    return FeatureExtractor(features, {n: VGG19_TAPS[n] for n in names}, IMAGENET_MEAN, IMAGENET_STD)


def tiny_extractor(seed: int = 0, width: int = 8) -> FeatureExtractor:
    """Small frozen random conv stack; stands in for VGG where no weights exist."""
    from .generator import init_weights

    layers = nn.Sequential(
        nn.Conv2d(3, width, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(width, width, 3, padding=1),
        nn.ReLU(),
        nn.AvgPool2d(2),
        nn.Conv2d(width, 2 * width, 3, padding=1),
        nn.ReLU(),
    )
    init_weights(layers, seed)
    with torch.no_grad():
        g = torch.Generator().manual_seed(seed + 1)
        for m in layers:
            if isinstance(m, nn.Conv2d):
                m.bias.uniform_(-0.1, 0.1, generator=g)
    return FeatureExtractor(layers, {"relu1": 1, "relu2": 3, "relu3": 6})


@dataclass
class ContentLossConfig:
    extractor: FeatureExtractor = field(default_factory=tiny_extractor)
    layers: Optional[Sequence[str]] = None
    norm: str = "l1"

    def __post_init__(self):
        self.norm = self.norm.lower()
        if self.norm not in ("l1", "l2sq"):
            raise ConfigError(f"content norm must be 'l1' or 'l2sq', got {self.norm!r}")
        self.extractor.freeze()
        if self.layers is not None:
            unknown = [n for n in self.layers if n not in self.extractor.taps]
            if unknown:
                raise ConfigError(f"extractor has no activations {unknown}")


def content_loss(cfg: ContentLossConfig, gt, pred) -> torch.Tensor:
    """Sum over selected activations of the per-element mean |diff| (or diff^2)."""
    gt, pred = as_tensor(gt), as_tensor(pred)
    _check_same_shape(gt, pred)
    ext = cfg.extractor
    if gt.dtype != next(iter(ext.state_dict().values()), gt).dtype:
        ext = ext.to(gt.dtype)
    with torch.no_grad():
        feats_gt = ext(gt)
    feats_pred = ext(pred)
    names = cfg.layers if cfg.layers is not None else list(feats_pred)
    total = pred.new_zeros(())
    for n in names:
        diff = feats_gt[n] - feats_pred[n]
        n_elem = diff.numel()
        if n_elem == 0:
            raise DimensionError(f"activation {n} is empty")
        d = diff.abs() if cfg.norm == "l1" else diff.pow(2)
        total = total + d.sum() / n_elem
    return total


# ------------------------------------------------------------ totals


def total_generator_loss(w: LossWeights, components) -> torch.Tensor:
    """Weighted sum of (adv, content, l2, ssim); zero-weight terms are skipped.

    ``components`` is a mapping keyed by term name or a 4-sequence in that order.
    """
    if not isinstance(components, dict):
        components = dict(zip(LossWeights.TERMS, components))
    total = None
    for name in LossWeights.TERMS:
        weight = getattr(w, name)
        if weight == 0:
            continue
        value = components[name]
        _check_finite(f"total_generator_loss[{name}]", value)
        term = weight * value
        total = term if total is None else total + term
    return total if total is not None else torch.zeros(())


def total_discriminator_loss(w: LossWeights, adv_disc) -> torch.Tensor:
    _check_finite("total_discriminator_loss", adv_disc)
    if w.disc == 0:
        return torch.zeros(())
    return w.disc * adv_disc


class GeneratorObjective:
    """Evaluates every active generator term for a batch."""

    def __init__(self, weights: LossWeights, content: Optional[ContentLossConfig] = None,
                 ssim_params: SSIMParams = SSIMParams()):
        self.weights = weights
        self.content = content if content is not None else ContentLossConfig()
        self.ssim_params = ssim_params

    def terms(self, disc, gt, pred) -> dict:
        w = self.weights
        out = {}
        if w.adv:
            logits = getattr(disc, "logits", None)
            out["adv"] = adv_gen_loss_logits(logits(pred)) if logits else adv_gen_loss(disc(pred))
        if w.content:
            out["content"] = content_loss(self.content, gt, pred)
        if w.l2:
            out["l2"] = l2_loss(gt, pred)
        if w.ssim:
            out["ssim"] = ssim_loss(gt, pred, self.ssim_params)
        return out

    def __call__(self, disc, gt, pred):
        terms = self.terms(disc, gt, pred)
        return total_generator_loss(self.weights, terms), terms
