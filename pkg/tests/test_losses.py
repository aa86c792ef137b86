import math

import numpy as np
import pytest
import torch

from bppnet.discriminator import DiscriminatorConfig, build_discriminator
from bppnet.errors import ConfigError, DimensionError
from bppnet.losses import (
    ContentLossConfig,
    GeneratorObjective,
    LossWeights,
    SSIMParams,
    adv_disc_loss,
    adv_disc_loss_logits,
    adv_gen_loss,
    adv_gen_loss_logits,
    content_loss,
    gaussian_window,
    l2_loss,
    ssim,
    ssim_loss,
    tiny_extractor,
    total_discriminator_loss,
    total_generator_loss,
)

from oracles import grad_rel_error, ssim_bruteforce

SMALL_DISC = DiscriminatorConfig(layers=((3, 4, 4, 2, 1), (4, 1, 4, 1, 1)), seed=2)


def test_ssim_matches_bruteforce():
    rng = np.random.default_rng(0)
    x, y = rng.random((3, 24, 24)), rng.random((3, 24, 24))
    got = float(ssim(torch.from_numpy(x)[None], torch.from_numpy(y)[None]))
    assert abs(got - ssim_bruteforce(x, y)) <= 1e-10


def test_ssim_identity_and_symmetry():
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    y = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    assert float(ssim(x, x)) == pytest.approx(1.0, abs=1e-12)
    assert float(ssim(x, y)) == pytest.approx(float(ssim(y, x)), abs=1e-14)


def test_ssim_constant_images_closed_form():
    # black vs white: means 0 and 1, no variance -> C1 / (1 + C1)
    a = torch.zeros(1, 1, 11, 11, dtype=torch.float64)
    b = torch.ones(1, 1, 11, 11, dtype=torch.float64)
    c1 = 0.01**2
    assert float(ssim(a, b)) == pytest.approx(c1 / (1 + c1), rel=1e-12)


def test_ssim_window_too_large():
    with pytest.raises(DimensionError):
        ssim(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8))
    assert float(ssim(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8), SSIMParams(window_size=7))) <= 1
    with pytest.raises(ConfigError):
        SSIMParams(window_size=6)


def test_gaussian_window_normalised():
    w = gaussian_window(11, 1.5)
    assert float(w.sum()) == pytest.approx(1.0, abs=1e-15)
    assert torch.equal(w, w.T)


def test_adversarial_half_maps():
    half = torch.full((1, 1, 6, 6), 0.5, dtype=torch.float64)
    assert abs(float(adv_gen_loss(half)) - math.log(2)) <= 1e-12
    assert abs(float(adv_disc_loss(half, half)) - 2 * math.log(2)) <= 1e-12


def test_adversarial_extremes_are_finite():
    ones, zeros = torch.ones(1, 1, 2, 2), torch.zeros(1, 1, 2, 2)
    assert math.isfinite(float(adv_gen_loss(zeros)))
    assert math.isfinite(float(adv_disc_loss(zeros, ones)))
    # a perfect discriminator has near-zero loss
    assert float(adv_disc_loss(ones, zeros)) < 1e-5


def test_nonfinite_inputs_rejected():
    bad = torch.tensor([[[[float("nan")]]]])
    with pytest.raises(ValueError):
        adv_gen_loss(bad)
    with pytest.raises(ValueError):
        total_generator_loss(LossWeights(), [torch.tensor(float("inf"))] + [torch.tensor(1.0)] * 3)


def test_l2_value():
    a = torch.zeros(1, 3, 2, 2)
    b = torch.full((1, 3, 2, 2), 0.5)
    assert float(l2_loss(a, b)) == 0.25
    with pytest.raises(DimensionError):
        l2_loss(a, torch.zeros(1, 3, 2, 3))


def test_weighted_sum_exact():
    ones = [torch.tensor(1.0, dtype=torch.float64)] * 4
    assert float(total_generator_loss(LossWeights(), ones)) == 3.2
    assert float(total_generator_loss(LossWeights().dropping("ssim"), ones)) == 0.7 + 0.5 + 1.0


def test_dropping_names():
    w = LossWeights()
    assert w.dropping("con").content == 0 and w.dropping("adv").adv == 0
    assert w.dropping(None) == w
    with pytest.raises(ConfigError):
        w.dropping("gan")


def test_discriminator_weight():
    assert float(total_discriminator_loss(LossWeights(disc=0.5), torch.tensor(2.0))) == 1.0


def test_content_loss_zero_on_equal_and_positive_otherwise():
    cfg = ContentLossConfig(tiny_extractor(seed=1))
    x = torch.rand(1, 3, 16, 16)
    assert float(content_loss(cfg, x, x)) == 0.0
    assert float(content_loss(cfg, x, torch.rand(1, 3, 16, 16))) > 0


def test_content_extractor_is_frozen():
    cfg = ContentLossConfig(tiny_extractor())
    x = torch.rand(1, 3, 16, 16, requires_grad=True)
    content_loss(cfg, torch.rand(1, 3, 16, 16), x).backward()
    assert x.grad is not None
    assert all(p.grad is None and not p.requires_grad for p in cfg.extractor.parameters())
    cfg.extractor.train()
    assert not cfg.extractor.training


def test_content_layer_selection():
    ext = tiny_extractor()
    with pytest.raises(ConfigError):
        ContentLossConfig(ext, layers=["relu9"])
    a, b = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    full = content_loss(ContentLossConfig(ext), a, b)
    parts = sum(content_loss(ContentLossConfig(ext, layers=[n]), a, b) for n in ext.taps)
    assert float(full) == pytest.approx(float(parts), rel=1e-6)


@pytest.fixture
def pair64():
    g = torch.Generator().manual_seed(11)
    gt = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    pred = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    return gt, pred


def test_gradcheck_l2(pair64):
    gt, pred = pair64
    assert grad_rel_error(lambda p: l2_loss(gt, p), pred) <= 1e-3


def test_gradcheck_ssim(pair64):
    gt, pred = pair64
    params = SSIMParams(window_size=7)
    assert grad_rel_error(lambda p: ssim_loss(gt, p, params), pred) <= 1e-3


def test_gradcheck_content(pair64):
    gt, pred = pair64
    cfg = ContentLossConfig(tiny_extractor(seed=0).double())
    assert grad_rel_error(lambda p: content_loss(cfg, gt, p), pred) <= 1e-3


def test_gradcheck_total(pair64):
    gt, pred = pair64
    disc = build_discriminator(SMALL_DISC).double()
    obj = GeneratorObjective(LossWeights(), ContentLossConfig(tiny_extractor().double()), SSIMParams(window_size=7))
    assert grad_rel_error(lambda p: obj(disc, gt, p)[0], pred) <= 1e-3


def test_objective_skips_dropped_terms():
    disc = build_discriminator(SMALL_DISC)
    obj = GeneratorObjective(LossWeights().dropping("adv"), ContentLossConfig(tiny_extractor()), SSIMParams(window_size=7))
    total, terms = obj(disc, torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8))
    assert set(terms) == {"content", "l2", "ssim"}
    expected = 0.5 * terms["content"] + terms["l2"] + terms["ssim"]
    assert float(total) == pytest.approx(float(expected), rel=1e-6)


def test_logit_losses_match_probability_losses():
    z = torch.linspace(-6, 6, 25, dtype=torch.float64).view(1, 1, 5, 5)
    p = torch.sigmoid(z)
    assert float(adv_gen_loss_logits(z)) == pytest.approx(float(adv_gen_loss(p)), rel=1e-9)
    assert float(adv_disc_loss_logits(z, z.flip(-1))) == pytest.approx(float(adv_disc_loss(p, p.flip(-1))), rel=1e-9)
    zero = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    assert abs(float(adv_disc_loss_logits(zero, zero)) - 2 * math.log(2)) <= 1e-12


def test_logit_losses_keep_gradient_when_saturated():
    # sigmoid(40) is exactly 1.0 in float32; the clamped probability loss is flat there
    z = torch.full((1, 1, 2, 2), 40.0, requires_grad=True)
    adv_disc_loss_logits(torch.zeros(1, 1, 2, 2), z).backward()
    assert z.grad.abs().min() > 0
    z2 = torch.full((1, 1, 2, 2), 40.0, requires_grad=True)
    adv_disc_loss(torch.full((1, 1, 2, 2), 0.5), torch.sigmoid(z2)).backward()
    assert float(z2.grad.abs().max()) == 0.0
