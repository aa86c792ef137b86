import math

import pytest
import torch
import torch.nn.functional as F

from bppnet.errors import ConfigError, DimensionError
from bppnet.generator import (
    GeneratorConfig,
    PyramidConv,
    UNet,
    UNetConfig,
    build_generator,
    dump_intermediates,
    generator_forward,
    iub_forward,
    param_count,
    pycon_forward,
)
from bppnet.image import ColorSpace, ImageTensor

from conftest import small_generator_config

# Frozen regression value for the default architecture (4 UNets of depth 4 /
# 64 base channels, 8 pyramid kernels x 16 channels, 3x3 head).
DEFAULT_PARAM_COUNT = 124_975_887


def test_default_param_count():
    assert param_count(build_generator()) == DEFAULT_PARAM_COUNT


def test_unet_param_count_by_hand():
    cfg = UNetConfig(depth=1, base_channels=2)
    conv = lambda cin, cout, k: cin * cout * k * k + cout
    expected = (
        conv(3, 2, 3) + conv(2, 2, 3)  # encoder
        + conv(2, 4, 3) + conv(4, 4, 3)  # bottleneck
        + 4 * 2 * 2 * 2 + 2  # transpose conv
        + conv(4, 2, 3) + conv(2, 2, 3)  # decoder after skip concat
        + conv(2, 3, 3)  # head
    )
    assert param_count(UNet(cfg)) == expected


@pytest.mark.parametrize("size", [16, 32, 48])
def test_shapes_small(size):
    g = build_generator(small_generator_config())
    x = torch.rand(2, 3, size, size)
    concat, parts = iub_forward(g, x)
    assert concat.shape == (2, 12, size, size)
    assert len(parts) == 4 and all(p.shape == (2, 3, size, size) for p in parts)
    feat = pycon_forward(g, concat)
    assert feat.shape == (2, 16, size, size)
    assert g(x).shape == x.shape


def test_composition_is_bit_identical():
    g = build_generator(small_generator_config(seed=3)).eval()
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        concat, parts = iub_forward(g, x)
        assert torch.equal(concat, torch.cat(parts, 1))
        y = pycon_forward(g, concat)
        direct = g(x)
        assert torch.equal(g.final(y), direct)
        # unit i consumes unit i-1's output
        assert torch.equal(g.unets[1](parts[0]), parts[1])


@pytest.mark.parametrize("k", [3, 11, 13, 25, 45])
def test_pyramid_branch_matches_direct_conv(k):
    torch.manual_seed(k)
    pc = PyramidConv(3, (k,), 2).double()
    x = torch.randn(1, 3, 20, 24, dtype=torch.float64)
    w, b = pc.branches[0].weight, pc.branches[0].bias
    with torch.no_grad():
        b.normal_()
        ref = F.conv2d(x, w, b, padding=k // 2)
        out = pc(x)
    assert torch.allclose(out, ref, atol=1e-10)


def test_pyramid_impulse_response_is_centred():
    # A centred delta kernel must reproduce the input exactly (zero padding, no shift).
    for k in (3, 25):
        pc = PyramidConv(1, (k,), 1).double()
        with torch.no_grad():
            pc.branches[0].weight.zero_()
            pc.branches[0].weight[0, 0, k // 2, k // 2] = 1.0
            pc.branches[0].bias.zero_()
            x = torch.randn(1, 1, 17, 19, dtype=torch.float64)
            assert torch.allclose(pc(x), x, atol=1e-10)


def test_pyramid_zero_padding_at_borders():
    # all-ones kernel on an all-ones image counts the in-bounds taps
    k = 5
    pc = PyramidConv(1, (k,), 1).double()
    with torch.no_grad():
        pc.branches[0].weight.fill_(1.0)
        pc.branches[0].bias.zero_()
        y = pc(torch.ones(1, 1, 8, 8, dtype=torch.float64))
    assert y[0, 0, 0, 0] == 9 and y[0, 0, 4, 4] == 25 and y[0, 0, 0, 4] == 15


def test_gradients_reach_every_parameter():
    g = build_generator(small_generator_config())
    x = torch.rand(1, 3, 16, 16)
    g(x).square().mean().backward()
    for name, p in g.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name
        assert p.grad.abs().sum() > 0, name


def test_unet_count_changes_concat_width():
    for m in (1, 2, 5):
        g = build_generator(small_generator_config(num_unets=m))
        concat, _ = iub_forward(g, torch.rand(1, 3, 16, 16))
        assert concat.shape[1] == 3 * m


def test_without_pycon():
    g = build_generator(small_generator_config(use_pycon=False))
    assert g.pycon is None
    assert g(torch.rand(1, 3, 16, 16)).shape == (1, 3, 16, 16)
    with pytest.raises(ConfigError):
        pycon_forward(g, torch.rand(1, 12, 16, 16))


def test_config_errors():
    with pytest.raises(ConfigError):
        build_generator(small_generator_config(num_unets=0))
    with pytest.raises(ConfigError):
        build_generator(small_generator_config(pycon_kernels=(3, 4)))
    with pytest.raises(ConfigError):
        GeneratorConfig(pycon_total_channels=100, pycon_channels_per_kernel=None).per_kernel
    assert GeneratorConfig(pycon_total_channels=128, pycon_channels_per_kernel=None).per_kernel == 16


def test_dimension_errors():
    g = build_generator(small_generator_config())
    with pytest.raises(DimensionError):
        g(torch.rand(1, 3, 18, 18))  # not divisible by 4
    with pytest.raises(DimensionError):
        g(torch.rand(1, 1, 16, 16))
    with pytest.raises(DimensionError):
        pycon_forward(g, torch.rand(1, 9, 16, 16))


def test_seeded_init_is_reproducible():
    a = build_generator(small_generator_config(seed=5))
    b = build_generator(small_generator_config(seed=5))
    c = build_generator(small_generator_config(seed=6))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)


def test_generator_forward_clamps_in_eval_and_keeps_colorspace():
    g = build_generator(small_generator_config())
    with torch.no_grad():
        g.final.bias.fill_(5.0)
    x = ImageTensor(torch.rand(1, 3, 16, 16), ColorSpace.YCBCR)
    g.train()
    assert generator_forward(g, x).data.max() > 1
    g.eval()
    y = generator_forward(g, x)
    assert y.colorspace == ColorSpace.YCBCR and y.data.max() <= 1


def test_dump_intermediates_keys_and_stats():
    g = build_generator(small_generator_config())
    d = dump_intermediates(g, torch.rand(1, 3, 16, 16))
    assert [k for k in d if k.startswith("unet_")] == ["unet_1", "unet_2", "unet_3", "unet_4"]
    assert len([k for k in d if k.startswith("pycon_branch_")]) == 8
    t = d["unet_2"]["tensor"][0]
    assert torch.allclose(torch.tensor(d["unet_2"]["std"]), t.double().reshape(3, -1).std(1, unbiased=False))
    counts, edges = d["unet_2"]["histograms"][0]
    assert counts.sum() == 16 * 16 and len(edges) == 65


def test_config_round_trip():
    cfg = small_generator_config(num_unets=3, seed=9)
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
