import pytest
import torch

from bppnet.discriminator import (
    DEFAULT_LAYERS,
    DiscriminatorConfig,
    build_discriminator,
    conv_out_size,
    discriminator_forward,
    output_size,
    receptive_field,
)
from bppnet.errors import ConfigError, DimensionError


def test_default_ladder_by_formula():
    sizes = [512]
    for _, _, k, s, p in DEFAULT_LAYERS:
        sizes.append((sizes[-1] + 2 * p - k) // s + 1)
    assert sizes == [512, 255, 126, 63, 62]
    assert output_size(DEFAULT_LAYERS, 512) == 62


def test_receptive_field_and_stride():
    # 1 + 3*1 + 3*2 + 3*4 + 3*8
    assert receptive_field(DEFAULT_LAYERS) == (46, 8)


def test_small_input_map_and_range():
    d = build_discriminator()
    y = discriminator_forward(d, torch.rand(2, 3, 64, 64))
    n = output_size(DEFAULT_LAYERS, 64)
    assert y.shape == (2, 1, n, n)
    assert (y > 0).all() and (y < 1).all()


def test_conv_out_size():
    assert conv_out_size(64, 4, 2, 0) == 31
    assert conv_out_size(7, 4, 1, 1) == 6


def test_too_small_input():
    d = build_discriminator()
    with pytest.raises(DimensionError):
        d(torch.rand(1, 3, 16, 16))
    with pytest.raises(DimensionError):
        d(torch.rand(1, 4, 64, 64))


@pytest.mark.parametrize(
    "layers",
    [
        ((3, 8, 3, 2, 0), (8, 1, 4, 1, 1)),  # non-4x4 kernel
        ((3, 8, 4, 2, 0), (4, 1, 4, 1, 1)),  # channel mismatch
        ((3, 8, 4, 2, 0), (8, 2, 4, 1, 1)),  # not single-channel output
        ((3, 1, 4, 4, 0),),  # stride equals kernel: no overlap
    ],
)
def test_invalid_configs(layers):
    with pytest.raises(ConfigError):
        build_discriminator(DiscriminatorConfig(layers=layers))


def test_patch_locality():
    # changing a pixel only affects patches whose receptive field contains it
    d = build_discriminator(DiscriminatorConfig(seed=3)).double()
    x = torch.rand(1, 3, 96, 96, dtype=torch.float64)
    y0 = d(x)
    x2 = x.clone()
    x2[..., 0, 0] += 1.0
    changed = (d(x2) - y0).abs()[0, 0] > 0
    rows, cols = torch.nonzero(changed, as_tuple=True)
    assert changed[0, 0]
    # receptive field 46 with stride 8: pixel (0,0) reaches at most patch index (46 / 8)
    assert rows.max() <= 46 // 8 and cols.max() <= 46 // 8


def test_config_round_trip():
    cfg = DiscriminatorConfig(seed=4)
    assert DiscriminatorConfig.from_dict(cfg.to_dict()) == cfg
