import pytest
import torch

from bppnet.generator import GeneratorConfig, UNetConfig
from bppnet.hazesynth import generate_pairs


def small_generator_config(**kw) -> GeneratorConfig:
    base = dict(unet=UNetConfig(depth=2, base_channels=4), pycon_channels_per_kernel=2)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(max(1, torch.get_num_threads()))
    yield


@pytest.fixture(scope="session")
def syn_pairs(tmp_path_factory):
    """Four seeded 64x64 synthetic pairs in the hazy/ + GT/ layout."""
    root = tmp_path_factory.mktemp("syn4")
    generate_pairs(4, 64, "homogeneous", seed=7, out_dir=root)
    return root


RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
