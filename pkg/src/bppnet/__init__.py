"""Single-image dehazing with an iterative-UNet + pyramid-convolution GAN."""

from .discriminator import DiscriminatorConfig, build_discriminator, discriminator_forward
from .generator import (
    GeneratorConfig,
    UNetConfig,
    build_generator,
    dump_intermediates,
    generator_forward,
    iub_forward,
    param_count,
    pycon_forward,
)
from .image import ColorSpace, ImageTensor
from .losses import LossWeights, SSIMParams

__version__ = "0.1.0"
