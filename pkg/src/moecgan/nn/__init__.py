"""Layer zoo and optimiser built on :mod:`moecgan.tensor`."""

from .layers import (
    GELU,
    BatchNorm3d,
    Conv3d,
    ConvTranspose3d,
    InstanceNorm3d,
    LeakyReLU,
    Linear,
    Module,
    Parameter,
    ReLU,
    ResidualBlock,
    Sequential,
    Sigmoid,
    SpectralNorm,
    global_avg_pool,
    spectral_normalize,
    zero_parameters,
)
from .optim import Adam, MissingGradError

__all__ = [
    "Adam",
    "BatchNorm3d",
    "Conv3d",
    "ConvTranspose3d",
    "GELU",
    "InstanceNorm3d",
    "LeakyReLU",
    "Linear",
    "MissingGradError",
    "Module",
    "Parameter",
    "ReLU",
    "ResidualBlock",
    "Sequential",
    "Sigmoid",
    "SpectralNorm",
    "global_avg_pool",
    "spectral_normalize",
    "zero_parameters",
]
