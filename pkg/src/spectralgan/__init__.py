"""Spectral normalization for GAN discriminators: estimators, bounds and training."""

from .gan import TrainConfig, discriminator_loss, generator_loss, train
from .nn import Activation, Layer, Network, backward, build_network, forward
from .specnorm import (CONVERGE, PERSISTENT, IterMode, NormMode, SigmaReport,
                       apply_normalization, conv_sigma, kernel_sigma, sigma_report)
from .tensor import conv2d, explicit_conv_matrix, power_iteration

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "CONVERGE",
    "IterMode",
    "Layer",
    "Network",
    "NormMode",
    "PERSISTENT",
    "SigmaReport",
    "TrainConfig",
    "apply_normalization",
    "backward",
    "build_network",
    "conv2d",
    "conv_sigma",
    "discriminator_loss",
    "explicit_conv_matrix",
    "forward",
    "generator_loss",
    "kernel_sigma",
    "power_iteration",
    "sigma_report",
    "train",
]
