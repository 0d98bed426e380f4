"""Latent canonicalization on numpy: renderer, networks, training and analysis."""

from . import analysis, autodiff, canonlearn, network, simgen
from .autodiff import Tensor
from .network import ArchConfig, ModelBundle, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["Tensor", "ArchConfig", "ModelBundle", "build_model", "load_checkpoint", "save_checkpoint",
           "analysis", "autodiff", "canonlearn", "network", "simgen"]
