from .dataset import (DspriteDataset, ExternalDataset, ImageDataset, SceneDataset, generate_dataset,
                      read_dataset, write_dataset)
from .dsprites import DspriteParams, DspriteRanges, render_dsprite, sample_dsprite
from .factors import (DEFAULT_SHIFT, GENERATOR_VERSION, SUPERVISED, FactorRanges, SceneParams,
                      estimate_factor_space, sample_scene, shifted_domain)
from .render import canonical_target, render_scene

__all__ = [
    "FactorRanges", "SceneParams", "SUPERVISED", "GENERATOR_VERSION", "DEFAULT_SHIFT",
    "sample_scene", "shifted_domain", "estimate_factor_space", "render_scene", "canonical_target",
    "DspriteParams", "DspriteRanges", "render_dsprite", "sample_dsprite",
    "ImageDataset", "SceneDataset", "DspriteDataset", "ExternalDataset",
    "generate_dataset", "read_dataset", "write_dataset",
]
