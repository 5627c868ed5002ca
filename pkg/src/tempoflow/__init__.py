"""Temporally consistent frame generation by optimizing diffusion noise latents."""

from .consistency import (
    ConsistencyReport,
    LatentSequence,
    OptimConfig,
    expand_keyframes,
    keyframe_indices,
    objective,
    optimize,
    render,
    slerp,
)
from .diffusion import DiffusionSchedule, GeneratorSpec, ddim_denoise, make_schedule
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    NumericalError,
    TempoflowError,
)
from .flow import FlowField, OcclusionMask, ValidityMask, chain_warp, valid_mask, warp_nearest
from .scene import SceneSpec, Sprite, default_scene_spec, generate

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConsistencyReport", "ContractError", "DataError", "DiffusionSchedule",
    "FlowField", "FormatError", "GeneratorSpec", "LatentSequence", "NumericalError",
    "OcclusionMask", "OptimConfig", "SceneSpec", "Sprite", "TempoflowError", "ValidityMask",
    "chain_warp", "ddim_denoise", "default_scene_spec", "expand_keyframes", "generate",
    "keyframe_indices", "make_schedule", "objective", "optimize", "render", "slerp",
    "valid_mask", "warp_nearest",
]
