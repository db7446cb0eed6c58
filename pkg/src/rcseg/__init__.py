"""Particle-based region competition segmentation for 2-D and 3-D rasters."""

__version__ = "0.1.0"

from .energy import EnergyConfig, EnergyValue, evaluate_total
from .grid import Connectivity
from .optimizer import (OptimizerConfig, RegionCompetition, RunResult,
                        initialize, run)
from .sobolev import SobolevParams, kernel_eval
from .synth import SceneSpec, NoiseSpec, desk_scene, generate, two_blob_scene, two_sphere_scene

__all__ = [
    "Connectivity", "EnergyConfig", "EnergyValue", "evaluate_total",
    "OptimizerConfig", "RegionCompetition", "RunResult", "initialize", "run",
    "SobolevParams", "kernel_eval",
    "SceneSpec", "NoiseSpec", "desk_scene", "generate", "two_blob_scene",
    "two_sphere_scene",
    "__version__",
]
