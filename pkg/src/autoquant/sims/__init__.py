from .analytic import FreeFall, Identity
from .base import EVAL_KINDS, EvalFunction, QuantityDescriptor, SimulationError, Simulator
from .mpm import MPM2D, Block, Material
from .runner import QuantizedStore, RunResult, run
from .scene import Scene, desk_mpm_scene, freefall_scene, load_scene, scene_from_dict

__all__ = [
    "EVAL_KINDS", "Block", "EvalFunction", "FreeFall", "Identity", "MPM2D", "Material",
    "QuantityDescriptor", "QuantizedStore", "RunResult", "Scene", "SimulationError", "Simulator",
    "desk_mpm_scene", "freefall_scene", "load_scene", "run", "scene_from_dict",
]
