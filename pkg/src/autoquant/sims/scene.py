"""Scene configuration files (JSON) and the built-in desk-scale scenes."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .analytic import FreeFall, Identity
from .base import EVAL_KINDS, Simulator
from .mpm import MPM2D, Block, Material


@dataclass
class Scene:
    sim: Simulator
    steps: int
    eval_kind: str
    quantized: list[str] | None
    seed: int
    raw: dict


def desk_mpm_scene() -> dict[str, Any]:
    """Four 16x16 elastic squares colliding: 1024 particles on a 64^2 grid."""
    return {
        "simulator": "mpm",
        "grid_res": 64,
        "dt": 2e-4,
        "steps": 512,
        "gravity": [0.0, -9.8],
        "material": {"youngs_modulus": 1000.0, "poisson_ratio": 0.2, "density": 1.0},
        "blocks": [
            {"lower": [0.15, 0.45], "size": [0.125, 0.125], "n": [16, 16], "velocity": [2.0, 0.0]},
            {"lower": [0.55, 0.47], "size": [0.125, 0.125], "n": [16, 16], "velocity": [-1.5, 0.5]},
            {"lower": [0.30, 0.12], "size": [0.125, 0.125], "n": [16, 16], "velocity": [0.0, -2.0]},
            {"lower": [0.65, 0.15], "size": [0.125, 0.125], "n": [16, 16], "velocity": [-1.0, -1.5]},
        ],
        "eval": "final_kinetic_energy",
        "seed": 0,
    }


def freefall_scene() -> dict[str, Any]:
    return {"simulator": "freefall", "x0": 0.0, "v0": 0.0, "gravity": -10.0, "dt": 0.01, "steps": 100,
            "eval": "final_kinetic_energy", "seed": 0}


def build_sim(cfg: dict[str, Any]) -> Simulator:
    kind = cfg.get("simulator")
    if kind == "freefall":
        return FreeFall(
            x0=cfg.get("x0", 0.0), v0=cfg.get("v0", 0.0), gravity=cfg.get("gravity", -10.0),
            dt=cfg.get("dt", 0.01), stiffness=cfg.get("stiffness", 0.0), mass=cfg.get("mass", 1.0),
            count=cfg.get("count", 1),
        )
    if kind == "identity":
        return Identity(cfg["counts"], cfg.get("value", 1.0))
    if kind == "mpm":
        blocks = [
            Block(tuple(b["lower"]), tuple(b["size"]), tuple(b["n"]), tuple(b.get("velocity", (0.0, 0.0))))
            for b in cfg["blocks"]
        ]
        return MPM2D(
            blocks, grid_res=cfg.get("grid_res", 64), dt=cfg.get("dt", 2e-4),
            material=Material(**cfg.get("material", {})), gravity=tuple(cfg.get("gravity", (0.0, -9.8))),
            boundary=cfg.get("boundary", True), jitter=cfg.get("jitter", 0.0), seed=cfg.get("seed", 0),
        )
    raise ValueError(f"unknown simulator {kind!r}")


def scene_from_dict(cfg: dict[str, Any]) -> Scene:
    steps = int(cfg.get("steps", 0))
    if steps < 0:
        raise ValueError("steps must be non-negative")
    kind = cfg.get("eval", "final_kinetic_energy")
    if kind not in EVAL_KINDS:
        raise ValueError(f"unknown evaluation kind {kind!r}")
    return Scene(build_sim(cfg), steps, kind, cfg.get("quantized"), int(cfg.get("seed", 0)), cfg)


def load_scene(path: str | Path) -> Scene:
    with open(path) as fh:
        return scene_from_dict(json.load(fh))
