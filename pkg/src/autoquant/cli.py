"""Command-line driver: reference run, gradient capture, solve, validation.

Every command reads a JSON project config and writes its artifacts into the
output directory.  Artifacts carry ``config_hash``, the SHA-256 of the
canonical config JSON; a later stage refuses inputs made from another config.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .adjoint import ReplayMismatch, backprop_checkpointed, backprop_full
from .bitpack import PackedBuffer, bit_struct_words, plan_layout
from .quantizer import (
    InfeasibleBudget,
    QuantityInfo,
    QuantScheme,
    SolverRequest,
    optimality_probe,
    perturbations,
    solve,
    validate,
)
from .qtypes import QuantSpec
from .sims import EvalFunction, Scene, SimulationError, run, scene_from_dict

log = logging.getLogger("autoquant")

OUT_ENV = "AUTOQUANT_OUT"

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_INFEASIBLE = 2
EXIT_THRESHOLD = 3

REFERENCE_FILE = "reference.json"
STATE_FILE = "reference_state.bin"
GRADIENT_FILE = "gradients.json"
SCHEME_FILE = "scheme.json"
VALIDATION_FILE = "validation.csv"
SUMMARY_FILE = "validation_summary.json"
PROBE_FILE = "probe.csv"
PACK_FILE = "pack_bench.json"


class CliError(Exception):
    """Invalid input; maps to exit code 1."""


@dataclass
class ProjectConfig:
    scene: dict[str, Any]
    mode: str = "error_bounded"
    tolerance: float = 0.1
    seeds: list[int] = field(default_factory=list)
    trials: int = 20
    output_dir: Path = Path("out")
    checkpointing: str = "bisection"
    dither: bool = True
    success_threshold: float = 0.8
    reference_bits: int = 32
    safety_factor: float = 2.0
    word_bits: int = 64
    probe_ks: list[int] = field(default_factory=lambda: [1, 2, 3])
    config_hash: str = ""

    def trial_seeds(self) -> list[int]:
        if self.seeds:
            return list(self.seeds)[: self.trials]
        return list(range(self.trials))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(raw: dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(raw).encode("utf-8")).hexdigest()


def load_config(path: str | os.PathLike, overrides: argparse.Namespace | None = None) -> ProjectConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise CliError("config must be a JSON object")

    scene = raw.get("scene")
    if isinstance(scene, str):
        scene_path = path.parent / scene
        if not scene_path.is_file():
            raise CliError(f"scene file {scene_path} not found")
        try:
            scene_raw = json.loads(scene_path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"scene file {scene_path} is not valid JSON: {exc}") from None
    elif isinstance(scene, dict):
        scene_raw = scene
    else:
        raise CliError("config needs a 'scene' (file path or inline object)")
    # the hash covers the resolved scene so edits to a referenced file are caught
    hashed = dict(raw, scene=scene_raw)

    out = Path(raw.get("output_dir", "out"))
    root = os.environ.get(OUT_ENV)
    if not out.is_absolute():
        out = (Path(root) if root else path.parent) / out

    cfg = ProjectConfig(
        scene=scene_raw,
        mode=raw.get("mode", "error_bounded"),
        tolerance=float(raw.get("tolerance", 0.1)),
        seeds=[int(s) for s in raw.get("seeds", [])],
        trials=int(raw.get("trials", 20)),
        output_dir=out,
        checkpointing=raw.get("checkpointing", "bisection"),
        dither=bool(raw.get("dither", True)),
        success_threshold=float(raw.get("success_threshold", 0.8)),
        reference_bits=int(raw.get("reference_bits", 32)),
        safety_factor=float(raw.get("safety_factor", 2.0)),
        word_bits=int(raw.get("word_bits", 64)),
        probe_ks=[int(k) for k in raw.get("probe_ks", [1, 2, 3])],
        config_hash=config_hash(hashed),
    )
    if overrides is not None:
        if overrides.mode is not None:
            cfg.mode = overrides.mode
        if overrides.trials is not None:
            cfg.trials = overrides.trials
        if overrides.seed is not None:
            cfg.seeds = list(range(overrides.seed, overrides.seed + cfg.trials))
        if overrides.no_dither:
            cfg.dither = False
        if overrides.checkpointing is not None:
            cfg.checkpointing = overrides.checkpointing
    _check_config(cfg)
    return cfg


def _check_config(cfg: ProjectConfig) -> None:
    if cfg.mode not in ("error_bounded", "memory_bounded"):
        raise CliError(f"unknown mode {cfg.mode!r}")
    if not cfg.tolerance > 0:
        raise CliError("tolerance must be positive")
    if cfg.mode == "memory_bounded" and not cfg.tolerance < 1:
        raise CliError("memory-bounded tolerance is a compression rate in (0, 1)")
    if cfg.trials < 1:
        raise CliError("trial count must be >= 1")
    if cfg.checkpointing not in ("full", "bisection"):
        raise CliError(f"unknown checkpointing mode {cfg.checkpointing!r}")
    if not 0 <= cfg.success_threshold <= 1:
        raise CliError("success_threshold must lie in [0, 1]")
    if cfg.safety_factor < 1:
        raise CliError("safety_factor must be >= 1")


# -- artifact io ----------------------------------------------------------


def _write_json(path: Path, obj: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _read_artifact(cfg: ProjectConfig, name: str) -> dict[str, Any]:
    path = cfg.output_dir / name
    if not path.is_file():
        raise CliError(f"missing artifact {path}; run the earlier pipeline stage first")
    data = json.loads(path.read_text())
    if data.get("config_hash") != cfg.config_hash:
        raise CliError(
            f"{path} was produced from config {data.get('config_hash', '?')[:12]}, "
            f"current config is {cfg.config_hash[:12]}"
        )
    return data


def _scene(cfg: ProjectConfig) -> Scene:
    try:
        return scene_from_dict(cfg.scene)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid scene: {exc}") from None


def _quantized_names(scene: Scene) -> list[str]:
    names = list(scene.sim.quantity_names)
    if scene.quantized is None:
        return names
    unknown = [k for k in scene.quantized if k not in names]
    if unknown:
        raise CliError(f"scene quantizes unknown quantities {unknown}")
    return list(scene.quantized)


def _finite_or_none(x):
    return x if x is not None and math.isfinite(x) else None


def scheme_from_artifact(data: dict[str, Any]) -> QuantScheme:
    q = data["quantities"]
    specs = {k: QuantSpec(v["fraction_bits"], v["range"]) for k, v in q.items()}
    return QuantScheme(
        specs,
        {k: int(v["element_count"]) for k, v in q.items()},
        {k: float(v["g"]) for k, v in q.items()},
        data["mode"],
        float(data["tolerance"]),
        int(data["reference_bits"]),
    )


# -- commands -------------------------------------------------------------


def cmd_reference(cfg: ProjectConfig) -> int:
    scene = _scene(cfg)
    sim = scene.sim
    result = run(sim, scene.steps, EvalFunction(scene.eval_kind, sim), safety_factor=cfg.safety_factor)
    if result.failed:
        raise CliError(f"reference run failed: {'; '.join(result.warnings) or 'non-finite z'}")
    state = result.final_state
    _write_json(cfg.output_dir / REFERENCE_FILE, {
        "config_hash": cfg.config_hash,
        "eval": scene.eval_kind,
        "steps": scene.steps,
        "z": result.z,
        "safety_factor": cfg.safety_factor,
        "quantities": {
            k: {"element_count": int(state[k].size), "max_abs": result.ranges[k].max_abs,
                "range": result.ranges[k].range}
            for k in sim.quantity_names
        },
        "state_file": STATE_FILE,
    })
    # final state as little-endian float64, quantities in declaration order
    with open(cfg.output_dir / STATE_FILE, "wb") as fh:
        for k in sim.quantity_names:
            fh.write(np.ascontiguousarray(state[k], dtype="<f8").tobytes())
    print(f"z_ref = {result.z!r}")
    return EXIT_OK


def cmd_gradients(cfg: ProjectConfig) -> int:
    ref = _read_artifact(cfg, REFERENCE_FILE)
    scene = _scene(cfg)
    sim = scene.sim
    ev = EvalFunction(scene.eval_kind, sim)
    s0 = sim.initial_state()
    if cfg.checkpointing == "full":
        z, tally = backprop_full(sim, s0, scene.steps, ev)
    else:
        try:
            z, tally = backprop_checkpointed(sim, s0, scene.steps, ev, verify=True)
        except ReplayMismatch as exc:
            raise CliError(f"checkpoint replay diverged: {exc}") from None
    if z != ref["z"]:
        raise CliError(f"gradient pass reproduced z={z!r}, reference has {ref['z']!r}")
    _write_json(cfg.output_dir / GRADIENT_FILE, {
        "config_hash": cfg.config_hash,
        "z": z,
        "g": {k: tally.g[k] for k in sim.quantity_names},
    })
    # schedule statistics differ between modes; keep them out of the tally file
    print(f"checkpointing={cfg.checkpointing} forward_steps={tally.forward_steps} "
          f"peak_resident={tally.peak_resident}")
    return EXIT_OK


def cmd_solve(cfg: ProjectConfig) -> int:
    ref = _read_artifact(cfg, REFERENCE_FILE)
    grads = _read_artifact(cfg, GRADIENT_FILE)
    scene = _scene(cfg)
    names = _quantized_names(scene)
    infos = [
        QuantityInfo(k, ref["quantities"][k]["element_count"], ref["quantities"][k]["range"], grads["g"][k])
        for k in names
    ]
    try:
        req = SolverRequest(cfg.mode, cfg.tolerance, ref["z"], infos, reference_bits=cfg.reference_bits)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    scheme = solve(req)  # InfeasibleBudget propagates to exit code 2
    _write_json(cfg.output_dir / SCHEME_FILE, {
        "config_hash": cfg.config_hash,
        "mode": scheme.mode,
        "tolerance": scheme.tolerance,
        "z_ref": ref["z"],
        "seed": scene.seed,
        "safety_factor": ref["safety_factor"],
        "reference_bits": scheme.reference_bits,
        "sigma_pred": scheme.sigma_pred,
        "compression_rate": scheme.compression_rate,
        "physical_bits": scheme.physical_bits,
        "quantities": {
            k: {
                "fraction_bits": s.fraction_bits,
                "range": s.range,
                "element_count": scheme.counts[k],
                "g": scheme.tallies[k],
                "continuous_bits": _finite_or_none(scheme.continuous_bits.get(k)),
            }
            for k, s in scheme.specs.items()
        },
        "warnings": scheme.warnings,
    })
    print(" ".join(f"{k}={b}" for k, b in scheme.bits().items()))
    print(f"sigma_pred={scheme.sigma_pred:.6g} compression={scheme.compression_rate:.4f}")
    return EXIT_OK


def _trial_runner(cfg: ProjectConfig, scene: Scene):
    sim = scene.sim
    ev = EvalFunction(scene.eval_kind, sim)
    names = _quantized_names(scene)

    def trial_for(scheme: QuantScheme, seed: int):
        return run(sim, scene.steps, ev, scheme, seed=seed, dither=cfg.dither, quantized=names,
                   safety_factor=cfg.safety_factor, word_bits=cfg.word_bits)

    return trial_for


def _success_tolerance(scheme: QuantScheme, z_ref: float) -> float:
    # memory-bounded schemes have no error target; judge them against sigma_pred
    if scheme.mode == "error_bounded":
        return scheme.tolerance
    return scheme.sigma_pred / abs(z_ref) if z_ref else math.inf


def cmd_validate(cfg: ProjectConfig) -> int:
    data = _read_artifact(cfg, SCHEME_FILE)
    scheme = scheme_from_artifact(data)
    scene = _scene(cfg)
    trial_for = _trial_runner(cfg, scene)
    tol = _success_tolerance(scheme, data["z_ref"])
    seeds = cfg.trial_seeds()
    report = validate(scheme, lambda s: trial_for(scheme, s), data["z_ref"], len(seeds), seeds, tol)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "z", "success", "saturated", "failed"])
    for r in report.rows:
        w.writerow([r.seed, repr(r.z), int(r.success), r.saturated, int(r.failed)])
    path = cfg.output_dir / VALIDATION_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())

    met = report.success_rate >= cfg.success_threshold
    _write_json(cfg.output_dir / SUMMARY_FILE, {
        "config_hash": cfg.config_hash,
        "dither": cfg.dither,
        "trials": report.n,
        "successes": report.successes,
        "failed_trials": report.failures,
        "success_rate": report.success_rate,
        "success_threshold": cfg.success_threshold,
        "threshold_met": met,
        "success_tolerance": tol,
        "z_ref": report.z_ref,
        "mu_sim": report.mu_sim,
        "sigma_sim": report.sigma_sim,
        "sigma_pred": report.sigma_pred,
        "calibration": report.calibration,
        "relative_error": report.relative_error,
        "round_ratio": report.round_ratio,
    })
    print(f"{report.successes}/{report.n} within 3 eps; sigma_sim/sigma_pred={report.calibration:.3f}")
    if report.failures:
        print(f"{report.failures} trial(s) produced non-finite results")
    return EXIT_OK if met else EXIT_THRESHOLD


def cmd_probe(cfg: ProjectConfig) -> int:
    data = _read_artifact(cfg, SCHEME_FILE)
    scheme = scheme_from_artifact(data)
    scene = _scene(cfg)
    tol = _success_tolerance(scheme, data["z_ref"])
    cands = perturbations(scheme, cfg.probe_ks, seed=scene.seed)
    rows = optimality_probe(scheme, _trial_runner(cfg, scene), data["z_ref"], tol, cands, n=cfg.trials)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = sorted(scheme.specs)
    w.writerow(["label", "successes", "trials", "mu", "sigma"] + names)
    for r in rows:
        w.writerow([r.label, r.successes, r.trials, repr(r.mu), repr(r.sigma)] + [r.bits[k] for k in names])
        print(f"{r.label:>10s} {r.successes}/{r.trials}")
    path = cfg.output_dir / PROBE_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return EXIT_OK


def cmd_pack_bench(cfg: ProjectConfig) -> int:
    data = _read_artifact(cfg, SCHEME_FILE)
    scheme = scheme_from_artifact(data)
    groups: dict[int, list[str]] = {}
    for k in scheme.specs:
        groups.setdefault(scheme.counts[k], []).append(k)
    rng = np.random.default_rng(0)
    report = []
    for count, names in sorted(groups.items()):
        widths = [(k, scheme.specs[k].physical_bits) for k in names]
        layout = plan_layout(widths, cfg.word_bits)
        buf = PackedBuffer(layout, count)
        codes = {}
        for k in names:
            s = scheme.specs[k]
            codes[k] = rng.integers(s.min_code, s.max_code, size=count, endpoint=True)
            buf.store_signed(k, codes[k])
        restored = PackedBuffer.from_bytes(buf.to_bytes())
        ok = all(np.array_equal(restored.load_signed(k), codes[k]) for k in names)
        if not ok:
            raise CliError("bit pack round trip failed")
        report.append({
            "element_count": count,
            "fields": [{"name": k, "width": w} for k, w in widths],
            "bits_per_element": layout.total_bits,
            "words_per_element": layout.words_needed,
            "bit_struct_words_per_element": bit_struct_words([w for _, w in widths], cfg.word_bits),
            "reference_words_per_element": -(-cfg.reference_bits * len(names) // cfg.word_bits),
            "packed_bytes": buf.nbytes,
            "round_trip": ok,
        })
    _write_json(cfg.output_dir / PACK_FILE, {
        "config_hash": cfg.config_hash,
        "word_bits": cfg.word_bits,
        "groups": report,
    })
    for g in report:
        print(f"{g['element_count']} elements: {g['words_per_element']} words packed, "
              f"{g['bit_struct_words_per_element']} bit-struct, {g['reference_words_per_element']} reference")
    return EXIT_OK


COMMANDS = {
    "reference": cmd_reference,
    "gradients": cmd_gradients,
    "solve": cmd_solve,
    "validate": cmd_validate,
    "probe": cmd_probe,
    "pack-bench": cmd_pack_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="autoquant", description="Derive and validate fixed-point quantization schemes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="project config (JSON)")
        sp.add_argument("--seed", type=int, help="first trial seed; trials use seed..seed+trials-1")
        sp.add_argument("--trials", type=int)
        sp.add_argument("--mode", choices=["error_bounded", "memory_bounded"])
        sp.add_argument("--no-dither", action="store_true", help="round to nearest instead of dithering")
        sp.add_argument("--checkpointing", choices=["full", "bisection"])
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args)
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except InfeasibleBudget as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
