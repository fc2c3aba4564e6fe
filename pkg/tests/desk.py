"""Desk-scale MPM experiment shared by the slow tests.

The reference run and gradient tally are computed once per session and
quantized trials are memoized by (bits, seed, dither), so criteria that
reuse a scheme do not rerun it.
"""
import time

from autoquant.adjoint import backprop_checkpointed
from autoquant.quantizer import QuantityInfo, SolverRequest, solve, validate
from autoquant.sims import EvalFunction, desk_mpm_scene, run, scene_from_dict


class DeskExperiment:
    def __init__(self):
        t0 = time.perf_counter()
        self.scene = scene_from_dict(desk_mpm_scene())
        self.sim = self.scene.sim
        self.steps = self.scene.steps
        self.ev = EvalFunction(self.scene.eval_kind, self.sim)
        self.ref = run(self.sim, self.steps, self.ev)
        self.z_ref = self.ref.z
        z, self.tally = backprop_checkpointed(self.sim, self.sim.initial_state(), self.steps, self.ev)
        assert z == self.z_ref
        self.infos = [
            QuantityInfo(k, self.sim.count, self.ref.ranges[k].range, self.tally.g[k])
            for k in self.sim.quantity_names
        ]
        self._trials = {}
        self.setup_seconds = time.perf_counter() - t0

    def scheme(self, mode, tolerance):
        return solve(SolverRequest(mode, tolerance, self.z_ref, self.infos))

    def trial(self, scheme, seed, dither=True):
        key = (tuple(sorted(scheme.bits().items())), seed, dither)
        if key not in self._trials:
            self._trials[key] = run(self.sim, self.steps, self.ev, scheme, seed=seed, dither=dither)
        return self._trials[key]

    def validate(self, scheme, n, tolerance=None, dither=True):
        return validate(scheme, lambda s: self.trial(scheme, s, dither), self.z_ref, n, tolerance=tolerance)
