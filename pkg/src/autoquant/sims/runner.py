"""Full-precision and quantized execution of a simulator."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..adjoint import State
from ..bitpack import PackedBuffer, plan_layout
from ..qtypes import DitherRng, QuantSpec, QuantStats, RangeTracker, decode, encode, encode_with_noise
from .base import EvalFunction, SimulationError, Simulator

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    final_state: State
    z: float
    ranges: dict[str, RangeTracker]
    stats: dict[str, QuantStats] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    steps: int = 0
    failed: bool = False

    @property
    def saturated(self) -> int:
        return sum(s.saturated for s in self.stats.values())


class QuantizedStore:
    """Round-trips states through bit-packed fixed-point storage.

    Quantities are grouped by element count; each group shares one
    :class:`PackedBuffer` whose fields are ``b + 1`` bits wide.
    """

    def __init__(
        self,
        specs: Mapping[str, QuantSpec],
        counts: Mapping[str, int],
        rng: DitherRng | None,
        word_bits: int = 64,
    ):
        self.specs = dict(specs)
        self.rng = rng
        self.stats = {k: QuantStats() for k in self.specs}
        groups: dict[int, list[str]] = {}
        for name in self.specs:
            groups.setdefault(counts[name], []).append(name)
        self.buffers: dict[str, PackedBuffer] = {}
        for count, names in groups.items():
            layout = plan_layout([(n, self.specs[n].physical_bits) for n in names], word_bits)
            buf = PackedBuffer(layout, count)
            for n in names:
                self.buffers[n] = buf

    def store(self, state: State) -> State:
        out = dict(state)
        if self.rng is not None:
            # one noise draw per stored state, split in declaration order
            xi = self.rng.draw(sum(state[k].size for k in self.specs))
            pos = 0
        for name, spec in self.specs.items():
            if self.rng is None:
                u = encode(state[name], spec, self.stats[name])
            else:
                n = state[name].size
                u = encode_with_noise(state[name], spec, xi[pos:pos + n], self.stats[name])
                pos += n
            buf = self.buffers[name]
            buf.store_signed(name, u)
            out[name] = decode(buf.load_signed(name), spec)
        return out

    @property
    def nbytes(self) -> int:
        return sum(b.nbytes for b in {id(b): b for b in self.buffers.values()}.values())


def run(
    sim: Simulator,
    steps: int,
    evaluation: EvalFunction,
    scheme=None,
    seed: int = 0,
    stream: int = 0,
    dither: bool = True,
    quantized: list[str] | None = None,
    safety_factor: float = 2.0,
    word_bits: int = 64,
    saturation_warning: float = 1e-3,
) -> RunResult:
    """Run ``steps`` steps; quantize every stored state when a scheme is given.

    Without a scheme this is the reference run: ranges of every quantity are
    tracked over ``s_0 .. s_T``.  With a scheme, each state (including
    ``s_0``) is encoded, packed and decoded before the next step reads it.
    """
    state = sim.initial_state()
    ranges = {k: RangeTracker(safety_factor=safety_factor).observe(v) for k, v in state.items()}
    store = None
    if scheme is not None:
        specs = getattr(scheme, "specs", scheme)
        wanted = list(sim.quantity_names) if quantized is None else list(quantized)
        missing = [k for k in wanted if k not in specs]
        if missing:
            raise SimulationError(f"no quantization spec for {missing}")
        counts = {k: v.size for k, v in state.items()}
        rng = DitherRng(seed, stream) if dither else None
        store = QuantizedStore({k: specs[k] for k in wanted}, counts, rng, word_bits)
        state = store.store(state)

    result = RunResult(state, math.nan, ranges, steps=steps)
    try:
        for _ in range(steps):
            state = sim.forward(state)
            if store is not None:
                state = store.store(state)
            for k, v in state.items():
                ranges[k].observe(v)
    except (SimulationError, ValueError) as exc:
        result.failed = True
        result.warnings.append(f"run aborted: {exc}")
        log.warning("run aborted: %s", exc)
        return result

    result.final_state = state
    result.z = float(evaluation(state))
    if store is not None:
        result.stats = store.stats
        for name, st in store.stats.items():
            if st.saturation_rate > saturation_warning:
                msg = f"{name}: saturation rate {st.saturation_rate:.2e} above {saturation_warning:.0e}"
                result.warnings.append(msg)
                log.debug(msg)
    if not np.isfinite(result.z):
        result.failed = True
    return result
