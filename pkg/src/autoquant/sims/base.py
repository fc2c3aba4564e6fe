from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..adjoint import State
from ..qtypes import QuantSpec, RangeTracker

EVAL_KINDS = ("final_kinetic_energy", "final_total_energy", "average_height", "final_sum")


class SimulationError(RuntimeError):
    pass


@dataclass
class QuantityDescriptor:
    name: str
    count: int
    role: str = "particle"
    tracker: RangeTracker = field(default_factory=RangeTracker)
    spec: QuantSpec | None = None


class Simulator:
    """A differentiable time-stepped system over named scalar quantities.

    Subclasses implement ``initial_state``, ``forward`` and ``adjoint`` plus
    the scalar functions used by :class:`EvalFunction`.
    """

    quantity_names: tuple[str, ...] = ()

    def initial_state(self) -> State:
        raise NotImplementedError

    def forward(self, state: State) -> State:
        raise NotImplementedError

    def adjoint(self, state: State, adj_next: State) -> State:
        raise NotImplementedError

    def quantities(self, safety_factor: float = 2.0) -> list[QuantityDescriptor]:
        s0 = self.initial_state()
        return [
            QuantityDescriptor(k, int(s0[k].size), tracker=RangeTracker(safety_factor=safety_factor))
            for k in self.quantity_names
        ]

    # scalar summaries, each returning (value, gradient dict)
    def kinetic_energy(self, state: State) -> tuple[float, State]:
        raise NotImplementedError

    def total_energy(self, state: State) -> tuple[float, State]:
        raise NotImplementedError

    def average_height(self, state: State) -> tuple[float, State]:
        raise NotImplementedError

    def evaluation(self, kind: str) -> "EvalFunction":
        return EvalFunction(kind, self)


def _final_sum(state: State) -> tuple[float, State]:
    return float(sum(v.sum() for v in state.values())), {k: np.ones_like(v) for k, v in state.items()}


class EvalFunction:
    """Final-state evaluation function ``z = Z(s_T)``."""

    def __init__(self, kind: str, sim: Simulator):
        if kind not in EVAL_KINDS:
            raise ValueError(f"unknown evaluation kind {kind!r}; expected one of {EVAL_KINDS}")
        self.kind = kind
        self._fn: Callable[[State], tuple[float, State]] = {
            "final_kinetic_energy": sim.kinetic_energy,
            "final_total_energy": sim.total_energy,
            "average_height": sim.average_height,
            "final_sum": _final_sum,
        }[kind]

    def __call__(self, state: State) -> float:
        return self._fn(state)[0]

    def value(self, t: int, T: int, state: State) -> float:
        return self._fn(state)[0] if t == T else 0.0

    def grad(self, t: int, T: int, state: State) -> State | None:
        return self._fn(state)[1] if t == T else None
