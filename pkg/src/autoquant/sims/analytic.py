"""Closed-form oracle systems: free fall / harmonic oscillator and identity."""
from __future__ import annotations

import numpy as np

from ..adjoint import State
from .base import Simulator


class FreeFall(Simulator):
    """Symplectic Euler on ``x'' = g - k x`` for ``P`` independent bodies.

    ``v <- v + (g - k x) dt`` then ``x <- x + v dt``.  ``k = 0`` is free fall.
    """

    quantity_names = ("x", "v")

    def __init__(self, x0=0.0, v0=0.0, gravity=-10.0, dt=0.01, stiffness=0.0, mass=1.0, count=1):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (count,)).copy()
        self.v0 = np.broadcast_to(np.asarray(v0, dtype=np.float64), (count,)).copy()
        self.gravity = float(gravity)
        self.dt = float(dt)
        self.k = float(stiffness)
        self.mass = float(mass)

    def initial_state(self) -> State:
        return {"x": self.x0.copy(), "v": self.v0.copy()}

    def forward(self, state: State) -> State:
        x, v = state["x"], state["v"]
        v1 = v + (self.gravity - self.k * x) * self.dt
        return {"x": x + v1 * self.dt, "v": v1}

    def adjoint(self, state: State, adj_next: State) -> State:
        ax, av = adj_next["x"], adj_next["v"]
        dt, k = self.dt, self.k
        return {
            "x": ax * (1.0 - k * dt * dt) - av * k * dt,
            "v": ax * dt + av,
        }

    def kinetic_energy(self, state):
        v = state["v"]
        return 0.5 * self.mass * float(v @ v), {"x": np.zeros_like(v), "v": self.mass * v}

    def total_energy(self, state):
        x, v = state["x"], state["v"]
        ke, grad = self.kinetic_energy(state)
        pe = float(np.sum(-self.mass * self.gravity * x + 0.5 * self.k * x * x))
        grad["x"] = -self.mass * self.gravity + self.k * x
        return ke + pe, grad

    def average_height(self, state):
        x = state["x"]
        return float(x.mean()), {"x": np.full_like(x, 1.0 / x.size), "v": np.zeros_like(x)}


class Identity(Simulator):
    """``s_{t+1} = s_t`` over quantities of the given element counts."""

    def __init__(self, counts: dict[str, int], value: float = 1.0):
        self.counts = dict(counts)
        self.quantity_names = tuple(self.counts)
        self.value = value

    def initial_state(self) -> State:
        return {k: np.full(n, self.value) for k, n in self.counts.items()}

    def forward(self, state: State) -> State:
        return {k: v.copy() for k, v in state.items()}

    def adjoint(self, state: State, adj_next: State) -> State:
        return {k: v.copy() for k, v in adj_next.items()}
