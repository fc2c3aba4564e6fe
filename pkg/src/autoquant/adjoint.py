"""Reverse-mode sweeps through the time loop and squared-adjoint tallies.

A state is a ``dict`` mapping quantity name to a flat float64 array.  The
adjoint of a state has the same structure.  Two backward drivers are
provided: ``backprop_full`` keeps every state, ``backprop_checkpointed``
keeps only the checkpoints on one root-to-leaf path of a bisection tree.
"""
from __future__ import annotations

import hashlib
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

State = dict[str, np.ndarray]


class ReplayMismatch(RuntimeError):
    """A recomputed state differs from the one produced by the forward sweep."""


class StepFunctions(Protocol):
    def forward(self, state: State) -> State: ...

    def adjoint(self, state: State, adj_next: State) -> State: ...


class Objective(Protocol):
    """Evaluation function written as a sum of per-step terms."""

    def value(self, t: int, T: int, state: State) -> float: ...

    def grad(self, t: int, T: int, state: State) -> State | None: ...


@dataclass
class GradientTally:
    g: dict[str, float]
    step_sq_norm: list[float] = field(default_factory=list)  # indexed by t
    forward_steps: int = 0
    peak_resident: int = 0
    adjoints: list[State] | None = None

    def __getitem__(self, name: str) -> float:
        return self.g[name]

    def merge(self, other: "GradientTally") -> "GradientTally":
        keys = self.g.keys() | other.g.keys()
        return GradientTally({k: self.g.get(k, 0.0) + other.g.get(k, 0.0) for k in keys})


def state_digest(state: Mapping[str, np.ndarray]) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k], dtype=np.float64).tobytes())
    return h.digest()


def _add_into(a: State, b: State | None) -> State:
    if not b:
        return a
    out = dict(a)
    for k, v in b.items():
        out[k] = out[k] + v if k in out else v
    return out


def _clamp(a: State, cap) -> State:
    if cap is None:
        return a
    out = {}
    for k, v in a.items():
        c = cap.get(k) if isinstance(cap, Mapping) else cap
        out[k] = v if c is None else np.clip(v, -c, c)
    return out


class _Tallier:
    def __init__(self, names, T, keep):
        self.g = dict.fromkeys(names, 0.0)
        self.step_sq = [0.0] * (T + 1)
        self.history: list | None = [None] * (T + 1) if keep else None

    def add(self, t: int, a: State) -> None:
        total = 0.0
        for k, v in a.items():
            s = float(np.dot(v, v))
            self.g[k] += s
            total += s
        self.step_sq[t] = total
        if self.history is not None:
            self.history[t] = a

    def result(self, forward_steps, peak) -> GradientTally:
        return GradientTally(self.g, self.step_sq, forward_steps, peak, self.history)


def _zero_like(state: State) -> State:
    return {k: np.zeros_like(v) for k, v in state.items()}


def backprop_full(
    steps: StepFunctions,
    s0: State,
    T: int,
    objective: Objective,
    clamp=None,
    keep_adjoints: bool = False,
) -> tuple[float, GradientTally]:
    """Store s_0..s_T, then sweep backward accumulating sum of squared adjoints."""
    if T < 0:
        raise ValueError("T must be non-negative")
    states = [s0]
    for _ in range(T):
        states.append(steps.forward(states[-1]))
    z = math.fsum(objective.value(t, T, s) for t, s in enumerate(states))

    tally = _Tallier(s0.keys(), T, keep_adjoints)
    a = _clamp(_add_into(_zero_like(states[T]), objective.grad(T, T, states[T])), clamp)
    tally.add(T, a)
    for t in range(T - 1, -1, -1):
        a = steps.adjoint(states[t], a)
        a = _clamp(_add_into(a, objective.grad(t, T, states[t])), clamp)
        tally.add(t, a)
    return z, tally.result(T, T + 1)


class _CheckpointStore:
    """Resident checkpoints, spilled to ``spill_dir`` past ``memory_budget`` bytes."""

    def __init__(self, memory_budget: int | None, spill_dir: str | None):
        self.budget = memory_budget
        self.spill_dir = spill_dir
        self._mem: dict[int, State] = {}
        self._disk: dict[int, str] = {}
        self._bytes = 0

    def __contains__(self, t: int) -> bool:
        return t in self._mem or t in self._disk

    def __len__(self) -> int:
        return len(self._mem) + len(self._disk)

    def keys(self):
        return list(self._mem) + list(self._disk)

    def put(self, t: int, state: State) -> None:
        size = sum(v.nbytes for v in state.values())
        if self.budget is not None and self._bytes + size > self.budget:
            if self.spill_dir is None:
                self.spill_dir = tempfile.mkdtemp(prefix="autoquant-ckpt-")
            path = os.path.join(self.spill_dir, f"ckpt_{t:08d}.npz")
            np.savez(path, **state)
            self._disk[t] = path
        else:
            self._mem[t] = state
            self._bytes += size

    def get(self, t: int) -> State:
        if t in self._mem:
            return self._mem[t]
        with np.load(self._disk[t]) as data:
            return {k: data[k] for k in data.files}

    def drop(self, t: int) -> None:
        if t in self._mem:
            self._bytes -= sum(v.nbytes for v in self._mem.pop(t).values())
        elif t in self._disk:
            os.remove(self._disk.pop(t))


class CheckpointTree:
    """Bisection checkpoint schedule over leaves 0..T.

    The tree is complete over ``2**depth >= T + 1`` leaves.  A non-leaf node
    covering ``[lo, lo + size)`` has signpost ``lo`` and may hold ``s_lo``.
    Only checkpoints on the current root-to-leaf path are kept.
    """

    def __init__(
        self,
        steps: StepFunctions,
        T: int,
        verify: bool = True,
        memory_budget: int | None = None,
        spill_dir: str | None = None,
    ):
        self.steps = steps
        self.T = T
        self.depth = math.ceil(math.log2(T + 1)) if T > 0 else 0
        self.store = _CheckpointStore(memory_budget, spill_dir)
        self.verify = verify
        self.digests: list[bytes] = []
        self.forward_steps = 0
        self.peak_resident = 0
        # (target t, node depth, steps into the rerun when the node was refreshed)
        self.events: list[tuple[int, int, int]] = []
        self._frontier = T

    def nodes(self, t: int) -> list[int]:
        """Signpost of each non-leaf node on the root-to-leaf path, by depth."""
        out = [0]
        lo, size = 0, 1 << self.depth
        while size > 2:
            size //= 2
            if t >= lo + size:
                lo += size
            out.append(lo)
        return out

    def path(self, t: int) -> list[int]:
        return list(dict.fromkeys(self.nodes(t)))

    def _note_resident(self) -> None:
        self.peak_resident = max(self.peak_resident, len(self.store) + 1)

    def _step(self, s: State) -> State:
        self.forward_steps += 1
        return self.steps.forward(s)

    def sweep(self, s0: State, objective: Objective) -> tuple[float, State]:
        """Forward pass storing the checkpoints on the path to leaf T."""
        keep = set(self.path(self.T))
        terms = []
        s = s0
        for t in range(self.T + 1):
            if t in keep:
                self.store.put(t, s)
            self._note_resident()
            if self.verify:
                self.digests.append(state_digest(s))
            terms.append(objective.value(t, self.T, s))
            if t < self.T:
                s = self._step(s)
        return math.fsum(terms), s

    def recover(self, t: int) -> State:
        if not 0 <= t <= self.T:
            raise IndexError(f"step {t} outside [0, {self.T}]")
        needed = self.path(t)
        for k in self.store.keys():
            if k not in needed:
                self.store.drop(k)
        start = max(k for k in self.store.keys() if k <= t)
        new_nodes = self.nodes(t)
        old_nodes = self.nodes(self._frontier)
        split = 0
        while split < len(new_nodes) and new_nodes[split] == old_nodes[split]:
            split += 1
        for depth in range(split, len(new_nodes)):
            if new_nodes[depth] >= start:
                self.events.append((t, depth, new_nodes[depth] - start))
        self._frontier = t

        s = self.store.get(start)
        for k in range(start, t + 1):
            if k in needed and k not in self.store:
                self.store.put(k, s)
                self._note_resident()
            if k < t:
                s = self._step(s)
                if self.verify and state_digest(s) != self.digests[k + 1]:
                    raise ReplayMismatch(f"replayed state s_{k + 1} differs from the forward sweep")
        return s


def backprop_checkpointed(
    steps: StepFunctions,
    s0: State,
    T: int,
    objective: Objective,
    clamp=None,
    verify: bool = True,
    memory_budget: int | None = None,
    spill_dir: str | None = None,
) -> tuple[float, GradientTally]:
    """Same tally as ``backprop_full`` with O(log T) resident states."""
    if T < 0:
        raise ValueError("T must be non-negative")
    tree = CheckpointTree(steps, T, verify, memory_budget, spill_dir)
    z, sT = tree.sweep(s0, objective)

    tally = _Tallier(s0.keys(), T, False)
    a = _clamp(_add_into(_zero_like(sT), objective.grad(T, T, sT)), clamp)
    tally.add(T, a)
    for t in range(T - 1, -1, -1):
        st = tree.recover(t)
        a = steps.adjoint(st, a)
        a = _clamp(_add_into(a, objective.grad(t, T, st)), clamp)
        tally.add(t, a)
    for k in tree.store.keys():
        tree.store.drop(k)
    return z, tally.result(tree.forward_steps, tree.peak_resident)


def _perturbed_tail(steps, objective, state: State, t: int, T: int) -> float:
    terms = []
    s = state
    for k in range(t, T + 1):
        terms.append(objective.value(k, T, s))
        if k < T:
            s = steps.forward(s)
    return math.fsum(terms)


@dataclass
class FDSample:
    t: int
    name: str
    index: int
    fd: float
    adjoint: float
    error: float


def fd_samples(
    steps: StepFunctions,
    s0: State,
    T: int,
    objective: Objective,
    samples: int,
    seed: int = 0,
    rel_step: float = 1e-6,
) -> list[FDSample]:
    """Compare adjoints against central differences at random coordinates.

    Coordinates ``(t, quantity, index)`` are drawn uniformly.  The step is
    ``rel_step`` times the quantity's range over the trajectory; coordinates
    whose gradient is near zero are compared against a floor scaled by
    ``|z| / range`` instead of relatively.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    z, tally = backprop_full(steps, s0, T, objective, keep_adjoints=True)
    states = [s0]
    for _ in range(T):
        states.append(steps.forward(states[-1]))
    names = sorted(s0)
    ranges = {
        k: max(float(np.max(np.abs(s[k]))) if s[k].size else 0.0 for s in states) or 1.0
        for k in names
    }
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(samples):
        t = int(rng.integers(0, T + 1))
        name = names[int(rng.integers(0, len(names)))]
        i = int(rng.integers(0, s0[name].size))
        h = rel_step * ranges[name]
        plus = {k: v.copy() for k, v in states[t].items()}
        minus = {k: v.copy() for k, v in states[t].items()}
        plus[name][i] += h
        minus[name][i] -= h
        fd = (_perturbed_tail(steps, objective, plus, t, T) - _perturbed_tail(steps, objective, minus, t, T)) / (2 * h)
        ad = float(tally.adjoints[t][name][i])
        floor = 1e-4 * max(abs(z), 1e-300) / ranges[name]
        out.append(FDSample(t, name, i, fd, ad, abs(fd - ad) / max(abs(fd), abs(ad), floor)))
    return out


def fd_check(
    steps: StepFunctions,
    s0: State,
    T: int,
    objective: Objective,
    samples: int,
    seed: int = 0,
    rel_step: float = 1e-6,
) -> float:
    """Worst relative deviation over ``samples`` finite-difference probes."""
    return max(r.error for r in fd_samples(steps, s0, T, objective, samples, seed, rel_step))
