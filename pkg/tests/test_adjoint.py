import math

import numpy as np
import pytest

from autoquant.adjoint import (
    CheckpointTree,
    ReplayMismatch,
    backprop_checkpointed,
    backprop_full,
    fd_check,
)
from autoquant.sims import MPM2D, Block, EvalFunction, FreeFall, Identity, Material


class Impure:
    """Forward step whose output changes on every call."""

    def __init__(self):
        self.calls = 0

    def forward(self, s):
        self.calls += 1
        return {"a": s["a"] + 1.0 + 1e-9 * self.calls}

    def adjoint(self, s, a):
        return dict(a)


class FinalSum:
    def value(self, t, T, s):
        return float(s["a"].sum()) if t == T else 0.0

    def grad(self, t, T, s):
        return {"a": np.ones_like(s["a"])} if t == T else None


class LinearAt:
    """z = w . s_T with fixed weights (used to stitch a prefix onto a suffix)."""

    def __init__(self, w):
        self.w = w

    def value(self, t, T, s):
        return math.fsum(float(self.w[k] @ s[k]) for k in s) if t == T else 0.0

    def grad(self, t, T, s):
        return {k: self.w[k].copy() for k in s} if t == T else None


def _freefall(T=100, v0=0.0):
    sim = FreeFall(v0=v0, gravity=-10.0, dt=0.01)
    return sim, EvalFunction("final_kinetic_energy", sim)


def test_freefall_closed_form():
    T = 100
    sim, ev = _freefall(T)
    z, tally = backprop_full(sim, sim.initial_state(), T, ev)
    vT = -10.0
    assert z == pytest.approx(0.5 * vT**2, rel=1e-12)
    assert tally["v"] == pytest.approx((T + 1) * vT**2, rel=1e-12)
    assert tally["x"] == 0.0


def test_identity_tally():
    counts = {"a": 3, "b": 5}
    sim = Identity(counts)
    ev = EvalFunction("final_sum", sim)
    T = 17
    for fn in (backprop_full, backprop_checkpointed):
        z, tally = fn(sim, sim.initial_state(), T, ev)
        assert z == 8.0
        assert tally.g == {"a": (T + 1) * 3, "b": (T + 1) * 5}


def test_zero_steps():
    sim, ev = _freefall()
    s0 = sim.initial_state()
    s0["v"][:] = 2.0
    z, tally = backprop_full(sim, s0, 0, ev)
    assert z == 2.0 and tally["v"] == 4.0
    z2, tally2 = backprop_checkpointed(sim, s0, 0, ev)
    assert (z2, tally2.g) == (z, tally.g)


def test_fig7_replay_pattern():
    sim = Identity({"a": 1})
    tree = CheckpointTree(sim, 4)
    tree.sweep(sim.initial_state(), FinalSum())
    assert sorted(tree.store.keys()) == [0, 4]
    before = tree.forward_steps
    tree.recover(3)
    assert tree.events == [(3, 1, 0), (3, 2, 2)]
    assert tree.forward_steps - before == 3


def test_recover_at_signpost_needs_no_rerun():
    sim = Identity({"a": 1})
    tree = CheckpointTree(sim, 8)
    tree.sweep(sim.initial_state(), FinalSum())
    before = tree.forward_steps
    tree.recover(8)
    assert tree.forward_steps == before


def test_single_step():
    sim, ev = _freefall()
    z, tally = backprop_checkpointed(sim, sim.initial_state(), 1, ev)
    z_ref, ref = backprop_full(sim, sim.initial_state(), 1, ev)
    assert tally.peak_resident <= 2
    assert z == z_ref and tally.g == ref.g


def test_recover_matches_stored_states():
    sim = FreeFall(v0=1.0, stiffness=3.0, dt=0.05)
    T = 37
    states = [sim.initial_state()]
    for _ in range(T):
        states.append(sim.forward(states[-1]))
    tree = CheckpointTree(sim, T)
    tree.sweep(states[0], EvalFunction("final_total_energy", sim))
    for t in sorted(np.random.default_rng(0).choice(T + 1, 10, replace=False), reverse=True):
        s = tree.recover(int(t))
        assert all(np.array_equal(s[k], states[t][k]) for k in s)
    with pytest.raises(IndexError):
        tree.recover(T + 1)


@pytest.mark.parametrize("T", [15, 16, 1000, 1024])
def test_resource_bounds(T):
    sim = Identity({"a": 2})
    _, tally = backprop_checkpointed(sim, sim.initial_state(), T, EvalFunction("final_sum", sim))
    assert tally.peak_resident <= math.ceil(math.log2(T + 1)) + 2
    assert tally.forward_steps <= T * (math.log2(T) + 2)


@pytest.mark.parametrize("T", [1, 2, 3, 7, 64, 100, 256])
def test_checkpointed_bit_identical(T):
    sim = FreeFall(x0=0.3, v0=1.0, stiffness=5.0, dt=0.02, count=3)
    ev = EvalFunction("final_total_energy", sim)
    z1, full = backprop_full(sim, sim.initial_state(), T, ev)
    z2, ck = backprop_checkpointed(sim, sim.initial_state(), T, ev)
    assert z1 == z2
    assert full.g == ck.g
    assert full.step_sq_norm == ck.step_sq_norm


def test_checkpointed_bit_identical_mpm():
    sim = _small_mpm()
    ev = EvalFunction("final_kinetic_energy", sim)
    z1, full = backprop_full(sim, sim.initial_state(), 40, ev)
    z2, ck = backprop_checkpointed(sim, sim.initial_state(), 40, ev)
    assert z1 == z2 and full.g == ck.g


def test_replay_mismatch_detected():
    with pytest.raises(ReplayMismatch):
        backprop_checkpointed(Impure(), {"a": np.zeros(1)}, 8, FinalSum())


def test_spill_to_disk(tmp_path):
    sim = FreeFall(v0=1.0, stiffness=2.0, dt=0.05, count=4)
    ev = EvalFunction("final_total_energy", sim)
    _, full = backprop_full(sim, sim.initial_state(), 50, ev)
    _, spilled = backprop_checkpointed(sim, sim.initial_state(), 50, ev, memory_budget=64, spill_dir=str(tmp_path))
    assert spilled.g == full.g
    assert list(tmp_path.iterdir()) == []  # spill files are removed afterwards


def test_tally_additivity():
    sim = FreeFall(x0=0.2, v0=0.5, stiffness=4.0, dt=0.03)
    ev = EvalFunction("final_total_energy", sim)
    T, k = 60, 25
    _, full = backprop_full(sim, sim.initial_state(), T, ev, keep_adjoints=True)
    sk = sim.initial_state()
    for _ in range(k):
        sk = sim.forward(sk)
    _, suffix = backprop_full(sim, sk, T - k, ev, keep_adjoints=True)
    a_k = suffix.adjoints[0]
    _, prefix = backprop_full(sim, sim.initial_state(), k, LinearAt(a_k))
    overlap = {h: float(a_k[h] @ a_k[h]) for h in a_k}
    for h in full.g:
        assert prefix.g[h] + suffix.g[h] - overlap[h] == pytest.approx(full.g[h], rel=1e-12)


def test_gradient_clamp():
    sim, ev = _freefall()
    _, tally = backprop_full(sim, sim.initial_state(), 100, ev, clamp={"v": 1.0})
    assert tally["v"] == pytest.approx(101.0)


def test_fd_freefall_exact():
    sim = FreeFall(v0=1.0, dt=0.01)
    assert fd_check(sim, sim.initial_state(), 50, EvalFunction("final_kinetic_energy", sim), 40) < 1e-7
    sim = Identity({"a": 4})
    assert fd_check(sim, sim.initial_state(), 10, EvalFunction("final_sum", sim), 20) < 1e-9


def _small_mpm(n=5, boundary=True):
    blocks = [Block((0.35, 0.4), (0.12, 0.12), (n, n), (1.0, -0.5))]
    return MPM2D(blocks, grid_res=32, dt=5e-4, material=Material(500.0, 0.2), boundary=boundary)


def test_fd_two_particle_mpm():
    blocks = [Block((0.4, 0.5), (0.05, 0.025), (2, 1), (0.5, -0.3))]
    sim = MPM2D(blocks, grid_res=32, dt=5e-4)
    for kind in ("final_kinetic_energy", "final_total_energy", "average_height"):
        assert fd_check(sim, sim.initial_state(), 8, EvalFunction(kind, sim), 60, seed=1) < 1e-4


@pytest.mark.parametrize("kind", ["final_kinetic_energy", "final_total_energy", "average_height"])
def test_fd_small_mpm(kind):
    sim = _small_mpm()
    assert fd_check(sim, sim.initial_state(), 12, EvalFunction(kind, sim), 60, seed=2) < 1e-4
