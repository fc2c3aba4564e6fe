"""2D MLS-MPM elastic solver (fixed corotated) with a hand-written adjoint.

Only particle attributes are state: position, velocity, deformation
gradient ``F`` and affine field ``C``, each split into scalar components.
The grid is transient and rebuilt every step.  P2G scatter uses
``np.bincount`` which accumulates in a fixed (particle, stencil) order, so
forward steps are bitwise repeatable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..adjoint import State
from .base import SimulationError, Simulator

POS = ("pos_x", "pos_y")
VEL = ("vel_x", "vel_y")
DEF = ("F_xx", "F_xy", "F_yx", "F_yy")
AFF = ("C_xx", "C_xy", "C_yx", "C_yy")
QUANTITIES = POS + VEL + DEF + AFF

_OI = np.repeat(np.arange(3), 3)
_OJ = np.tile(np.arange(3), 3)
_OFF = np.stack([_OI, _OJ], axis=-1).astype(np.float64)  # (9, 2)

BOUNDARY_CELLS = 3


@dataclass(frozen=True)
class Material:
    youngs_modulus: float = 1.0e3
    poisson_ratio: float = 0.2
    density: float = 1.0

    @property
    def mu(self) -> float:
        return self.youngs_modulus / (2 * (1 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        E, nu = self.youngs_modulus, self.poisson_ratio
        return E * nu / ((1 + nu) * (1 - 2 * nu))


@dataclass(frozen=True)
class Block:
    lower: tuple[float, float]
    size: tuple[float, float]
    n: tuple[int, int]
    velocity: tuple[float, float] = (0.0, 0.0)


def _mat(state: State, names) -> np.ndarray:
    a, b, c, d = (state[k] for k in names)
    return np.stack([np.stack([a, b], -1), np.stack([c, d], -1)], -2)


def _vec(state: State, names) -> np.ndarray:
    return np.stack([state[names[0]], state[names[1]]], -1)


def _split_mat(m: np.ndarray, names) -> State:
    return {names[0]: m[:, 0, 0], names[1]: m[:, 0, 1], names[2]: m[:, 1, 0], names[3]: m[:, 1, 1]}


def _split_vec(v: np.ndarray, names) -> State:
    return {names[0]: v[:, 0], names[1]: v[:, 1]}


def _cofactor(F: np.ndarray) -> np.ndarray:
    """d det(F) / dF for 2x2 matrices."""
    out = np.empty_like(F)
    out[:, 0, 0] = F[:, 1, 1]
    out[:, 0, 1] = -F[:, 1, 0]
    out[:, 1, 0] = -F[:, 0, 1]
    out[:, 1, 1] = F[:, 0, 0]
    return out


def _apply(M: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Per-particle ``M @ d_k`` for M (P,2,2) and stencil vectors d (9,P,2)."""
    d0, d1 = d[..., 0], d[..., 1]
    return np.stack([M[:, 0, 0] * d0 + M[:, 0, 1] * d1, M[:, 1, 0] * d0 + M[:, 1, 1] * d1], -1)


def _apply_t(M: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Per-particle ``M.T @ d_k``."""
    d0, d1 = d[..., 0], d[..., 1]
    return np.stack([M[:, 0, 0] * d0 + M[:, 1, 0] * d1, M[:, 0, 1] * d0 + M[:, 1, 1] * d1], -1)


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_k a_k b_k^T`` over the stencil axis, giving (P,2,2)."""
    out = np.empty(a.shape[1:2] + (2, 2))
    for i in range(2):
        for j in range(2):
            out[:, i, j] = (a[..., i] * b[..., j]).sum(0)
    return out


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]


def _t(M: np.ndarray) -> np.ndarray:
    return np.swapaxes(M, -1, -2)


def _rotation(F: np.ndarray):
    """Rotation factor of the 2D polar decomposition, via its angle."""
    a = F[:, 0, 0] + F[:, 1, 1]
    b = F[:, 1, 0] - F[:, 0, 1]
    theta = np.arctan2(b, a)
    c, s = np.cos(theta), np.sin(theta)
    R = np.empty_like(F)
    R[:, 0, 0] = c
    R[:, 0, 1] = -s
    R[:, 1, 0] = s
    R[:, 1, 1] = c
    return R, a, b, c, s


class MPM2D(Simulator):
    quantity_names = QUANTITIES

    def __init__(
        self,
        blocks: list[Block],
        grid_res: int = 64,
        dt: float = 2e-4,
        material: Material = Material(),
        gravity: tuple[float, float] = (0.0, -9.8),
        boundary: bool = True,
        jitter: float = 0.0,
        seed: int = 0,
    ):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.n = int(grid_res)
        self.dx = 1.0 / self.n
        self.inv_dx = float(self.n)
        self.dt = float(dt)
        self.material = material
        self.gravity = np.asarray(gravity, dtype=np.float64)
        self.boundary = boundary
        self.clamped = 0

        xs, vs, vols = [], [], []
        rng = np.random.default_rng(seed)
        for blk in blocks:
            nx, ny = blk.n
            hx, hy = blk.size[0] / nx, blk.size[1] / ny
            ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
            pts = np.stack([blk.lower[0] + (ii.ravel() + 0.5) * hx, blk.lower[1] + (jj.ravel() + 0.5) * hy], -1)
            if jitter:
                pts += rng.uniform(-jitter, jitter, pts.shape) * np.array([hx, hy])
            xs.append(pts)
            vs.append(np.broadcast_to(np.asarray(blk.velocity, dtype=np.float64), pts.shape))
            vols.append(np.full(len(pts), hx * hy))
        self.x0 = np.concatenate(xs) if xs else np.zeros((0, 2))
        self.v0 = np.concatenate(vs) if vs else np.zeros((0, 2))
        self.p_vol = np.concatenate(vols) if vols else np.zeros(0)
        self.p_mass = self.p_vol * material.density
        self.count = len(self.x0)
        self._lo = self.dx
        self._hi = 1.0 - 2.0 * self.dx
        if np.any(self.x0 < self._lo) or np.any(self.x0 > self._hi):
            raise SimulationError("initial particles outside the grid domain")
        node = np.arange(self.n * self.n)
        self._gi = node // self.n
        self._gj = node % self.n

    # -- state -------------------------------------------------------------

    def initial_state(self) -> State:
        eye = np.broadcast_to(np.eye(2), (self.count, 2, 2))
        zero = np.zeros((self.count, 2, 2))
        out = {}
        out.update(_split_vec(self.x0.copy(), POS))
        out.update(_split_vec(self.v0.copy(), VEL))
        out.update(_split_mat(eye.copy(), DEF))
        out.update(_split_mat(zero, AFF))
        return {k: np.ascontiguousarray(v) for k, v in out.items()}

    # -- forward -----------------------------------------------------------

    def _geometry(self, x: np.ndarray):
        X = x * self.inv_dx
        base = np.floor(X - 0.5).astype(np.int64)
        fx = X - base
        W = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2])  # (3,P,2)
        dW = np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5])
        weight = W[_OI, :, 0] * W[_OJ, :, 1]  # (9,P)
        dpos = (_OFF[:, None, :] - fx[None]) * self.dx  # (9,P,2)
        node = (base[None, :, 0] + _OI[:, None]) * self.n + base[None, :, 1] + _OJ[:, None]
        return W, dW, weight, dpos, node.ravel()

    def _forward_parts(self, state: State):
        x_raw = _vec(state, POS)
        for k in QUANTITIES:
            if not np.all(np.isfinite(state[k])):
                raise SimulationError(f"non-finite value in {k}")
        inside = (x_raw >= self._lo) & (x_raw <= self._hi)
        x = np.clip(x_raw, self._lo, self._hi)
        v = _vec(state, VEL)
        F = _mat(state, DEF)
        C = _mat(state, AFF)
        W, dW, weight, dpos, node = self._geometry(x)

        mu, lam = self.material.mu, self.material.lam
        R, *_ = _rotation(F)
        J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
        tau = 2 * mu * ((F - R) @ _t(F))
        tau[:, 0, 0] += lam * J * (J - 1)
        tau[:, 1, 1] += lam * J * (J - 1)
        kappa = self.dt * 4 * self.inv_dx**2 * self.p_vol
        affine = -kappa[:, None, None] * tau + self.p_mass[:, None, None] * C

        inner = self.p_mass[None, :, None] * v[None] + _apply(affine, dpos)  # (9,P,2)
        size = self.n * self.n
        gm = np.bincount(node, (weight * self.p_mass[None]).ravel(), size)
        contrib = weight[..., None] * inner
        gmom = np.stack(
            [np.bincount(node, contrib[..., 0].ravel(), size), np.bincount(node, contrib[..., 1].ravel(), size)], -1
        )
        active = gm > 0
        gv_pre = np.zeros_like(gmom)
        gv_pre[active] = gmom[active] / gm[active, None]
        gv = gv_pre + self.dt * self.gravity
        gv[~active] = 0.0
        keep = np.ones_like(gv, dtype=bool)
        if self.boundary:
            n, b = self.n, BOUNDARY_CELLS
            for d, idx in ((0, self._gi), (1, self._gj)):
                stop = ((idx < b) & (gv[:, d] < 0)) | ((idx > n - b) & (gv[:, d] > 0))
                keep[:, d] = ~stop
            gv = np.where(keep, gv, 0.0)
        keep &= active[:, None]

        g = gv[node].reshape(9, self.count, 2)
        wg = weight[..., None] * g
        new_v = wg.sum(axis=0)
        c4 = 4 * self.inv_dx**2
        new_C = c4 * _outer_sum(wg, dpos)
        M = np.eye(2)[None] + self.dt * new_C
        return dict(
            x=x, inside=inside, v=v, F=F, C=C, W=W, dW=dW, weight=weight, dpos=dpos, node=node,
            R=R, J=J, affine=affine, inner=inner, kappa=kappa, gm=gm, active=active, gv_pre=gv_pre,
            keep=keep, g=g, wg=wg, new_v=new_v, new_C=new_C, M=M,
        )

    def forward(self, state: State) -> State:
        p = self._forward_parts(state)
        self.clamped += int(np.count_nonzero(~p["inside"]))
        x_new = p["x"] + self.dt * p["new_v"]
        F_new = p["M"] @ p["F"]
        out = {}
        out.update(_split_vec(x_new, POS))
        out.update(_split_vec(p["new_v"], VEL))
        out.update(_split_mat(F_new, DEF))
        out.update(_split_mat(p["new_C"], AFF))
        out = {k: np.ascontiguousarray(v) for k, v in out.items()}
        if not all(np.all(np.isfinite(v)) for v in out.values()):
            raise SimulationError("NaN produced by MPM step")
        return out

    # -- adjoint -----------------------------------------------------------

    def adjoint(self, state: State, adj_next: State) -> State:
        p = self._forward_parts(state)
        dt, dx, inv_dx = self.dt, self.dx, self.inv_dx
        c4 = 4 * inv_dx**2
        size = self.n * self.n
        weight, dpos, node, g = p["weight"], p["dpos"], p["node"], p["g"]
        F, R, J, affine = p["F"], p["R"], p["J"], p["affine"]

        a_xn = _vec(adj_next, POS)
        a_vn = _vec(adj_next, VEL)
        a_Fn = _mat(adj_next, DEF)
        a_Cn = _mat(adj_next, AFF)

        # x' = x + dt new_v ; F' = (I + dt new_C) F
        a_x = a_xn.copy()
        a_newv = a_vn + dt * a_xn
        a_F = _t(p["M"]) @ a_Fn
        a_newC = a_Cn + dt * (a_Fn @ _t(F))

        # G2P
        aC_dpos = _apply(a_newC, dpos)  # (9,P,2)
        a_g = weight[..., None] * (a_newv[None] + c4 * aC_dpos)
        a_w = _dot(a_newv[None], g) + c4 * _dot(g, aC_dpos)
        a_dpos = c4 * weight[..., None] * _apply_t(a_newC, g)

        a_gv = np.stack(
            [np.bincount(node, a_g[..., 0].ravel(), size), np.bincount(node, a_g[..., 1].ravel(), size)], -1
        )
        a_gv = np.where(p["keep"], a_gv, 0.0)
        active, gm = p["active"], p["gm"]
        a_mom = np.zeros_like(a_gv)
        a_mom[active] = a_gv[active] / gm[active, None]
        a_m = np.zeros_like(gm)
        a_m[active] = -_dot(a_gv[active], p["gv_pre"][active]) / gm[active]

        # P2G
        A_mom = a_mom[node].reshape(9, self.count, 2)
        A_m = a_m[node].reshape(9, self.count)
        a_w += _dot(A_mom, p["inner"]) + A_m * self.p_mass[None]
        wA = weight[..., None] * A_mom
        a_v = self.p_mass[:, None] * wA.sum(axis=0)
        a_aff = _outer_sum(wA, dpos)
        a_dpos += _apply_t(affine, wA)
        a_C = self.p_mass[:, None, None] * a_aff
        A = -p["kappa"][:, None, None] * a_aff  # adjoint of Kirchhoff stress

        mu, lam = self.material.mu, self.material.lam
        At = _t(A)
        a_F += 2 * mu * ((A + At) @ F - At @ R)
        trA = A[:, 0, 0] + A[:, 1, 1]
        a_F += (lam * (2 * J - 1) * trA)[:, None, None] * _cofactor(F)
        a_R = -2 * mu * (A @ F)
        _, aa, bb, c, s = _rotation(F)
        # dR/dtheta = [[-s, -c], [c, -s]]
        a_theta = -s * a_R[:, 0, 0] - c * a_R[:, 0, 1] + c * a_R[:, 1, 0] - s * a_R[:, 1, 1]
        r2 = aa * aa + bb * bb
        d_a = -bb / r2 * a_theta
        d_b = aa / r2 * a_theta
        a_F[:, 0, 0] += d_a
        a_F[:, 1, 1] += d_a
        a_F[:, 1, 0] += d_b
        a_F[:, 0, 1] -= d_b

        # weights and stencil offsets depend on x
        W, dW = p["W"], p["dW"]
        dw0 = dW[_OI, :, 0] * W[_OJ, :, 1]
        dw1 = W[_OI, :, 0] * dW[_OJ, :, 1]
        a_fx = np.stack([(a_w * dw0).sum(0), (a_w * dw1).sum(0)], -1) - dx * a_dpos.sum(axis=0)
        a_x += inv_dx * a_fx
        a_x = np.where(p["inside"], a_x, 0.0)

        out = {}
        out.update(_split_vec(a_x, POS))
        out.update(_split_vec(a_v, VEL))
        out.update(_split_mat(a_F, DEF))
        out.update(_split_mat(a_C, AFF))
        return {k: np.ascontiguousarray(v) for k, v in out.items()}

    # -- evaluation functions ----------------------------------------------

    def _zeros(self, state: State) -> State:
        return {k: np.zeros_like(state[k]) for k in QUANTITIES}

    def kinetic_energy(self, state: State):
        vx, vy = state["vel_x"], state["vel_y"]
        ke = 0.5 * float(np.sum(self.p_mass * (vx * vx + vy * vy)))
        grad = self._zeros(state)
        grad["vel_x"] = self.p_mass * vx
        grad["vel_y"] = self.p_mass * vy
        return ke, grad

    def total_energy(self, state: State):
        ke, grad = self.kinetic_energy(state)
        F = _mat(state, DEF)
        R, *_ = _rotation(F)
        J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
        mu, lam = self.material.mu, self.material.lam
        FR = F - R
        psi = mu * (FR * FR).sum(axis=(1, 2)) + 0.5 * lam * (J - 1) ** 2
        dpsi = 2 * mu * FR + (lam * (J - 1))[:, None, None] * _cofactor(F)
        x = _vec(state, POS)
        pe = -float(np.sum(self.p_mass[:, None] * x * self.gravity[None]))
        grad.update(_split_mat(self.p_vol[:, None, None] * dpsi, DEF))
        grad["pos_x"] = -self.p_mass * self.gravity[0]
        grad["pos_y"] = -self.p_mass * self.gravity[1]
        return ke + float(np.sum(self.p_vol * psi)) + pe, grad

    def average_height(self, state: State):
        y = state["pos_y"]
        grad = self._zeros(state)
        grad["pos_y"] = np.full_like(y, 1.0 / y.size)
        return float(y.mean()), grad

    def grid_mass(self, state: State) -> float:
        """Total grid mass after P2G (transient diagnostic)."""
        return float(self._forward_parts(state)["gm"].sum())
