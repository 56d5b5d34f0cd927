"""Forward sensitivities of the DAE trajectories to piecewise-constant input
moves, co-integrated with the nominal model.

For each injection sample t_k the forced linear DAE

    Sx' = F_x Sx + F_z Sz + F_u w(t),   0 = H_x Sx + H_z Sz + H_u w(t)

is integrated with the same implicit scheme and substeps as the states, where
w(t) is the unit window that is 1 on [t_k, t_k + Ts) and 0 elsewhere. Because
the discretized recursion shares its matrix with the Newton step, one
factorization per substep propagates every injection column at once, and the
resulting operators are exactly the derivative of the discrete integration
map. Sampled at the controller grid they form block lower-triangular
operators mapping stacked input deviations to state/algebraic/output
deviations around the nominal trajectory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dae import DaeSystem, IntegratorConfig, JacobianBlocks, _newton_step, consistent_init


@dataclass
class SensitivityBundle:
    """Nominal trajectories plus stacked response operators over a horizon.

    x_sens has shape ((H+1)*n, H*m); block row a, block column k holds the
    sensitivity of x(t_a) to the input applied on [t_k, t_k + Ts). Strictly
    upper blocks are zero (causality); the diagonal x blocks are zero while
    the z/y diagonals carry the instantaneous algebraic response.
    """

    horizon: int
    ts: float
    u_nom: np.ndarray      # (H, m)
    x_nom: np.ndarray      # (H+1, n)
    z_nom: np.ndarray      # (H+1, s)
    y_nom: np.ndarray      # (H+1, p)
    x_sens: np.ndarray     # ((H+1)*n, H*m)
    z_sens: np.ndarray     # ((H+1)*s, H*m)
    y_sens: np.ndarray     # ((H+1)*p, H*m)

    @property
    def dims(self):
        return self.x_nom.shape[1], self.u_nom.shape[1], self.z_nom.shape[1], self.y_nom.shape[1]


class _DensePointMaps:
    """Linear maps of the algebraic/output equations at one nominal point."""

    def __init__(self, jb: JacobianBlocks):
        self.jb = jb

    def hx_dot(self, v):
        return self.jb.H_x @ v

    def hz_solve(self, rhs):
        return np.linalg.solve(self.jb.H_z, rhs) if self.jb.H_z.size else np.zeros_like(rhs)

    def hu(self):
        return self.jb.H_u

    def gx_dot(self, v):
        return self.jb.G_x @ v

    def gz_dot(self, w):
        return self.jb.G_z @ w

    def gu(self):
        return self.jb.G_u


def _point_maps(system: DaeSystem, x, u, z):
    custom = getattr(system, "point_maps", None)
    if custom is not None:
        return custom(x, u, z)
    return _DensePointMaps(system.jacobians(x, u, z))


def _input_coupling(system: DaeSystem, x, u, z):
    custom = getattr(system, "input_coupling", None)
    if custom is not None:
        return custom(x, u, z)
    jb = system.jacobians(x, u, z)
    return jb.F_u, jb.H_u


def jacobians_at(x, z, u, system: DaeSystem) -> JacobianBlocks:
    """All nine Jacobian blocks of the system at a consistent point."""
    return system.jacobians(x, u, z)


def propagate_sensitivities(x0, u_seq, horizon, system: DaeSystem,
                            cfg: IntegratorConfig, z_guess=None) -> SensitivityBundle:
    """Integrate the nominal trajectory and all injection columns together."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n, m, s, p = system.n, system.m, system.s, system.p
    u_arr = np.asarray(u_seq, dtype=float).reshape(horizon, m)
    ncols = horizon * m
    dt = cfg.ts / cfg.substeps

    x_nom = np.empty((horizon + 1, n))
    z_nom = np.empty((horizon + 1, s))
    y_nom = np.empty((horizon + 1, p))
    x_sens = np.zeros(((horizon + 1) * n, ncols))
    z_sens = np.zeros(((horizon + 1) * s, ncols))
    y_sens = np.zeros(((horizon + 1) * p, ncols))

    x = np.asarray(x0, dtype=float).copy()
    z = consistent_init(x, u_arr[0], system, cfg, z_guess=z_guess)
    sx = np.zeros((n, ncols))

    def record(a, u_active, inject_block):
        maps = _point_maps(system, x, u_active, z)
        rhs = -maps.hx_dot(sx) if s else np.zeros((0, ncols))
        if s and inject_block is not None:
            cols = slice(inject_block * m, (inject_block + 1) * m)
            rhs[:, cols] -= maps.hu()
        sz = maps.hz_solve(rhs) if s else np.zeros((0, ncols))
        sy = maps.gx_dot(sx) + (maps.gz_dot(sz) if s else 0.0)
        if inject_block is not None:
            gu = maps.gu()
            if gu is not None and np.asarray(gu).size:
                cols = slice(inject_block * m, (inject_block + 1) * m)
                sy[:, cols] += gu
        x_nom[a] = x
        z_nom[a] = z
        y_nom[a] = system.g(x, u_active, z)
        x_sens[a * n:(a + 1) * n] = sx
        z_sens[a * s:(a + 1) * s] = sz
        y_sens[a * p:(a + 1) * p] = sy

    for a in range(horizon):
        u_a = u_arr[a]
        if a > 0:
            z = consistent_init(x, u_a, system, cfg, z_guess=z)
        record(a, u_a, inject_block=a)
        cols = slice(a * m, (a + 1) * m)
        for _ in range(cfg.substeps):
            x, z, op = _newton_step(x, z, u_a, dt, system, cfg, return_operator=True)
            f_u, h_u = _input_coupling(system, x, u_a, z)
            bx = sx.copy()
            bx[:, cols] += dt * f_u
            bh = np.zeros((s, ncols))
            if s:
                bh[:, cols] = -h_u
            sx, _ = op.solve(bx, bh)

    # the final sample has no fresh move; the last input stays active in the
    # algebraic/output maps, so its block keeps the direct feedthrough
    record(horizon, u_arr[-1], inject_block=horizon - 1)
    return SensitivityBundle(
        horizon=horizon, ts=cfg.ts, u_nom=u_arr.copy(),
        x_nom=x_nom, z_nom=z_nom, y_nom=y_nom,
        x_sens=x_sens, z_sens=z_sens, y_sens=y_sens,
    )


def linear_predict(bundle: SensitivityBundle, delta_u_seq):
    """First-order prediction of trajectories under an input deviation."""
    h = bundle.horizon
    n, m, s, p = bundle.dims
    du = np.asarray(delta_u_seq, dtype=float).reshape(h * m)
    x_hat = bundle.x_nom + (bundle.x_sens @ du).reshape(h + 1, n)
    z_hat = bundle.z_nom + (bundle.z_sens @ du).reshape(h + 1, s)
    y_hat = bundle.y_nom + (bundle.y_sens @ du).reshape(h + 1, p)
    return x_hat, z_hat, y_hat


_DUMP_MAGIC = b"PCSENS01"


def write_response_dump(bundle: SensitivityBundle, path):
    """Binary dump of the three response operators (dims header, row-major)."""
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        for mat in (bundle.x_sens, bundle.z_sens, bundle.y_sens):
            fh.write(struct.pack("<qq", mat.shape[0], mat.shape[1]))
            fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def read_response_dump(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(_DUMP_MAGIC))
        if magic != _DUMP_MAGIC:
            raise ValueError("not a response-operator dump")
        mats = []
        for _ in range(3):
            rows, cols = struct.unpack("<qq", fh.read(16))
            data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
            mats.append(data.reshape(rows, cols).copy())
    return tuple(mats)
