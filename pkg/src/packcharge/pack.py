"""Series/parallel battery pack as a semi-explicit index-1 DAE.

N series modules of M parallel cells each. Differential states are the
concatenated cell states (module-major); algebraic variables are the cell
currents; inputs are the per-module drained (bypass) currents. Within a
module all cell voltages are equal, and the charger current balance closes
each module's current sum.

Module constraint rows come in three kinds so the same machinery also hosts
the CC-CV protocol:
  0: charger KCL with bypass input   I_ch + sum_j I_ij - u_i = 0
  1: commanded module current        sum_j I_ij - u_i = 0
  2: voltage clamp                   V_i1 - v_clamp_i = 0
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cell as cellmod
from .cell import CellParamArrays
from .dae import DaeSystem, IndexOneError, JacobianBlocks
from .params import CellParams

KIND_BYPASS = 0
KIND_CURRENT = 1
KIND_VOLTAGE = 2

N_OUT_PER_CELL = 4  # [V, T, I, SOC]


@dataclass
class PackConfig:
    """Pack layout plus the per-cell parameter records (module-major)."""

    N: int
    M: int
    I_ch: float
    cells: list

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise ValueError("N and M must be >= 1")
        if self.I_ch < 0:
            raise ValueError("I_ch must be nonnegative")
        if len(self.cells) != self.N * self.M:
            raise ValueError(f"expected {self.N * self.M} cell records, got {len(self.cells)}")


class PackSystem(DaeSystem):
    """DAE view of the pack; evaluations are vectorized over all cells."""

    def __init__(self, config: PackConfig):
        self.config = config
        self.N = config.N
        self.M = config.M
        self.n_cells = config.N * config.M
        self.pa = CellParamArrays(config.cells)
        self.P = self.pa.P
        self.n_x_cell = self.pa.n_x
        self.n = self.n_cells * self.n_x_cell
        self.m = config.N
        self.s = self.n_cells
        self.p = self.n_cells * N_OUT_PER_CELL
        self.row_kinds = np.full(config.N, KIND_BYPASS, dtype=int)
        self.v_clamp = np.zeros(config.N)

    def set_module_constraints(self, kinds, v_clamp=None):
        kinds = np.asarray(kinds, dtype=int)
        if kinds.shape != (self.N,):
            raise ValueError("kinds must have one entry per module")
        self.row_kinds = kinds.copy()
        if v_clamp is not None:
            self.v_clamp = np.broadcast_to(np.asarray(v_clamp, dtype=float), (self.N,)).copy()

    # state bookkeeping -----------------------------------------------------
    def states_matrix(self, x):
        return np.asarray(x, dtype=float).reshape(self.n_cells, self.n_x_cell)

    def state_scale(self):
        return np.tile(self.pa.state_scale(), self.n_cells)

    def default_z_guess(self, x, u):
        u = np.asarray(u, dtype=float)
        per_module = np.where(
            self.row_kinds == KIND_BYPASS, (u - self.config.I_ch) / self.M,
            np.where(self.row_kinds == KIND_CURRENT, u / self.M, 0.0),
        )
        return np.repeat(per_module, self.M)

    # DAE evaluators --------------------------------------------------------
    def f(self, x, u, z):
        states = self.states_matrix(x)
        return cellmod.cell_rhs(states, z, self.pa, clip=True).ravel()

    def h(self, x, u, z):
        states = self.states_matrix(x)
        v, _, _ = cellmod.terminal_voltage(states, z, self.pa, clip=True)
        return self._residual_from_voltages(v, np.asarray(u, dtype=float), z)

    def fh(self, x, u, z):
        """Combined rhs/constraint evaluation with a single voltage solve."""
        states = self.states_matrix(x)
        z = np.asarray(z, dtype=float)
        dth, dqp, dqn = cellmod.solid_phase_rates(states, z, self.pa)
        dce = cellmod.electrolyte_rates(states, z, self.pa)
        v, up, un = cellmod.terminal_voltage(states, z, self.pa, clip=True)
        dT = cellmod.thermal_rate(states, z, v, up, un, self.pa)
        f = np.empty_like(states)
        f[:, 0] = dth
        f[:, 1] = dqp
        f[:, 2] = dqn
        f[:, 3:3 + 3 * self.P] = dce
        f[:, -1] = dT
        return f.ravel(), self._residual_from_voltages(v, np.asarray(u, dtype=float), z)

    def _residual_from_voltages(self, v, u, z):
        N, M = self.N, self.M
        v_mod = v.reshape(N, M)
        z_mod = np.asarray(z, dtype=float).reshape(N, M)
        res = np.empty((N, M))
        if M > 1:
            res[:, : M - 1] = v_mod[:, :-1] - v_mod[:, 1:]
        last = np.where(
            self.row_kinds == KIND_BYPASS, self.config.I_ch + z_mod.sum(axis=1) - u,
            np.where(self.row_kinds == KIND_CURRENT, z_mod.sum(axis=1) - u,
                     v_mod[:, 0] - self.v_clamp),
        )
        res[:, M - 1] = last
        return res.ravel()

    def g(self, x, u, z):
        states = self.states_matrix(x)
        v, _, _ = cellmod.terminal_voltage(states, z, self.pa, clip=False)
        soc = cellmod.soc_of(cellmod.anode_from_cathode(states[:, 0], self.pa), self.pa)
        out = np.empty((self.n_cells, N_OUT_PER_CELL))
        out[:, 0] = v
        out[:, 1] = states[:, -1]
        out[:, 2] = z
        out[:, 3] = soc
        return out.ravel()

    # spec-facing aliases ----------------------------------------------------
    def algebraic_residual(self, x, z, u):
        return self.h(x, u, z)

    def pack_rhs(self, x, z, u):
        return self.f(x, u, z)

    def pack_output(self, x, z, u):
        return self.g(x, u, z)

    # Jacobians ---------------------------------------------------------------
    def jacobians(self, x, u, z) -> JacobianBlocks:
        """Dense block assembly (audit/tests path; hot loops use the operator)."""
        states = self.states_matrix(x)
        z = np.asarray(z, dtype=float)
        f_x_c, f_i_c, vg = cellmod.rhs_jacobian(states, z, self.pa, clip=True)
        NC, nxc = self.n_cells, self.n_x_cell
        N, M = self.N, self.M
        n, s, m, p = self.n, self.s, self.m, self.p

        F_x = np.zeros((n, n))
        F_z = np.zeros((n, s))
        for c in range(NC):
            sl = slice(c * nxc, (c + 1) * nxc)
            F_x[sl, sl] = f_x_c[c]
            F_z[sl, c] = f_i_c[c]
        F_u = np.zeros((n, m))

        dv_dx = vg["dV_dx"]
        dv_di = vg["dV_dI"]
        H_x = np.zeros((s, n))
        H_z = np.zeros((s, s))
        H_u = np.zeros((s, m))
        for i in range(N):
            for j in range(M - 1):
                r = i * M + j
                c0 = i * M + j
                c1 = i * M + j + 1
                H_x[r, c0 * nxc:(c0 + 1) * nxc] = dv_dx[c0]
                H_x[r, c1 * nxc:(c1 + 1) * nxc] = -dv_dx[c1]
                H_z[r, c0] = dv_di[c0]
                H_z[r, c1] = -dv_di[c1]
            r = i * M + M - 1
            kind = self.row_kinds[i]
            if kind in (KIND_BYPASS, KIND_CURRENT):
                H_z[r, i * M:(i + 1) * M] = 1.0
                H_u[r, i] = -1.0
            else:
                c0 = i * M
                H_x[r, c0 * nxc:(c0 + 1) * nxc] = dv_dx[c0]
                H_z[r, c0] = dv_di[c0]

        G_x = np.zeros((p, n))
        G_z = np.zeros((p, s))
        G_u = np.zeros((p, m))
        dsoc = 100.0 / self.pa.dtheta_p
        for c in range(NC):
            base = c * N_OUT_PER_CELL
            sl = slice(c * nxc, (c + 1) * nxc)
            G_x[base + 0, sl] = dv_dx[c]
            G_x[base + 1, c * nxc + nxc - 1] = 1.0
            G_x[base + 3, c * nxc] = dsoc[c]
            G_z[base + 0, c] = dv_di[c]
            G_z[base + 2, c] = 1.0
        return JacobianBlocks(F_x, F_z, F_u, H_x, H_z, H_u, G_x, G_z, G_u)

    # structured solves -------------------------------------------------------
    def _hz_modules(self, dv_di):
        """Module-blocked algebraic Jacobian, shape (N, M, M)."""
        N, M = self.N, self.M
        dv = dv_di.reshape(N, M)
        hz = np.zeros((N, M, M))
        for j in range(M - 1):
            hz[:, j, j] = dv[:, j]
            hz[:, j, j + 1] = -dv[:, j + 1]
        bypass = self.row_kinds != KIND_VOLTAGE
        hz[bypass, M - 1, :] = 1.0
        hz[~bypass, M - 1, 0] = dv[~bypass, 0]
        return hz

    def solve_hz(self, x, u, z, rhs):
        states = self.states_matrix(x)
        vg = cellmod.voltage_gradients(states, z, self.pa, clip=True)
        hz = self._hz_modules(vg["dV_dI"])
        rhs = np.asarray(rhs, dtype=float)
        single = rhs.ndim == 1
        rhs2 = rhs.reshape(self.N, self.M, -1)
        try:
            sol = np.linalg.solve(hz, rhs2)
        except np.linalg.LinAlgError as exc:
            raise IndexOneError(f"module algebraic Jacobian singular: {exc}") from exc
        out = sol.reshape(self.s, -1)
        return out[:, 0] if single else out

    def hz_condition(self, x, u, z):
        """Largest per-module condition number of H_z (index-1 diagnostic)."""
        states = self.states_matrix(x)
        vg = cellmod.voltage_gradients(states, z, self.pa, clip=True)
        hz = self._hz_modules(vg["dV_dI"])
        return float(np.max(np.linalg.cond(hz)))

    def newton_operator(self, x, u, z, dt):
        states = self.states_matrix(x)
        f_x_c, f_i_c, vg = cellmod.rhs_jacobian(states, z, self.pa, clip=True)
        return PackNewtonOperator(self, f_x_c, f_i_c, vg, dt)

    def structural_hu(self):
        """H_u is constant: -1 on current-balance rows, 0 on clamp rows."""
        hu = np.zeros((self.s, self.m))
        for i in range(self.N):
            if self.row_kinds[i] != KIND_VOLTAGE:
                hu[i * self.M + self.M - 1, i] = -1.0
        return hu

    def input_coupling(self, x, u, z):
        return np.zeros((self.n, self.m)), self.structural_hu()

    def point_maps(self, x, u, z):
        states = self.states_matrix(x)
        vg = cellmod.voltage_gradients(states, z, self.pa, clip=True)
        return PackPointMaps(self, vg)


class PackPointMaps:
    """Structured H/G maps at a nominal point, batched over cells/modules."""

    def __init__(self, system: PackSystem, vg):
        self.sys = system
        self.dv_dx = vg["dV_dx"]
        self.dv_di = vg["dV_dI"]
        self._hz = system._hz_modules(self.dv_di)

    def hx_dot(self, v):
        sysm = self.sys
        N, M, nxc = sysm.N, sysm.M, sysm.n_x_cell
        k = v.shape[1]
        per_cell = np.einsum("cx,cxk->ck", self.dv_dx,
                             v.reshape(sysm.n_cells, nxc, k)).reshape(N, M, k)
        out = np.zeros((N, M, k))
        if M > 1:
            out[:, : M - 1, :] = per_cell[:, :-1, :] - per_cell[:, 1:, :]
        clamp = sysm.row_kinds == KIND_VOLTAGE
        out[clamp, M - 1, :] = per_cell[clamp, 0, :]
        return out.reshape(sysm.s, k)

    def hz_solve(self, rhs):
        sysm = self.sys
        rhs3 = np.asarray(rhs, dtype=float).reshape(sysm.N, sysm.M, -1)
        try:
            sol = np.linalg.solve(self._hz, rhs3)
        except np.linalg.LinAlgError as exc:
            raise IndexOneError(f"module algebraic Jacobian singular: {exc}") from exc
        return sol.reshape(sysm.s, -1)

    def hu(self):
        return self.sys.structural_hu()

    def gx_dot(self, v):
        sysm = self.sys
        nc, nxc = sysm.n_cells, sysm.n_x_cell
        k = v.shape[1]
        v3 = v.reshape(nc, nxc, k)
        out = np.zeros((nc, N_OUT_PER_CELL, k))
        out[:, 0, :] = np.einsum("cx,cxk->ck", self.dv_dx, v3)
        out[:, 1, :] = v3[:, -1, :]
        out[:, 3, :] = (100.0 / sysm.pa.dtheta_p)[:, None] * v3[:, 0, :]
        return out.reshape(sysm.p, k)

    def gz_dot(self, w):
        sysm = self.sys
        k = w.shape[1]
        out = np.zeros((sysm.n_cells, N_OUT_PER_CELL, k))
        out[:, 0, :] = self.dv_di[:, None] * w.reshape(sysm.n_cells, k)
        out[:, 2, :] = w.reshape(sysm.n_cells, k)
        return out.reshape(sysm.p, k)

    def gu(self):
        return None


class PackNewtonOperator:
    """Schur-complement solve of the bordered Newton matrix.

    The cell blocks A_c = I - dt*F_x,c are independent, the algebraic rows
    couple cells only within a module, so eliminating the differential states
    leaves one MxM system per module. All factorizations are batched.
    """

    def __init__(self, system: PackSystem, f_x_c, f_i_c, vg, dt):
        self.sys = system
        NC, nxc = system.n_cells, system.n_x_cell
        self.A = np.broadcast_to(np.eye(nxc), (NC, nxc, nxc)) - dt * f_x_c
        self.B = -dt * f_i_c                       # (NC, nxc)
        self.dv_dx = vg["dV_dx"]                   # (NC, nxc)
        self.dv_di = vg["dV_dI"]                   # (NC,)
        try:
            self.W = np.linalg.solve(self.A, self.B[:, :, None])  # (NC, nxc, 1)
        except np.linalg.LinAlgError as exc:
            raise IndexOneError(f"cell step matrix singular: {exc}") from exc
        self.S = self._schur()

    def _schur(self):
        sysm = self.sys
        N, M = sysm.N, sysm.M
        hz = sysm._hz_modules(self.dv_di)
        # H_x @ W contributions per cell
        hw = np.einsum("cx,cx->c", self.dv_dx, self.W[:, :, 0]).reshape(N, M)
        S = hz.copy()
        for j in range(M - 1):
            S[:, j, j] -= hw[:, j]
            S[:, j, j + 1] += hw[:, j + 1]
        clamp = sysm.row_kinds == KIND_VOLTAGE
        S[clamp, M - 1, 0] -= hw[clamp, 0]
        return S

    def _hx_dot(self, p):
        """H_x applied to per-cell vectors p of shape (NC, nxc, k)."""
        sysm = self.sys
        N, M = sysm.N, sysm.M
        k = p.shape[2]
        per_cell = np.einsum("cx,cxk->ck", self.dv_dx, p).reshape(N, M, k)
        out = np.zeros((N, M, k))
        if M > 1:
            out[:, : M - 1, :] = per_cell[:, :-1, :] - per_cell[:, 1:, :]
        clamp = sysm.row_kinds == KIND_VOLTAGE
        out[clamp, M - 1, :] = per_cell[clamp, 0, :]
        return out

    def solve(self, bx, bh):
        sysm = self.sys
        NC, nxc = sysm.n_cells, sysm.n_x_cell
        N, M = sysm.N, sysm.M
        bx = np.asarray(bx, dtype=float)
        single = bx.ndim == 1
        k = 1 if single else bx.shape[1]
        bx3 = bx.reshape(NC, nxc, k)
        bh3 = np.asarray(bh, dtype=float).reshape(N, M, k)

        p = np.linalg.solve(self.A, bx3)
        rhs = bh3 - self._hx_dot(p)
        try:
            dz_mod = np.linalg.solve(self.S, rhs)
        except np.linalg.LinAlgError as exc:
            raise IndexOneError(f"module Schur complement singular: {exc}") from exc
        dz_cell = dz_mod.reshape(NC, 1, k)
        dx = p - self.W * dz_cell
        dx2 = dx.reshape(sysm.n, k)
        dz2 = dz_mod.reshape(sysm.s, k)
        if single:
            return dx2[:, 0], dz2[:, 0]
        return dx2, dz2


@dataclass
class CompletionState:
    """Per-module charge-completion flags and first-trigger times."""

    done: np.ndarray
    t_done: np.ndarray

    @classmethod
    def fresh(cls, n_modules: int) -> "CompletionState":
        return cls(done=np.zeros(n_modules, dtype=bool),
                   t_done=np.full(n_modules, np.nan))

    @property
    def all_done(self) -> bool:
        return bool(self.done.all())


def apply_completion(soc_cells, completion: CompletionState, config: PackConfig,
                     soc_target: float, tol: float, t_now: float):
    """Mark modules whose slowest cell reached the target; pin their bypass.

    Returns the per-module input override (I_ch where complete, nan where the
    controller stays free) and the updated completion state. Flags never
    clear once set.
    """
    soc_mod = np.asarray(soc_cells, dtype=float).reshape(config.N, config.M)
    reached = soc_mod.min(axis=1) >= soc_target - tol
    newly = reached & ~completion.done
    done = completion.done | reached
    t_done = completion.t_done.copy()
    t_done[newly] = t_now
    override = np.where(done, config.I_ch, np.nan)
    return override, CompletionState(done=done, t_done=t_done)


def uniform_pack(template: CellParams, n_modules: int, m_parallel: int,
                 i_ch: float) -> PackConfig:
    cells = [template] * (n_modules * m_parallel)
    return PackConfig(N=n_modules, M=m_parallel, I_ch=i_ch, cells=cells)
