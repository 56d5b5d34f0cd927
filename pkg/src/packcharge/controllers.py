"""Charging policies: sensitivity-based linear MPC, nonlinear MPC realized as
sequential quadratic iterations over the same linearization, and the two-phase
CC-CV protocol.

Both MPC variants act on the per-module drained (bypass) currents, apply only
the first optimal move, and shift the plan with the final move duplicated.
Completed modules are pinned to full bypass and leave the decision vector.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dae, qp
from .dae import DaeError, DaeSystem, IntegratorConfig
from .pack import KIND_CURRENT, KIND_VOLTAGE, PackSystem
from .sensitivity import propagate_sensitivities

PHASE_CC = 0
PHASE_CV = 1
PHASE_DONE = 2


@dataclass
class MpcConfig:
    """Battery-level MPC settings; defaults follow the reference experiment."""

    horizon: int = 3
    q_soc: float = 1e-2
    q_v: float = 0.0
    q_t: float = 0.0
    q_i: float = 0.0
    r: float = 1.78e-5
    r_reg: float | None = None       # defaults to r
    soc_ref: float = 100.0
    v_ref: float = 0.0
    t_ref: float = 0.0
    i_ref: float = 0.0
    u_ref: float = 0.0
    v_min: float = 2.7
    v_max: float = 4.2
    t_min: float = 253.15
    t_max: float = 318.15
    i_min_c: float = -1.5            # cell current lower bound in C-rate
    i_max: float = 0.0
    soc_min: float = 0.0
    soc_max: float = 100.0
    slack_v: float = 1e4
    slack_t: float = 1e4
    slack_i: float = 1e4
    slack_soc: float = 1e4
    sqp_max_iter: int = 25
    sqp_tol: float = 1e-8
    # absolute-only KKT tolerance: the input weight r is tiny, so the QP's
    # flat directions need tight stationarity for a well-defined first move
    qp_tol_abs: float = 1e-7
    qp_tol_rel: float = 0.0
    qp_max_iter: int = 20000

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.r <= 0:
            raise ValueError("input weight r must be strictly positive")


@dataclass
class MpcWeights:
    """Stacked diagonal weights, references and limits for a generic system."""

    q: np.ndarray
    r: np.ndarray
    r_reg: np.ndarray
    y_ref: np.ndarray
    u_ref: np.ndarray
    y_lb: np.ndarray
    y_ub: np.ndarray
    u_lb: np.ndarray
    u_ub: np.ndarray
    slack: np.ndarray


def build_pack_weights(system: PackSystem, cfg: MpcConfig, i_1c: float) -> MpcWeights:
    """Tile the per-cell [V, T, I, SOC] weights/limits over the pack."""
    n_cells, m = system.n_cells, system.m
    q_cell = np.array([cfg.q_v, cfg.q_t, cfg.q_i, cfg.q_soc])
    yr_cell = np.array([cfg.v_ref, cfg.t_ref, cfg.i_ref, cfg.soc_ref])
    lb_cell = np.array([cfg.v_min, cfg.t_min, cfg.i_min_c * i_1c, cfg.soc_min])
    ub_cell = np.array([cfg.v_max, cfg.t_max, cfg.i_max, cfg.soc_max])
    sl_cell = np.array([cfg.slack_v, cfg.slack_t, cfg.slack_i, cfg.slack_soc])
    r_reg = cfg.r if cfg.r_reg is None else cfg.r_reg
    return MpcWeights(
        q=np.tile(q_cell, n_cells),
        r=np.full(m, cfg.r),
        r_reg=np.full(m, r_reg),
        y_ref=np.tile(yr_cell, n_cells),
        u_ref=np.full(m, cfg.u_ref),
        y_lb=np.tile(lb_cell, n_cells),
        y_ub=np.tile(ub_cell, n_cells),
        u_lb=np.zeros(m),
        u_ub=np.full(m, system.config.I_ch),
        slack=np.tile(sl_cell, n_cells),
    )


@dataclass
class NominalPlan:
    """Nominal input sequence over the horizon plus the last applied move."""

    u: np.ndarray        # (H, m)
    u_prev: np.ndarray   # (m,)

    def copy(self):
        return NominalPlan(u=self.u.copy(), u_prev=self.u_prev.copy())


def shift_plan(u_star: np.ndarray, u_applied: np.ndarray) -> NominalPlan:
    """Receding-horizon update: drop the applied move, duplicate the final one."""
    u_next = np.vstack([u_star[1:], u_star[-1:]])
    return NominalPlan(u=u_next, u_prev=np.asarray(u_applied, dtype=float).copy())


def evaluate_cost(y_traj, u_seq, weights: MpcWeights, u_prev):
    """Soft-penalized tracking cost of a trajectory, split into components.

    Slack costs use the exact minimizer of the soft formulation: per output
    sample the optimal slack is the constraint violation, shared between the
    two sides.
    """
    y = np.atleast_2d(np.asarray(y_traj, dtype=float))
    u = np.atleast_2d(np.asarray(u_seq, dtype=float))
    u_prev = np.asarray(u_prev, dtype=float)
    y_err = y - weights.y_ref
    track = float(np.sum(weights.q * y_err**2))
    u_err = u - weights.u_ref
    inp = float(np.sum(weights.r * u_err**2))
    du = np.diff(np.vstack([u_prev[None, :], u]), axis=0)
    reg = float(np.sum(weights.r_reg * du**2))
    viol = np.maximum(0.0, np.maximum(weights.y_lb - y, y - weights.y_ub))
    slack = float(np.sum(weights.slack * viol))
    total = track + inp + reg + slack
    return total, {"tracking": track, "input": inp, "regularization": reg, "slack": slack}


def initial_plan(system: DaeSystem, x0, weights: MpcWeights, horizon: int,
                 int_cfg: IntegratorConfig, v_margin=0.1, t_margin=5.0) -> NominalPlan:
    """Most-likely initial nominal sequence: zero bypass (full charger current).

    Falls back to half bypass if the zero-bypass prediction violates the
    voltage/temperature bounds grossly or cannot be integrated at all.
    """
    m = system.m
    u0 = np.tile(weights.u_lb, (horizon, 1))
    gross = False
    try:
        _, _, y = dae.simulate(x0, u0, horizon, system, int_cfg)
        over = y - weights.y_ub
        margins = np.full_like(weights.y_ub, np.inf)
        if isinstance(system, PackSystem):
            margins = np.tile([v_margin, t_margin, np.inf, np.inf], system.n_cells)
        gross = bool(np.any(over > margins))
    except (DaeError, ValueError):
        gross = True
    if gross:
        u0 = np.tile(0.5 * (weights.u_lb + weights.u_ub), (horizon, 1))
    return NominalPlan(u=u0, u_prev=u0[0].copy())


class _MpcBase:
    def __init__(self, system: DaeSystem, weights: MpcWeights, cfg: MpcConfig,
                 int_cfg: IntegratorConfig):
        self.system = system
        self.weights = weights
        self.cfg = cfg
        self.int_cfg = int_cfg
        self._warm = None
        self._warm_key = None

    def _forced_plan(self, plan: NominalPlan, free_mask, pinned_values):
        u_bar = np.clip(plan.u, self.weights.u_lb, self.weights.u_ub)
        if free_mask is not None and pinned_values is not None:
            u_bar = u_bar.copy()
            u_bar[:, ~free_mask] = pinned_values[~free_mask]
        return u_bar

    def _solve_qp(self, bundle, u_prev, free_mask):
        problem, info = qp.condense(
            bundle, self.weights.q, self.weights.r, self.weights.r_reg,
            self.weights.y_ref, self.weights.u_ref, self.weights.y_lb,
            self.weights.y_ub, self.weights.u_lb, self.weights.u_ub,
            self.weights.slack, u_prev, free_mask)
        key = (problem.dim, problem.n_rows)
        warm = self._warm if self._warm_key == key else None
        sol = qp.solve(problem, tol_abs=self.cfg.qp_tol_abs,
                       tol_rel=self.cfg.qp_tol_rel, max_iter=self.cfg.qp_max_iter,
                       warm_start=warm)
        if sol.status == "solved":
            self._warm = (sol.w_star, sol.duals)
            self._warm_key = key
        return sol, info


class SmpcController(_MpcBase):
    """One sensitivity linearization and one QP per step."""

    def step(self, x_k, plan: NominalPlan, free_mask=None, pinned_values=None):
        t0 = time.perf_counter()
        h = self.cfg.horizon
        u_bar = self._forced_plan(plan, free_mask, pinned_values)
        free = np.ones(self.system.m, dtype=bool) if free_mask is None else free_mask
        diag = {"controller": "smpc", "qp_status": "skipped", "qp_iterations": 0,
                "cost": np.nan, "slack_max": 0.0, "fallback": False}
        if not free.any():
            u_star = u_bar
        else:
            bundle = propagate_sensitivities(x_k, u_bar, h, self.system, self.int_cfg)
            try:
                sol, info = self._solve_qp(bundle, plan.u_prev, free)
            except qp.QpError:
                sol, info = None, None
            if sol is None or sol.status == "primal_infeasible":
                # nominal plan respects the input box, keep it and flag
                u_star = u_bar
                diag["fallback"] = True
                diag["qp_status"] = "failed" if sol is None else sol.status
            else:
                du, slacks = info.decode(sol.w_star)
                u_star = np.clip(u_bar + du, self.weights.u_lb, self.weights.u_ub)
                diag.update(qp_status=sol.status, qp_iterations=sol.iterations,
                            cost=sol.objective + info.objective_offset,
                            slack_max=float(slacks.max(initial=0.0)))
        u_apply = u_star[0].copy()
        plan_next = shift_plan(u_star, u_apply)
        diag["wall_time"] = time.perf_counter() - t0
        return u_apply, plan_next, diag


class NmpcController(_MpcBase):
    """Sequential quadratic iterations with a backtracking line search on the
    true soft-penalized nonlinear cost; converges to a KKT point of the
    receding-horizon nonlinear program."""

    def step(self, x_k, plan: NominalPlan, free_mask=None, pinned_values=None):
        t0 = time.perf_counter()
        h = self.cfg.horizon
        u_cur = self._forced_plan(plan, free_mask, pinned_values)
        free = np.ones(self.system.m, dtype=bool) if free_mask is None else free_mask
        diag = {"controller": "nmpc", "qp_status": "skipped", "qp_iterations": 0,
                "cost": np.nan, "slack_max": 0.0, "fallback": False,
                "sqp_iterations": 0, "converged": True}
        if free.any():
            converged = False
            merit_cur = None
            for it in range(1, self.cfg.sqp_max_iter + 1):
                diag["sqp_iterations"] = it
                bundle = propagate_sensitivities(x_k, u_cur, h, self.system, self.int_cfg)
                merit_cur, comps = evaluate_cost(bundle.y_nom, u_cur, self.weights,
                                                 plan.u_prev)
                try:
                    sol, info = self._solve_qp(bundle, plan.u_prev, free)
                except qp.QpError:
                    sol = None
                if sol is None or sol.status == "primal_infeasible":
                    diag["fallback"] = True
                    break
                diag.update(qp_status=sol.status, qp_iterations=sol.iterations)
                du, slacks = info.decode(sol.w_star)
                diag["slack_max"] = float(slacks.max(initial=0.0))
                if np.max(np.abs(du)) <= self.cfg.sqp_tol:
                    converged = True
                    break
                # the linearized problem's value at du* gives the exact model
                # reduction for the Armijo test
                model_red = max(merit_cur - (sol.objective + info.objective_offset), 0.0)
                alpha, accepted = 1.0, False
                for _ in range(8):
                    u_try = np.clip(u_cur + alpha * du, self.weights.u_lb,
                                    self.weights.u_ub)
                    try:
                        _, _, y_try = dae.simulate(x_k, u_try, h, self.system,
                                                   self.int_cfg)
                        merit_try, _ = evaluate_cost(y_try, u_try, self.weights,
                                                     plan.u_prev)
                    except (DaeError, ValueError):
                        merit_try = np.inf
                    if merit_try <= merit_cur - 1e-4 * alpha * model_red:
                        accepted = True
                        break
                    alpha *= 0.5
                if not accepted:
                    # no sufficient descent left along the quadratic model's move
                    converged = True
                    break
                u_cur = u_try
                merit_cur = merit_try
            diag["converged"] = converged
            diag["cost"] = merit_cur if merit_cur is not None else np.nan
        u_apply = u_cur[0].copy()
        plan_next = shift_plan(u_cur, u_apply)
        diag["wall_time"] = time.perf_counter() - t0
        return u_apply, plan_next, diag


@dataclass
class CcCvConfig:
    i_cc: float              # constant module current, A (positive magnitude)
    v_threshold: float = 4.15
    i_cutoff: float = 0.0    # module current magnitude ending CV, A

    def __post_init__(self):
        if self.i_cc <= 0:
            raise ValueError("i_cc must be positive")
        if self.i_cutoff < 0:
            raise ValueError("i_cutoff must be nonnegative")


class CcCvController:
    """Per-module CC then CV state machine over the pack's constraint kinds.

    CC commands the module total current -i_cc; CV clamps the module voltage
    to the threshold; a module is done once its measured current magnitude
    falls to the cutoff, after which it carries zero current.
    """

    def __init__(self, n_modules: int, cfg: CcCvConfig):
        self.cfg = cfg
        self.phases = np.full(n_modules, PHASE_CC, dtype=int)

    def command(self):
        kinds = np.where(self.phases == PHASE_CV, KIND_VOLTAGE, KIND_CURRENT)
        u_cmd = np.where(self.phases == PHASE_CC, -self.cfg.i_cc, 0.0)
        v_clamp = np.full(self.phases.shape, self.cfg.v_threshold)
        return kinds, u_cmd, v_clamp

    def update_phases(self, module_voltage, module_current) -> bool:
        """Advance phases from a measurement under the current command."""
        v = np.asarray(module_voltage, dtype=float)
        i = np.asarray(module_current, dtype=float)
        before = self.phases.copy()
        to_cv = (self.phases == PHASE_CC) & (v >= self.cfg.v_threshold - 1e-12)
        self.phases[to_cv] = PHASE_CV
        to_done = (before == PHASE_CV) & (np.abs(i) <= self.cfg.i_cutoff)
        self.phases[to_done] = PHASE_DONE
        return bool(np.any(self.phases != before))

    @property
    def all_done(self) -> bool:
        return bool(np.all(self.phases == PHASE_DONE))
