"""Scenario loading, seeded cell-population sampling, closed-loop execution,
logging and the computational scaling benchmark.

A scenario fully determines a run: (scenario, seed) maps to a bit-identical
RunLog. Controller wall-clock times are recorded in the log and the scaling
tables but are kept out of the CSV export, whose step_time_s column carries
the simulated sample duration so exports stay byte-reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import dae
from .cell import anode_from_cathode, soc_of, theta_p_from_soc
from .controllers import (CcCvConfig, CcCvController, MpcConfig, NmpcController,
                          PHASE_DONE, SmpcController, build_pack_weights,
                          initial_plan)
from .dae import DaeError, IntegratorConfig, consistent_init
from .pack import (CompletionState, KIND_BYPASS, PackConfig, PackSystem,
                   apply_completion)
from .params import CellParams, kokam_reference

N_OUT = 4


@dataclass
class PopulationStats:
    """Gaussian cell-to-cell variability of the initial pack state."""

    soc0_mean: float = 50.0
    soc0_std: float = 10.0
    capacity_mean: float = 7.5
    capacity_std: float = 0.375
    r_sei_mean: float = 0.015
    r_sei_std: float = 0.00075
    c_e0: float = 1000.0
    t0: float | None = None          # defaults to the coolant temperature
    soc_bounds: tuple = (5.0, 95.0)

    def __post_init__(self):
        for name in ("soc0_std", "capacity_std", "r_sei_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class ScenarioConfig:
    """One closed-loop experiment definition."""

    n_modules: int = 2
    m_parallel: int = 2
    i_ch: float | None = None        # defaults to 1.5 * M * I_1C
    controller: str = "smpc"         # smpc | nmpc | cccv
    cell: CellParams = field(default_factory=kokam_reference)
    population: PopulationStats = field(default_factory=PopulationStats)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    cccv_i_cc_c_rate: float = 1.0    # I_cc = rate * M * I_1C
    cccv_v_threshold: float = 4.15
    cccv_i_cutoff_c_rate: float = 0.1
    substeps: int = 8
    newton_tol: float = 1e-9
    newton_max_iter: int = 20
    seed: int = 0
    ts: float = 40.0
    max_time: float = 8000.0
    soc_target: float = 100.0
    completion_tol: float = 0.1      # percent SOC

    def __post_init__(self):
        if self.controller not in ("smpc", "nmpc", "cccv"):
            raise ValueError(f"unknown controller {self.controller!r}")

    @property
    def i_1c(self) -> float:
        return self.cell.i_1c

    def charger_current(self) -> float:
        if self.i_ch is not None:
            return self.i_ch
        return 1.5 * self.m_parallel * self.i_1c

    def integrator_config(self) -> IntegratorConfig:
        return IntegratorConfig(ts=self.ts, substeps=self.substeps,
                                newton_tol=self.newton_tol,
                                newton_max_iter=self.newton_max_iter)

    def to_dict(self) -> dict:
        return {
            "pack": {"n_modules": self.n_modules, "m_parallel": self.m_parallel,
                     "i_ch": self.i_ch},
            "controller": self.controller,
            "cell": self.cell.to_dict(),
            "population": dataclasses.asdict(self.population),
            "mpc": dataclasses.asdict(self.mpc),
            "cccv": {"i_cc_c_rate": self.cccv_i_cc_c_rate,
                     "v_threshold": self.cccv_v_threshold,
                     "i_cutoff_c_rate": self.cccv_i_cutoff_c_rate},
            "integrator": {"substeps": self.substeps, "newton_tol": self.newton_tol,
                           "newton_max_iter": self.newton_max_iter},
            "run": {"seed": self.seed, "ts": self.ts, "max_time": self.max_time,
                    "soc_target": self.soc_target,
                    "completion_tol": self.completion_tol},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        kw = {}
        pack = data.get("pack", {})
        kw["n_modules"] = int(pack.get("n_modules", 2))
        kw["m_parallel"] = int(pack.get("m_parallel", 2))
        kw["i_ch"] = pack.get("i_ch")
        kw["controller"] = data.get("controller", "smpc")
        cell_data = data.get("cell")
        if cell_data is None:
            cell = kokam_reference()
        elif isinstance(cell_data, dict) and len(cell_data) < 10:
            cell = kokam_reference().replace(**cell_data)
        else:
            cell = CellParams.from_dict(cell_data)
        kw["cell"] = cell
        if "population" in data:
            pop = dict(data["population"])
            if "soc_bounds" in pop:
                pop["soc_bounds"] = tuple(pop["soc_bounds"])
            kw["population"] = PopulationStats(**pop)
        if "mpc" in data:
            kw["mpc"] = MpcConfig(**data["mpc"])
        cccv = data.get("cccv", {})
        kw["cccv_i_cc_c_rate"] = cccv.get("i_cc_c_rate", 1.0)
        kw["cccv_v_threshold"] = cccv.get("v_threshold", 4.15)
        kw["cccv_i_cutoff_c_rate"] = cccv.get("i_cutoff_c_rate", 0.1)
        integ = data.get("integrator", {})
        kw["substeps"] = int(integ.get("substeps", 8))
        kw["newton_tol"] = float(integ.get("newton_tol", 1e-9))
        kw["newton_max_iter"] = int(integ.get("newton_max_iter", 20))
        run = data.get("run", {})
        kw["seed"] = int(run.get("seed", 0))
        kw["ts"] = float(run.get("ts", 40.0))
        kw["max_time"] = float(run.get("max_time", 8000.0))
        kw["soc_target"] = float(run.get("soc_target", 100.0))
        kw["completion_tol"] = float(run.get("completion_tol", 0.1))
        return cls(**kw)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def load_scenario(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ScenarioConfig.from_dict(json.load(fh))


def save_scenario(scenario: ScenarioConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _truncated_normal(rng, mean, std, lo, hi, size, max_tries=1000):
    vals = rng.normal(mean, std, size)
    for _ in range(max_tries):
        bad = (vals < lo) | (vals > hi)
        if not bad.any():
            return vals
        vals[bad] = rng.normal(mean, std, int(bad.sum()))
    raise RuntimeError("truncated sampling did not converge; check the bounds")


def sample_population(template: CellParams, stats: PopulationStats, seed,
                      n_modules: int, m_parallel: int):
    """Draw per-cell initial SOC, capacity and film resistance; build x0.

    Sampling is truncated by resampling (SOC to its bounds, capacity and
    resistance to positive values). Electrolyte starts uniform, concentration
    fluxes at zero, temperature at the coolant value.
    """
    rng = np.random.default_rng(seed)
    n = n_modules * m_parallel
    soc0 = _truncated_normal(rng, stats.soc0_mean, stats.soc0_std,
                             stats.soc_bounds[0], stats.soc_bounds[1], n)
    caps = _truncated_normal(rng, stats.capacity_mean, stats.capacity_std,
                             1e-9, np.inf, n)
    rsei = _truncated_normal(rng, stats.r_sei_mean, stats.r_sei_std,
                             0.0, np.inf, n)
    cells = [template.replace(C_cap=float(c), R_sei=float(r))
             for c, r in zip(caps, rsei)]
    n_x = 4 + 3 * template.P
    t0 = template.T_sink if stats.t0 is None else stats.t0
    dtheta_p = template.theta100_p - template.theta0_p
    theta_p0 = template.theta0_p + soc0 / 100.0 * dtheta_p
    x0 = np.zeros((n, n_x))
    x0[:, 0] = theta_p0
    x0[:, 3:3 + 3 * template.P] = stats.c_e0
    x0[:, -1] = t0
    return cells, x0.ravel()


@dataclass
class RunLog:
    """Time-stamped closed-loop record plus summary quantities."""

    controller: str
    seed: int
    n_modules: int
    m_parallel: int
    ts: float
    t: np.ndarray                 # (K+1,)
    y: np.ndarray                 # (K+1, p) per-cell [V, T, I, SOC]
    u: np.ndarray                 # (K+1, m) applied bypass / module currents
    step_wall: np.ndarray         # controller wall seconds per sample
    qp_iterations: np.ndarray
    sqp_iterations: np.ndarray
    slack_qp: np.ndarray
    kcl_residual: np.ndarray
    hz_condition: np.ndarray
    electrolyte_total: np.ndarray  # (K+1, n_cells) weighted lithium per cell
    completion_times: np.ndarray   # (N,)
    completed: bool
    charging_time: float

    @property
    def n_cells(self):
        return self.n_modules * self.m_parallel

    def cell_outputs(self):
        return self.y.reshape(len(self.t), self.n_cells, N_OUT)

    def summary(self) -> dict:
        cells = self.cell_outputs()
        active = self.step_wall[:-1] if len(self.t) > 1 else self.step_wall
        drift = self.conservation_drift()
        return {
            "controller": self.controller,
            "seed": self.seed,
            "layout": f"{self.n_modules}x{self.m_parallel}",
            "completed": self.completed,
            "charging_time_s": self.charging_time,
            "peak_temperature_K": float(cells[:, :, 1].max()),
            "peak_voltage_V": float(cells[:, :, 0].max()),
            "mean_step_wall_s": float(np.mean(active)) if active.size else 0.0,
            "max_kcl_residual_A": float(np.max(self.kcl_residual)),
            "max_hz_condition": float(np.max(self.hz_condition)),
            "conservation_drift_rel": drift,
            "samples": int(len(self.t)),
        }

    def conservation_drift(self) -> float:
        tot = self.electrolyte_total.sum(axis=1)
        return float(np.max(np.abs(tot - tot[0])) / abs(tot[0]))


def _electrolyte_totals(system: PackSystem, x):
    states = system.states_matrix(x)
    ce = states[:, 3:3 + 3 * system.P]
    return np.sum(ce * system.pa.cons_weights, axis=1)


def _kcl_residual(system: PackSystem, y_flat, u):
    cells = y_flat.reshape(system.n_cells, N_OUT)
    i_mod = cells[:, 2].reshape(system.N, system.M).sum(axis=1)
    res = np.where(system.row_kinds == KIND_BYPASS,
                   system.config.I_ch + i_mod - u,
                   0.0)
    return float(np.max(np.abs(res)))


def run_closed_loop(scenario: ScenarioConfig, max_steps=None) -> RunLog:
    """Execute one charging experiment to completion or the time limit."""
    cells, x0 = sample_population(scenario.cell, scenario.population,
                                  scenario.seed, scenario.n_modules,
                                  scenario.m_parallel)
    pconfig = PackConfig(N=scenario.n_modules, M=scenario.m_parallel,
                         I_ch=scenario.charger_current(), cells=cells)
    system = PackSystem(pconfig)
    int_cfg = scenario.integrator_config()
    if max_steps is None:
        max_steps = int(math.ceil(scenario.max_time / scenario.ts))
    if scenario.controller == "cccv":
        return _run_cccv(scenario, system, x0, int_cfg, max_steps)
    return _run_mpc(scenario, system, x0, int_cfg, max_steps)


class _Recorder:
    def __init__(self, system: PackSystem, max_records: int):
        self.sysm = system
        self.t = np.zeros(max_records)
        self.y = np.zeros((max_records, system.p))
        self.u = np.zeros((max_records, system.m))
        self.step_wall = np.zeros(max_records)
        self.qp_iterations = np.zeros(max_records, dtype=int)
        self.sqp_iterations = np.zeros(max_records, dtype=int)
        self.slack_qp = np.zeros(max_records)
        self.kcl = np.zeros(max_records)
        self.hz_cond = np.zeros(max_records)
        self.etot = np.zeros((max_records, system.n_cells))
        self.k = 0

    def add(self, t, x, y, u, z, diag=None):
        k = self.k
        self.t[k] = t
        self.y[k] = y
        self.u[k] = u
        self.etot[k] = _electrolyte_totals(self.sysm, x)
        self.kcl[k] = _kcl_residual(self.sysm, y, u)
        self.hz_cond[k] = self.sysm.hz_condition(x, u, z)
        if diag is not None:
            self.step_wall[k] = diag.get("wall_time", 0.0)
            self.qp_iterations[k] = diag.get("qp_iterations", 0)
            self.sqp_iterations[k] = diag.get("sqp_iterations", 0)
            self.slack_qp[k] = diag.get("slack_max", 0.0)
        self.k += 1

    def finish(self, scenario, completion_times, completed, charging_time):
        k = self.k
        return RunLog(
            controller=scenario.controller, seed=scenario.seed,
            n_modules=scenario.n_modules, m_parallel=scenario.m_parallel,
            ts=scenario.ts,
            t=self.t[:k].copy(), y=self.y[:k].copy(), u=self.u[:k].copy(),
            step_wall=self.step_wall[:k].copy(),
            qp_iterations=self.qp_iterations[:k].copy(),
            sqp_iterations=self.sqp_iterations[:k].copy(),
            slack_qp=self.slack_qp[:k].copy(),
            kcl_residual=self.kcl[:k].copy(),
            hz_condition=self.hz_cond[:k].copy(),
            electrolyte_total=self.etot[:k].copy(),
            completion_times=completion_times.copy(),
            completed=completed, charging_time=charging_time,
        )


def _run_mpc(scenario, system, x0, int_cfg, max_steps):
    i_1c = scenario.i_1c
    weights = build_pack_weights(system, scenario.mpc, i_1c)
    ctrl_cls = SmpcController if scenario.controller == "smpc" else NmpcController
    controller = ctrl_cls(system, weights, scenario.mpc, int_cfg)
    plan = initial_plan(system, x0, weights, scenario.mpc.horizon, int_cfg)
    completion = CompletionState.fresh(system.N)
    rec = _Recorder(system, max_steps + 1)

    x = x0.copy()
    z_warm = None
    u_held = plan.u[0].copy()
    pa = system.pa
    for k in range(max_steps + 1):
        t_k = k * scenario.ts
        states = system.states_matrix(x)
        soc = soc_of(anode_from_cathode(states[:, 0], pa), pa)
        override, completion = apply_completion(soc, completion, system.config,
                                                scenario.soc_target,
                                                scenario.completion_tol, t_k)
        done = completion.all_done
        if done or k == max_steps:
            u_final = np.where(completion.done, system.config.I_ch, u_held)
            z = consistent_init(x, u_final, system, int_cfg, z_guess=z_warm)
            y = system.g(x, u_final, z)
            rec.add(t_k, x, y, u_final, z)
            charging_time = float(np.max(completion.t_done)) if done else float("nan")
            return rec.finish(scenario, completion.t_done, done, charging_time)
        free = ~completion.done
        pinned = np.where(completion.done, system.config.I_ch, 0.0)
        u_apply, plan, diag = controller.step(x, plan, free_mask=free,
                                              pinned_values=pinned)
        z = consistent_init(x, u_apply, system, int_cfg, z_guess=z_warm)
        y = system.g(x, u_apply, z)
        rec.add(t_k, x, y, u_apply, z, diag)
        z_warm = z
        u_held = u_apply
        dt = scenario.ts / int_cfg.substeps
        for _ in range(int_cfg.substeps):
            x, z_warm = dae.step(x, z_warm, u_apply, dt, system, int_cfg)
    raise RuntimeError("unreachable")


def _run_cccv(scenario, system, x0, int_cfg, max_steps):
    i_1c = scenario.i_1c
    m = scenario.m_parallel
    cfg = CcCvConfig(i_cc=scenario.cccv_i_cc_c_rate * m * i_1c,
                     v_threshold=scenario.cccv_v_threshold,
                     i_cutoff=scenario.cccv_i_cutoff_c_rate * m * i_1c)
    controller = CcCvController(system.N, cfg)
    completion_times = np.full(system.N, np.nan)
    rec = _Recorder(system, max_steps + 1)

    x = x0.copy()
    z_warm = None
    for k in range(max_steps + 1):
        t_k = k * scenario.ts
        kinds, u_cmd, v_clamp = controller.command()
        system.set_module_constraints(kinds, v_clamp)
        z = consistent_init(x, u_cmd, system, int_cfg, z_guess=z_warm)
        y = system.g(x, u_cmd, z)
        cells = y.reshape(system.n_cells, N_OUT)
        v_mod = cells[:, 0].reshape(system.N, system.M)[:, 0]
        i_mod = cells[:, 2].reshape(system.N, system.M).sum(axis=1)
        changed = controller.update_phases(v_mod, i_mod)
        newly_done = (controller.phases == PHASE_DONE) & np.isnan(completion_times)
        completion_times[newly_done] = t_k
        if changed:
            kinds, u_cmd, v_clamp = controller.command()
            system.set_module_constraints(kinds, v_clamp)
            z = consistent_init(x, u_cmd, system, int_cfg, z_guess=z)
            y = system.g(x, u_cmd, z)
            cells = y.reshape(system.n_cells, N_OUT)
            i_mod = cells[:, 2].reshape(system.N, system.M).sum(axis=1)
        rec.add(t_k, x, y, i_mod, z)
        done = controller.all_done
        if done or k == max_steps:
            charging_time = float(np.max(completion_times)) if done else float("nan")
            return rec.finish(scenario, completion_times, done, charging_time)
        z_warm = z
        dt = scenario.ts / int_cfg.substeps
        for _ in range(int_cfg.substeps):
            x, z_warm = dae.step(x, z_warm, u_cmd, dt, system, int_cfg)
    raise RuntimeError("unreachable")


# ---------------------------------------------------------------------------
# CSV export


def export_csv(log: RunLog, path):
    """One row per sample: t, per-cell V/T/I/SOC (module-major), per-module
    input, and the simulated step duration. Byte-reproducible for a given
    (scenario, seed)."""
    n_cells = log.n_cells
    header = ["t_s"]
    for i in range(log.n_modules):
        for j in range(log.m_parallel):
            suffix = f"_{i + 1}_{j + 1}"
            header += [f"V{suffix}", f"T{suffix}", f"I{suffix}", f"SOC{suffix}"]
    header += [f"Ib_{i + 1}" for i in range(log.n_modules)]
    header.append("step_time_s")
    k_total = len(log.t)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(k_total):
            dt = log.t[k + 1] - log.t[k] if k + 1 < k_total else 0.0
            vals = [log.t[k], *log.y[k], *log.u[k], dt]
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")


def read_csv_log(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split(",")
    data = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    return header, data


# ---------------------------------------------------------------------------
# scaling benchmark


def benchmark_scaling(grid, scenario: ScenarioConfig, steps=20,
                      controllers=("smpc", "nmpc")):
    """Mean controller wall time per step over a truncated run per grid point.

    grid is an iterable of (n_modules, m_parallel). Failures are recorded and
    the sweep continues.
    """
    rows = []
    for n_mod, m_par in grid:
        for name in controllers:
            scen = scenario.replace(n_modules=n_mod, m_parallel=m_par,
                                    controller=name)
            row = {"n_modules": n_mod, "m_parallel": m_par,
                   "cells": n_mod * m_par, "controller": name,
                   "steps": 0, "mean_step_s": float("nan"), "error": ""}
            try:
                log = run_closed_loop(scen, max_steps=steps)
                active = log.step_wall[:-1]
                row["steps"] = int(active.size)
                row["mean_step_s"] = float(np.mean(active)) if active.size else float("nan")
            except Exception as exc:  # noqa: BLE001 - sweep must continue
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    return rows


def format_scaling_table(rows) -> str:
    lines = [f"{'layout':>8} {'cells':>6} {'controller':>10} {'steps':>6} {'mean_step_s':>12}  error"]
    for r in rows:
        layout = f"{r['n_modules']}x{r['m_parallel']}"
        lines.append(f"{layout:>8} {r['cells']:>6} {r['controller']:>10} "
                     f"{r['steps']:>6} {r['mean_step_s']:>12.4f}  {r['error']}")
    return "\n".join(lines)
