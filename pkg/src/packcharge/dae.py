"""Fixed-step implicit integration of semi-explicit index-1 DAEs.

Systems have the form xdot = f(x, u, z), 0 = h(x, u, z), y = g(x, u, z) with
piecewise-constant inputs held over each sample interval. The default scheme
is first-order implicit (backward Euler) with a damped Newton solve of the
coupled step equations; systems may provide a structured factorization of the
Newton matrix [[I - dt*F_x, -dt*F_z], [H_x, H_z]] to avoid dense assembly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class DaeError(RuntimeError):
    pass


class InitializationError(DaeError):
    """Newton failed to find a consistent algebraic initialization."""


class StepError(DaeError):
    """Newton failed on an implicit step; retry with a smaller dt/substep."""


class IndexOneError(DaeError):
    """The algebraic Jacobian H_z is singular along the trajectory."""


@dataclass
class JacobianBlocks:
    """All nine first-order blocks of a DAE system at one evaluation point."""

    F_x: np.ndarray
    F_z: np.ndarray
    F_u: np.ndarray
    H_x: np.ndarray
    H_z: np.ndarray
    H_u: np.ndarray
    G_x: np.ndarray
    G_z: np.ndarray
    G_u: np.ndarray


@dataclass
class IntegratorConfig:
    ts: float = 40.0          # controller sample time, s
    substeps: int = 8         # implicit steps per sample
    newton_tol: float = 1e-9
    newton_max_iter: int = 20
    damping_halvings: int = 6
    # one extra full iteration after the tolerance is met; quadratic
    # convergence pushes residuals to roundoff, which the conservation and
    # KCL acceptance tolerances rely on
    extra_iteration: bool = True
    scheme: str = "implicit_euler"

    def __post_init__(self):
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.newton_tol <= 0:
            raise ValueError("newton_tol must be positive")
        if self.scheme != "implicit_euler":
            raise ValueError(f"unknown scheme {self.scheme!r}")


class DaeSystem:
    """Base class; subclasses set dims n, m, s, p and the evaluators."""

    n = 0
    m = 0
    s = 0
    p = 0

    def f(self, x, u, z):
        raise NotImplementedError

    def h(self, x, u, z):
        return np.zeros(0)

    def g(self, x, u, z):
        raise NotImplementedError

    def jacobians(self, x, u, z) -> JacobianBlocks:
        raise NotImplementedError

    def state_scale(self):
        return np.ones(self.n)

    def algebraic_scale(self):
        return np.ones(max(self.s, 1))[: self.s]

    def newton_operator(self, x, u, z, dt):
        """Factorized solve of [[I - dt*F_x, -dt*F_z], [H_x, H_z]] systems."""
        jb = self.jacobians(x, u, z)
        return DenseNewtonOperator(jb, dt)

    def solve_hz(self, x, u, z, rhs):
        """Solve H_z @ dz = rhs at the given point (rhs shape (s,) or (s, k))."""
        jb = self.jacobians(x, u, z)
        try:
            return np.linalg.solve(jb.H_z, rhs)
        except np.linalg.LinAlgError as exc:
            raise IndexOneError(f"algebraic Jacobian singular: {exc}") from exc

    def default_z_guess(self, x, u):
        return np.zeros(self.s)


class DenseNewtonOperator:
    """Dense LU of the bordered Newton matrix; fallback for generic systems."""

    def __init__(self, jb: JacobianBlocks, dt: float):
        self.jb = jb
        n = jb.F_x.shape[0]
        s = jb.H_z.shape[0]
        self.n, self.s = n, s
        top = np.hstack([np.eye(n) - dt * jb.F_x, -dt * jb.F_z])
        if s:
            bot = np.hstack([jb.H_x, jb.H_z])
            mat = np.vstack([top, bot])
        else:
            mat = top
        try:
            self._lu = scipy.linalg.lu_factor(mat)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise IndexOneError(f"Newton matrix factorization failed: {exc}") from exc

    def solve(self, bx, bh):
        """bx (n,) or (n, k); bh (s,) or (s, k); returns (dx, dz)."""
        bx = np.asarray(bx, dtype=float)
        single = bx.ndim == 1
        bx2 = bx.reshape(self.n, -1)
        bh2 = np.asarray(bh, dtype=float).reshape(self.s, -1)
        rhs = np.vstack([bx2, bh2]) if self.s else bx2
        sol = scipy.linalg.lu_solve(self._lu, rhs)
        dx, dz = sol[: self.n], sol[self.n:]
        if single:
            return dx[:, 0], dz[:, 0]
        return dx, dz


def _scaled_norm(r_x, r_h, system):
    parts = []
    if r_x.size:
        parts.append(np.max(np.abs(r_x) / system.state_scale()))
    if r_h.size:
        parts.append(np.max(np.abs(r_h)))
    return max(parts) if parts else 0.0


def consistent_init(x0, u0, system: DaeSystem, cfg: IntegratorConfig, z_guess=None):
    """Solve h(x0, u0, z) = 0 for z by damped Newton."""
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    if system.s == 0:
        return np.zeros(0)
    z = np.array(system.default_z_guess(x0, u0) if z_guess is None else z_guess, dtype=float)
    res = system.h(x0, u0, z)
    norm = np.max(np.abs(res))
    trace = [norm]
    extra_done = not cfg.extra_iteration
    for _ in range(cfg.newton_max_iter):
        if norm <= cfg.newton_tol and extra_done:
            return z
        if norm <= cfg.newton_tol:
            extra_done = True
        dz = system.solve_hz(x0, u0, z, -res)
        step = 1.0
        for _ in range(cfg.damping_halvings + 1):
            z_new = z + step * dz
            try:
                res_new = system.h(x0, u0, z_new)
            except ValueError:
                step *= 0.5
                continue
            norm_new = np.max(np.abs(res_new)) if res_new.size else 0.0
            if norm_new <= norm or norm <= cfg.newton_tol:
                break
            step *= 0.5
        else:
            raise InitializationError(
                f"consistent initialization stalled; residual trace {trace}"
            )
        z, res, norm = z_new, res_new, norm_new
        trace.append(norm)
    if norm <= cfg.newton_tol:
        return z
    raise InitializationError(
        f"consistent initialization did not converge; residual trace {trace}"
    )


def _newton_step(x, z, u, dt, system: DaeSystem, cfg: IntegratorConfig,
                 return_operator=False):
    """One implicit-Euler step solved by damped Newton on (x_next, z_next)."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)

    xn = x + dt * np.asarray(system.f(x, u, z), dtype=float)
    zn = z.copy()

    fh = getattr(system, "fh", None)

    def residual(xc, zc):
        if fh is not None:
            f_val, h_val = fh(xc, u, zc)
        else:
            f_val = system.f(xc, u, zc)
            h_val = system.h(xc, u, zc)
        r_x = xc - x - dt * np.asarray(f_val, dtype=float)
        r_h = np.asarray(h_val, dtype=float)
        return r_x, r_h

    try:
        r_x, r_h = residual(xn, zn)
    except ValueError:
        xn, zn = x.copy(), z.copy()
        r_x, r_h = residual(xn, zn)
    norm = _scaled_norm(r_x, r_h, system)
    extra_done = not cfg.extra_iteration
    for _ in range(cfg.newton_max_iter):
        if norm <= cfg.newton_tol and extra_done:
            break
        if norm <= cfg.newton_tol:
            extra_done = True
        op = system.newton_operator(xn, u, zn, dt)
        dx, dz = op.solve(-r_x, -r_h)
        step = 1.0
        for _ in range(cfg.damping_halvings + 1):
            x_try = xn + step * dx
            z_try = zn + step * dz
            try:
                r_x_try, r_h_try = residual(x_try, z_try)
            except ValueError:
                step *= 0.5
                continue
            norm_try = _scaled_norm(r_x_try, r_h_try, system)
            if norm_try <= norm or norm <= cfg.newton_tol:
                break
            step *= 0.5
        else:
            raise StepError(
                f"implicit step Newton stalled at residual {norm:.3e}; "
                "reduce dt or increase substeps"
            )
        xn, zn = x_try, z_try
        r_x, r_h, norm = r_x_try, r_h_try, norm_try
    else:
        if norm > cfg.newton_tol:
            raise StepError(
                f"implicit step Newton did not converge (residual {norm:.3e}); "
                "reduce dt or increase substeps"
            )
    if return_operator:
        return xn, zn, system.newton_operator(xn, u, zn, dt)
    return xn, zn


def step(x, z, u, dt, system: DaeSystem, cfg: IntegratorConfig):
    """Advance one implicit step of size dt under constant input u."""
    return _newton_step(x, z, u, dt, system, cfg)


def simulate(x0, u_seq, horizon, system: DaeSystem, cfg: IntegratorConfig,
             z_guess=None):
    """Integrate over `horizon` samples; returns (x, z, y) arrays of length
    horizon+1 sampled at the controller grid.

    The input is held constant within each sample. At every sample instant the
    algebraic variables are re-solved under the input active on the upcoming
    interval, so z(t_k) and y(t_k) reflect the instantaneous response to
    u(t_k); the final sample keeps the last input.
    """
    x0 = np.asarray(x0, dtype=float)
    u_arr = np.asarray(u_seq, dtype=float).reshape(horizon, system.m)
    dt = cfg.ts / cfg.substeps

    xs = np.empty((horizon + 1, system.n))
    zs = np.empty((horizon + 1, system.s))
    ys = np.empty((horizon + 1, system.p))

    x = x0.copy()
    z = consistent_init(x, u_arr[0] if horizon else np.zeros(system.m), system, cfg,
                        z_guess=z_guess)
    for k in range(horizon):
        u = u_arr[k]
        if k > 0:
            z = consistent_init(x, u, system, cfg, z_guess=z)
        xs[k], zs[k] = x, z
        ys[k] = system.g(x, u, z)
        for _ in range(cfg.substeps):
            try:
                x, z = step(x, z, u, dt, system, cfg)
            except DaeError as exc:
                raise StepError(f"integration failed at sample {k}: {exc}") from exc
    u_last = u_arr[-1] if horizon else np.zeros(system.m)
    xs[horizon], zs[horizon] = x, z
    ys[horizon] = system.g(x, u_last, z)
    return xs, zs, ys
