"""Dense-condensed convex quadratic programming.

Problems have the canonical two-sided form

    minimize   0.5 w' P w + q' w
    subject to lo <= A w <= hi

with equalities encoded as lo == hi and variable bounds as identity rows.
The solver is a first-order operator-splitting iteration (alternating a
regularized linear solve with a projection onto the constraint box) with a
fixed penalty between periodic residual-balancing updates, Ruiz
equilibration, and an optional active-set polish to push KKT residuals to
machine-level accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

_RHO_EQ_FACTOR = 1e3
_RHO_MIN, _RHO_MAX = 1e-6, 1e6


class QpError(RuntimeError):
    pass


def _to_csc(mat):
    if sp.issparse(mat):
        return mat.tocsc().astype(float)
    return sp.csc_matrix(np.atleast_2d(np.asarray(mat, dtype=float)))


@dataclass
class QpProblem:
    """Symmetric PSD Hessian, gradient and a two-sided linear system."""

    P_mat: sp.csc_matrix
    q_vec: np.ndarray
    A_ineq: sp.csc_matrix
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.P_mat = _to_csc(self.P_mat)
        self.A_ineq = _to_csc(self.A_ineq)
        self.q_vec = np.asarray(self.q_vec, dtype=float).ravel()
        self.lo = np.asarray(self.lo, dtype=float).ravel()
        self.hi = np.asarray(self.hi, dtype=float).ravel()
        d = self.q_vec.size
        if self.P_mat.shape != (d, d):
            raise QpError(f"Hessian shape {self.P_mat.shape} does not match dimension {d}")
        c = self.A_ineq.shape[0]
        if self.A_ineq.shape[1] != d:
            raise QpError("constraint matrix column count does not match dimension")
        if self.lo.shape != (c,) or self.hi.shape != (c,):
            raise QpError("bound vectors do not match the constraint row count")
        if np.any(self.lo > self.hi):
            raise QpError("found lo > hi")
        asym = abs(self.P_mat - self.P_mat.T).max() if self.P_mat.nnz else 0.0
        scale = max(abs(self.P_mat).max() if self.P_mat.nnz else 0.0, 1.0)
        if asym > 1e-10 * scale:
            raise QpError("Hessian is not symmetric")
        # PSD check by attempted factorization of P + eps*I
        dense_ok = d <= 400
        if dense_ok:
            try:
                np.linalg.cholesky(self.P_mat.toarray() + 1e-9 * scale * np.eye(d))
            except np.linalg.LinAlgError as exc:
                raise QpError("Hessian is not positive semidefinite") from exc

    @property
    def dim(self):
        return self.q_vec.size

    @property
    def n_rows(self):
        return self.A_ineq.shape[0]

    def objective(self, w):
        w = np.asarray(w, dtype=float)
        return 0.5 * w @ (self.P_mat @ w) + self.q_vec @ w


@dataclass
class QpSolution:
    w_star: np.ndarray
    duals: np.ndarray
    status: str                 # solved | max_iter | primal_infeasible
    iterations: int
    primal_res: float
    dual_res: float
    objective: float
    used_refinement: bool = False


def _interior_point_refine(problem: QpProblem, tol):
    """Exact interior-point solve used when the splitting cannot certify.

    Condensed soft-MPC problems near state-constraint saturation are
    LP-like with near-singular curvature; first-order splitting methods
    (including the reference implementations) stall or mis-flag them, so
    uncertified exits are refined with a mature conic solver and snapped to
    the active-set KKT system. Returns (w, y) or None.
    """
    try:
        import clarabel
    except ImportError:
        return None
    eq = problem.lo == problem.hi
    fin_hi = np.isfinite(problem.hi) & ~eq
    fin_lo = np.isfinite(problem.lo) & ~eq
    A = problem.A_ineq.tocsc()
    blocks = []
    b_parts = []
    cones = []
    n_eq = int(eq.sum())
    if n_eq:
        blocks.append(A[eq])
        b_parts.append(problem.lo[eq])
        cones.append(clarabel.ZeroConeT(n_eq))
    n_ineq = int(fin_hi.sum() + fin_lo.sum())
    if fin_hi.any():
        blocks.append(A[fin_hi])
        b_parts.append(problem.hi[fin_hi])
    if fin_lo.any():
        blocks.append(-A[fin_lo])
        b_parts.append(-problem.lo[fin_lo])
    if n_ineq:
        cones.append(clarabel.NonnegativeConeT(n_ineq))
    if blocks:
        A_big = sp.vstack(blocks, format="csc")
        b_big = np.concatenate(b_parts)
    else:
        A_big = sp.csc_matrix((0, problem.dim))
        b_big = np.zeros(0)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = min(tol, 1e-8)
    settings.tol_gap_rel = min(tol, 1e-8)
    settings.tol_feas = min(tol, 1e-8)
    solver = clarabel.DefaultSolver(problem.P_mat.tocsc(), problem.q_vec,
                                    A_big, b_big, cones, settings)
    res = solver.solve()
    if str(res.status) not in ("Solved", "AlmostSolved"):
        return None
    w = np.asarray(res.x, dtype=float)
    z = np.asarray(res.z, dtype=float)
    y = np.zeros(problem.n_rows)
    ofs = 0
    if n_eq:
        y[eq] = z[:n_eq]
        ofs = n_eq
    if fin_hi.any():
        nh = int(fin_hi.sum())
        y[fin_hi] += z[ofs:ofs + nh]
        ofs += nh
    if fin_lo.any():
        nl = int(fin_lo.sum())
        y[fin_lo] -= z[ofs:ofs + nl]
    return w, y


_SCALING_MIN, _SCALING_MAX = 1e-4, 1e4


def _abs_col_max(M, d):
    if sp.issparse(M):
        return np.asarray(abs(M).max(axis=0).todense()).ravel() if M.nnz else np.zeros(d)
    return np.abs(M).max(axis=0) if M.size else np.zeros(d)


def _abs_row_max(M, c):
    if sp.issparse(M):
        return np.asarray(abs(M).max(axis=1).todense()).ravel() if M.nnz else np.zeros(c)
    return np.abs(M).max(axis=1) if M.size else np.zeros(c)


def _ruiz_equilibrate(P, q, A, lo, hi, iters=10):
    """Modified Ruiz scaling with cost normalization; dense or sparse inputs."""
    d, c = q.size, lo.size
    sparse_mode = sp.issparse(P)
    dvec = np.ones(d)
    evec = np.ones(c)
    cost = 1.0
    Pb, qb, Ab = P.copy(), np.array(q, dtype=float), A.copy()
    lob, hib = lo.copy(), hi.copy()
    for _ in range(iters):
        col = np.sqrt(np.maximum(_abs_col_max(Pb, d), _abs_col_max(Ab, d)))
        col[col < 1e-10] = 1.0
        row = np.sqrt(_abs_row_max(Ab, c))
        row[row < 1e-10] = 1.0
        dd = np.clip(1.0 / col, _SCALING_MIN, _SCALING_MAX)
        ee = np.clip(1.0 / row, _SCALING_MIN, _SCALING_MAX)
        # keep cumulative scalings bounded; extreme factors trade conditioning
        # for float-precision loss in the dual updates
        dd = np.clip(dvec * dd, _SCALING_MIN, _SCALING_MAX) / dvec
        ee = np.clip(evec * ee, _SCALING_MIN, _SCALING_MAX) / evec
        if sparse_mode:
            Dd = sp.diags(dd)
            Pb = (Dd @ Pb @ Dd).tocsc()
            Ab = (sp.diags(ee) @ Ab @ Dd).tocsc()
        else:
            Pb = (dd[:, None] * Pb) * dd[None, :]
            Ab = (ee[:, None] * Ab) * dd[None, :]
        qb = dd * qb
        lob = ee * lob
        hib = ee * hib
        dvec *= dd
        evec *= ee
        p_cols = _abs_col_max(Pb, d)
        g = 1.0 / max(np.mean(p_cols) if d else 1.0, np.max(np.abs(qb)) if d else 1.0, 1e-8)
        g = float(np.clip(g, _SCALING_MIN, _SCALING_MAX))
        g = float(np.clip(cost * g, _SCALING_MIN, _SCALING_MAX)) / cost
        Pb = Pb * g
        qb = qb * g
        cost *= g
    return Pb, qb, Ab, lob, hib, dvec, evec, cost


def _polish(problem: QpProblem, w, y, delta=1e-9):
    """Solve the KKT system of the guessed active set with refinement.

    The active set is read from the dual signs with a small relative
    threshold so rows whose duals are still circling zero do not join, plus
    rows sitting numerically on a finite bound.
    """
    A = problem.A_ineq
    lo, hi = problem.lo, problem.hi
    y_tol = 1e-7 * max(np.max(np.abs(y)) if y.size else 0.0, 1.0)
    Aw = A @ w
    span = np.maximum(np.abs(Aw), 1.0)
    on_lo = np.isfinite(lo) & (np.abs(Aw - lo) <= 1e-9 * span)
    on_hi = np.isfinite(hi) & (np.abs(Aw - hi) <= 1e-9 * span)
    act_lo = ((y < -y_tol) | on_lo) & np.isfinite(lo)
    act_hi = ((y > y_tol) | on_hi) & np.isfinite(hi) & ~act_lo
    active = act_lo | act_hi
    idx = np.flatnonzero(active)
    b_act = np.where(act_lo[idx], lo[idx], hi[idx])
    d = problem.dim
    na = idx.size
    A_act = A[idx]
    K = sp.bmat([
        [problem.P_mat + delta * sp.eye(d), A_act.T],
        [A_act, -delta * sp.eye(na) if na else None],
    ], format="csc") if na else (problem.P_mat + delta * sp.eye(d)).tocsc()
    rhs = np.concatenate([-problem.q_vec, b_act])
    try:
        lu = spla.splu(K)
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    # iterative refinement against the unregularized KKT matrix
    K0 = sp.bmat([[problem.P_mat, A_act.T], [A_act, None]], format="csc") if na \
        else problem.P_mat.tocsc()
    for _ in range(3):
        resid = rhs - K0 @ sol
        sol = sol + lu.solve(resid)
    w_new = sol[:d]
    y_new = np.zeros_like(y)
    y_new[idx] = sol[d:]
    return w_new, y_new


def _residuals(problem, w, z, y):
    Aw = problem.A_ineq @ w
    prim = np.max(np.abs(Aw - z)) if z.size else 0.0
    dual_vec = problem.P_mat @ w + problem.q_vec + problem.A_ineq.T @ y
    dual = np.max(np.abs(dual_vec)) if dual_vec.size else 0.0
    eps_p_rel = max(np.max(np.abs(Aw)) if Aw.size else 0.0,
                    np.max(np.abs(z)) if z.size else 0.0)
    eps_d_rel = max(np.max(np.abs(problem.P_mat @ w)) if w.size else 0.0,
                    np.max(np.abs(problem.A_ineq.T @ y)) if y.size else 0.0,
                    np.max(np.abs(problem.q_vec)) if w.size else 0.0)
    return prim, dual, eps_p_rel, eps_d_rel


def solve(problem: QpProblem, tol_abs=1e-6, tol_rel=1e-6, max_iter=20000,
          rho=0.1, sigma=1e-6, alpha=1.6, warm_start=None, polish=True,
          check_interval=25, adapt_interval=100, polish_interval=250) -> QpSolution:
    """Operator-splitting solve of a QpProblem.

    warm_start may carry (w, duals) from a related problem of equal shape.
    Every polish_interval iterations the active set suggested by the dual
    signs is tested by an exact KKT solve; if that point certifies to the
    requested tolerances the iteration exits early (the splitting identifies
    the active set long before the linear slack-cost duals settle).
    Soft-constrained MPC condensations are always feasible, so a
    primal_infeasible status signals a formulation bug upstream.
    """
    d, c = problem.dim, problem.n_rows
    # small problems iterate on dense arrays: the loop reduces to BLAS calls
    dense = d * max(c, 1) <= 4_000_000
    if dense:
        P0 = problem.P_mat.toarray()
        A0 = problem.A_ineq.toarray()
    else:
        P0 = problem.P_mat
        A0 = problem.A_ineq
    Pb, qb, Ab, lob, hib, dvec, evec, cost = _ruiz_equilibrate(
        P0, problem.q_vec, A0, problem.lo, problem.hi)
    AbT = np.ascontiguousarray(Ab.T) if dense else Ab.T.tocsr()

    eq_rows = problem.lo == problem.hi
    rho_cur = rho

    def rho_vec_of(r):
        rv = np.full(c, r)
        rv[eq_rows] = r * _RHO_EQ_FACTOR
        return np.clip(rv, _RHO_MIN, _RHO_MAX)

    rho_vec = rho_vec_of(rho_cur)

    def factor(rv):
        if dense:
            M = Pb + sigma * np.eye(d) + (Ab * rv[:, None]).T @ Ab
            return scipy.linalg.cho_factor(M)
        M = (Pb + sigma * sp.eye(d) + Ab.T @ sp.diags(rv) @ Ab).tocsc()
        return spla.splu(M)

    def solve_m(fac, rhs):
        if dense:
            return scipy.linalg.cho_solve(fac, rhs)
        return fac.solve(rhs)

    fac = factor(rho_vec)

    if warm_start is not None:
        w0, y0 = warm_start
        x = np.asarray(w0, dtype=float) / dvec
        y = cost * np.asarray(y0, dtype=float) / evec
        zv = np.clip(Ab @ x, lob, hib)
    else:
        x = np.zeros(d)
        y = np.zeros(c)
        zv = np.clip(np.zeros(c), lob, hib)

    status = "max_iter"
    iters = 0
    prim = dual = np.inf
    y_prev = y.copy()
    polished = None
    stall_mark = (0, np.inf)   # (iteration, combined residual) of last clear progress

    def _certified(w_c, y_c):
        z_c = np.clip(problem.A_ineq @ w_c, problem.lo, problem.hi)
        pr, du_r, rp, rd = _residuals(problem, w_c, z_c, y_c)
        ok = pr <= tol_abs + tol_rel * rp and du_r <= tol_abs + tol_rel * rd
        return ok, pr, du_r

    for k in range(1, max_iter + 1):
        iters = k
        rhs = sigma * x - qb + AbT @ (rho_vec * zv - y)
        xt = solve_m(fac, rhs)
        zt = Ab @ xt
        x = alpha * xt + (1.0 - alpha) * x
        z_tmp = alpha * zt + (1.0 - alpha) * zv + y / rho_vec
        z_new = np.clip(z_tmp, lob, hib)
        y = y + rho_vec * (alpha * zt + (1.0 - alpha) * zv - z_new)
        zv = z_new

        if k % check_interval == 0 or k == max_iter:
            w_un = dvec * x
            z_un = zv / evec
            y_un = evec * y / cost
            prim, dual, rel_p, rel_d = _residuals(problem, w_un, z_un, y_un)
            if prim <= tol_abs + tol_rel * rel_p and dual <= tol_abs + tol_rel * rel_d:
                status = "solved"
                break
            if polish and k % polish_interval == 0:
                res = _polish(problem, w_un, y_un)
                if res is not None:
                    ok, pr, du_r = _certified(*res)
                    if ok:
                        status = "solved"
                        polished = (res[0], res[1], pr, du_r)
                        break
            combined = max(prim / max(rel_p, 1e-12), dual / max(rel_d, 1e-12))
            if combined < 0.5 * stall_mark[1]:
                stall_mark = (k, combined)
            elif k - stall_mark[0] >= 1500:
                # residuals have stopped contracting; hand over to refinement
                break
            # primal infeasibility certificate on the dual increment
            dy = y - y_prev
            y_prev = y.copy()
            dy_un = evec * dy / cost
            norm_dy = np.max(np.abs(dy_un)) if dy_un.size else 0.0
            if norm_dy > 1e-12:
                atdy = np.max(np.abs(problem.A_ineq.T @ dy_un))
                certificate = atdy <= 1e-8 * norm_dy
                if certificate:
                    up = np.where(dy_un > 0, dy_un, 0.0)
                    dn = np.where(dy_un < 0, dy_un, 0.0)
                    if np.any(up[~np.isfinite(problem.hi)] > 1e-10 * norm_dy) or \
                       np.any(-dn[~np.isfinite(problem.lo)] > 1e-10 * norm_dy):
                        certificate = False
                    else:
                        fin_hi = np.isfinite(problem.hi)
                        fin_lo = np.isfinite(problem.lo)
                        sup = problem.hi[fin_hi] @ up[fin_hi] + problem.lo[fin_lo] @ dn[fin_lo]
                        certificate = sup < -1e-10 * norm_dy
                if certificate:
                    status = "primal_infeasible"
                    break
            if k % adapt_interval == 0:
                sc_p = prim / max(rel_p, 1e-12)
                sc_d = dual / max(rel_d, 1e-12)
                ratio = np.sqrt(sc_p / max(sc_d, 1e-16))
                rho_new = float(np.clip(rho_cur * ratio, _RHO_MIN, _RHO_MAX))
                if rho_new > 5.0 * rho_cur or rho_new < rho_cur / 5.0:
                    rho_cur = rho_new
                    rho_vec = rho_vec_of(rho_cur)
                    fac = factor(rho_vec)

    used_refinement = False
    if polished is not None:
        w_un, y_un, prim, dual = polished
    else:
        w_un = dvec * x
        z_un = zv / evec
        y_un = evec * y / cost
        prim, dual, _, _ = _residuals(problem, w_un, z_un, y_un)
        if polish:
            res = _polish(problem, w_un, y_un)
            if res is not None:
                w_p, y_p = res
                z_p = np.clip(problem.A_ineq @ w_p, problem.lo, problem.hi)
                prim_p, dual_p, _, _ = _residuals(problem, w_p, z_p, y_p)
                if max(prim_p, dual_p) <= max(prim, dual):
                    w_un, y_un, prim, dual = w_p, y_p, prim_p, dual_p
                    if status == "max_iter":
                        ok, _, _ = _certified(w_p, y_p)
                        if ok:
                            status = "solved"

    if status == "max_iter":
        ref = _interior_point_refine(problem, tol_abs)
        if ref is not None:
            w_r, y_r = ref
            snapped = _polish(problem, w_r, y_r)
            if snapped is not None:
                ok, pr_s, du_s = _certified(*snapped)
                if ok:
                    w_r, y_r = snapped
                    prim, dual = pr_s, du_s
                    status = "solved"
                    used_refinement = True
                    w_un, y_un = w_r, y_r
            if not used_refinement:
                z_r = np.clip(problem.A_ineq @ w_r, problem.lo, problem.hi)
                pr_r, du_r, rp, rd = _residuals(problem, w_r, z_r, y_r)
                if pr_r <= tol_abs + tol_rel * rp and du_r <= tol_abs + tol_rel * rd:
                    w_un, y_un, prim, dual = w_r, y_r, pr_r, du_r
                    status = "solved"
                    used_refinement = True
                elif max(pr_r, du_r) < max(prim, dual):
                    w_un, y_un, prim, dual = w_r, y_r, pr_r, du_r
                    used_refinement = True

    return QpSolution(
        w_star=w_un, duals=y_un, status=status, iterations=iters,
        primal_res=float(prim), dual_res=float(dual),
        objective=float(problem.objective(w_un)), used_refinement=used_refinement,
    )


# ---------------------------------------------------------------------------
# receding-horizon condensing


@dataclass
class CondenseInfo:
    """Decoder for the stacked decision vector [du over free inputs; slacks]."""

    horizon: int
    m: int
    p: int
    free_mask: np.ndarray
    n_free: int
    objective_offset: float

    @property
    def du_dim(self):
        return self.horizon * self.n_free

    def decode(self, w):
        w = np.asarray(w, dtype=float)
        du = np.zeros((self.horizon, self.m))
        du[:, self.free_mask] = w[: self.du_dim].reshape(self.horizon, self.n_free)
        slacks = w[self.du_dim:].reshape(self.horizon + 1, self.p)
        return du, slacks


def condense(bundle, q_diag, r_diag, r_reg_diag, y_ref, u_ref, y_lb, y_ub,
             u_lb, u_ub, slack_weights, u_prev, free_mask=None):
    """Expand the tracking objective and softened output limits through the
    linearized prediction into one QpProblem over [du; slacks].

    Output constraints are softened with one nonnegative slack per output
    component per sample (shared between the lower and upper side); input
    bounds stay hard. Inputs masked out by free_mask are frozen at their
    nominal values and leave the decision vector.
    """
    H = bundle.horizon
    m = bundle.u_nom.shape[1]
    p = bundle.y_nom.shape[1]
    q_diag = np.broadcast_to(np.asarray(q_diag, dtype=float), (p,))
    r_diag = np.broadcast_to(np.asarray(r_diag, dtype=float), (m,))
    r_reg_diag = np.broadcast_to(np.asarray(r_reg_diag, dtype=float), (m,))
    y_ref = np.broadcast_to(np.asarray(y_ref, dtype=float), (p,))
    u_ref = np.broadcast_to(np.asarray(u_ref, dtype=float), (m,))
    y_lb = np.broadcast_to(np.asarray(y_lb, dtype=float), (p,))
    y_ub = np.broadcast_to(np.asarray(y_ub, dtype=float), (p,))
    u_lb = np.broadcast_to(np.asarray(u_lb, dtype=float), (m,))
    u_ub = np.broadcast_to(np.asarray(u_ub, dtype=float), (m,))
    slack_weights = np.broadcast_to(np.asarray(slack_weights, dtype=float), (p,))
    u_prev = np.broadcast_to(np.asarray(u_prev, dtype=float), (m,))
    free = np.ones(m, dtype=bool) if free_mask is None else np.asarray(free_mask, dtype=bool)
    mf = int(free.sum())
    if mf == 0:
        raise QpError("no free inputs to optimize")

    col_mask = np.tile(free, H)
    Py = bundle.y_sens[:, col_mask]             # ((H+1)p, H*mf)
    y_bar = bundle.y_nom.reshape(-1)
    u_bar = bundle.u_nom                        # (H, m)

    q_stack = np.tile(q_diag, H + 1)
    y_err = y_bar - np.tile(y_ref, H + 1)

    rf = r_diag[free]
    rregf = r_reg_diag[free]
    uf_bar = u_bar[:, free]
    uf_ref = u_ref[free]

    du_dim = H * mf
    # difference operator over the input moves, previous applied move fixed
    D = np.zeros((du_dim, du_dim))
    for k in range(H):
        D[k * mf:(k + 1) * mf, k * mf:(k + 1) * mf] = np.eye(mf)
        if k > 0:
            D[k * mf:(k + 1) * mf, (k - 1) * mf:k * mf] = -np.eye(mf)
    d_bar = np.empty((H, mf))
    d_bar[0] = uf_bar[0] - u_prev[free]
    if H > 1:
        d_bar[1:] = uf_bar[1:] - uf_bar[:-1]
    d_bar = d_bar.reshape(-1)
    rreg_stack = np.tile(rregf, H)
    r_stack = np.tile(rf, H)
    u_err = (uf_bar - uf_ref).reshape(-1)

    PyQ = Py * q_stack[:, None]
    P_uu = 2.0 * (Py.T @ PyQ + np.diag(r_stack) + D.T @ (rreg_stack[:, None] * D))
    P_uu = 0.5 * (P_uu + P_uu.T)
    q_u = 2.0 * (PyQ.T @ y_err + r_stack * u_err + D.T @ (rreg_stack * d_bar))

    offset = float(y_err @ (q_stack * y_err) + u_err @ (r_stack * u_err)
                   + d_bar @ (rreg_stack * d_bar))

    if np.any(slack_weights <= 0.0):
        raise QpError("slack weights must be strictly positive")
    slack_dim = (H + 1) * p
    dim = du_dim + slack_dim
    P_full = sp.block_diag([sp.csc_matrix(P_uu), sp.csc_matrix((slack_dim, slack_dim))],
                           format="csc")
    q_full = np.concatenate([q_u, np.tile(slack_weights, H + 1)])

    Py_sp = sp.csc_matrix(Py)
    I_s = sp.eye(slack_dim, format="csc")
    rows = []
    los = []
    his = []
    # softened output limits: lb - xi <= y_hat and y_hat <= ub + xi
    rows.append(sp.hstack([Py_sp, I_s], format="csc"))
    los.append(np.tile(y_lb, H + 1) - y_bar)
    his.append(np.full(slack_dim, np.inf))
    rows.append(sp.hstack([Py_sp, -I_s], format="csc"))
    los.append(np.full(slack_dim, -np.inf))
    his.append(np.tile(y_ub, H + 1) - y_bar)
    # hard input box on the applied sequence
    rows.append(sp.hstack([sp.eye(du_dim, format="csc"),
                           sp.csc_matrix((du_dim, slack_dim))], format="csc"))
    los.append((np.tile(u_lb[free], H) - uf_bar.reshape(-1)))
    his.append((np.tile(u_ub[free], H) - uf_bar.reshape(-1)))
    # slack nonnegativity
    rows.append(sp.hstack([sp.csc_matrix((slack_dim, du_dim)), I_s], format="csc"))
    los.append(np.zeros(slack_dim))
    his.append(np.full(slack_dim, np.inf))

    problem = QpProblem(
        P_mat=P_full,
        q_vec=q_full,
        A_ineq=sp.vstack(rows, format="csc"),
        lo=np.concatenate(los),
        hi=np.concatenate(his),
    )
    info = CondenseInfo(horizon=H, m=m, p=p, free_mask=free, n_free=mf,
                        objective_offset=offset)
    return problem, info


def write_problem_dump(problem: QpProblem, path):
    """Plain-text dump (P, q, A, lo, hi) for cross-checks with other solvers."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# packcharge qp dump v1\ndim {problem.dim} rows {problem.n_rows}\n")
        for name, arr in (
            ("P", problem.P_mat.toarray()),
            ("q", problem.q_vec),
            ("A", problem.A_ineq.toarray()),
            ("lo", problem.lo),
            ("hi", problem.hi),
        ):
            fh.write(f"{name}\n")
            np.savetxt(fh, np.atleast_2d(arr), fmt="%.17g")


def read_problem_dump(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# packcharge qp dump"):
        raise QpError("not a qp dump file")
    dim_line = lines[1].split()
    d, c = int(dim_line[1]), int(dim_line[3])
    sections = {}
    i = 2
    while i < len(lines):
        name = lines[i].strip()
        n_rows = {"P": d, "q": 1, "A": c, "lo": 1, "hi": 1}[name]
        block = lines[i + 1:i + 1 + n_rows]
        sections[name] = np.loadtxt(block, ndmin=2)
        i += 1 + n_rows
    return QpProblem(P_mat=sections["P"], q_vec=sections["q"].ravel(),
                     A_ineq=sections["A"], lo=sections["lo"].ravel(),
                     hi=sections["hi"].ravel())
