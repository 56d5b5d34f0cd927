"""Single-cell electrochemical/thermal model: right-hand side, voltage map
and their closed-form derivatives.

The model couples volume-averaged solid-phase stoichiometry and concentration
flux (fourth-order radial polynomial reduction), a finite-volume electrolyte
diffusion chain with P volumes per section, and a lumped thermal balance. All
functions are vectorized over a leading cell axis: states have shape
(cells, 4+3P) ordered [theta_bar_p, q_bar_p, q_bar_n, c_e(3P), T] with c_e
ordered p[1..P], s[1..P], n[1..P]; currents have shape (cells,). Applied
current is negative while charging.
"""

from __future__ import annotations

import numpy as np

from .params import CellParams, DerivedGeometry, derive_geometry

# Open-circuit potential fits and electrolyte conductivity fit for the
# reference NMC/graphite chemistry (V as a function of surface stoichiometry;
# conductivity polynomial takes gamma = 1e-3 * c_e and returns S/m before the
# Arrhenius factor).
OCP_P_COEFFS = (18.45, -40.7, 20.94, 8.07, -7.837, 0.02414, 4.571)
OCP_N_NUM = (0.1261, 0.00694)
OCP_N_DEN = (1.0, 0.6995, 0.00405)
KAPPA_COEFFS = (0.2667, -1.2983, 1.7919, 0.1726)

# Guard band applied to surface stoichiometries and electrolyte concentrations
# only while Newton iterates may step outside the physical domain; converged
# points must lie strictly inside.
THETA_GUARD = 1e-6
CE_FLOOR = 1e-3


class VoltageDomainError(ValueError):
    """Voltage map evaluated outside its domain (theta outside (0,1), c_e <= 0)."""


class CellParamArrays:
    """Struct-of-arrays view of per-cell parameters plus derived constants.

    Built once per pack; every field is a (cells,) float array (P is shared).
    Precomputes the electrolyte finite-volume operator and the constant input
    coefficients of the solid-phase dynamics.
    """

    def __init__(self, cells):
        if isinstance(cells, CellParams):
            cells = [cells]
        self.cells = list(cells)
        self.n_cells = len(self.cells)
        if self.n_cells == 0:
            raise ValueError("need at least one cell")
        p_values = {c.P for c in self.cells}
        if len(p_values) != 1:
            raise ValueError("all cells must share the same number of finite volumes P")
        self.P = self.cells[0].P
        self.n_x = 4 + 3 * self.P

        geoms = [derive_geometry(c) for c in self.cells]
        self.geom = geoms

        def arr(get):
            return np.array([get(c) for c in self.cells], dtype=float)

        for name in (
            "theta0_p", "theta100_p", "theta0_n", "theta100_n", "cs_max_p",
            "cs_max_n", "Rp_p", "Rp_n", "L_p", "L_s", "L_n", "A", "C_cap",
            "F", "Rgas", "Ds0_p", "Ds0_n", "Ea_Ds_p", "Ea_Ds_n", "Ea_kappa",
            "Ea_De", "Ea_k_p", "Ea_k_n", "De0", "t_plus", "eps_p", "eps_s",
            "eps_n", "brug_p", "brug_s", "brug_n", "k0_p", "k0_n", "R_sei",
            "C_th", "R_th", "T_sink",
        ):
            setattr(self, name, arr(lambda c, n=name: getattr(c, n)))
        for name in ("eps_act_p", "eps_act_n", "a_p", "a_n", "dx_p", "dx_s", "dx_n"):
            setattr(self, name, np.array([getattr(g, name) for g in geoms], dtype=float))

        self.dtheta_p = self.theta100_p - self.theta0_p
        self.dtheta_n = self.theta100_n - self.theta0_n
        # slope of the anode average stoichiometry in the cathode one
        self.g_theta = self.dtheta_n / self.dtheta_p
        # hoisted Arrhenius ratios Ea/Rgas (exponent is -ratio/T)
        self.ea_ds_p_r = self.Ea_Ds_p / self.Rgas
        self.ea_ds_n_r = self.Ea_Ds_n / self.Rgas
        self.ea_de_r = self.Ea_De / self.Rgas
        self.ea_kp_r = self.Ea_k_p / self.Rgas
        self.ea_kn_r = self.Ea_k_n / self.Rgas
        self.ea_kappa_r = self.Ea_kappa / self.Rgas
        self.two_rgas_f = 2.0 * self.Rgas / self.F
        self.fk0_p = self.F * self.k0_p
        self.fk0_n = self.F * self.k0_n

        FA = self.F * self.A
        # input coefficients of the solid-phase dynamics
        self.c_theta = 3.0 / (self.a_p * self.Rp_p * self.L_p * FA * self.cs_max_p)
        self.c_qp = 45.0 / (2.0 * self.Rp_p**2 * FA * self.L_p * self.a_p)
        self.c_qn = -45.0 / (2.0 * self.Rp_n**2 * FA * self.L_n * self.a_n)
        # surface-stoichiometry correction coefficients (current term carries
        # 1/Ds(T) at evaluation time)
        self.cp_q = 8.0 * self.Rp_p / (35.0 * self.cs_max_p)
        self.cn_q = 8.0 * self.Rp_n / (35.0 * self.cs_max_n)
        self.cp_i0 = self.Rp_p / (35.0 * FA * self.L_p * self.a_p * self.cs_max_p)
        self.cn_i0 = self.Rp_n / (35.0 * FA * self.L_n * self.a_n * self.cs_max_n)
        # overpotential denominators 2*A*L_i*a_i
        self.B_p = 2.0 * self.A * self.L_p * self.a_p
        self.B_n = 2.0 * self.A * self.L_n * self.a_n

        self._build_electrolyte_operator()

    def _build_electrolyte_operator(self):
        """Finite-volume diffusion operator with the D_e(T) factor pulled out.

        dce/dt = De(T) * (L0eps @ ce) + src_eps * I. Fluxes across internal
        faces are two-point differences of volume averages over the
        face-centered spacing; section-interface diffusivities use the
        harmonic mean; the two outer boundaries carry zero flux.
        """
        P, nc = self.P, self.n_cells
        nv = 3 * P
        eps_vol = np.concatenate([
            np.repeat(self.eps_p[:, None], P, axis=1),
            np.repeat(self.eps_s[:, None], P, axis=1),
            np.repeat(self.eps_n[:, None], P, axis=1),
        ], axis=1)                                            # (nc, 3P)
        dx_vol = np.concatenate([
            np.repeat(self.dx_p[:, None], P, axis=1),
            np.repeat(self.dx_s[:, None], P, axis=1),
            np.repeat(self.dx_n[:, None], P, axis=1),
        ], axis=1)
        self.eps_vol = eps_vol
        self.dx_vol = dx_vol
        # conservation weights: porosity * volume width
        self.cons_weights = eps_vol * dx_vol

        dp = self.eps_p**self.brug_p
        ds = self.eps_s**self.brug_s
        dn = self.eps_n**self.brug_n
        self.d_eff_pref = (dp, ds, dn)

        def hmean(r1, r2, l1, l2):
            return r1 * r2 * (l1 + l2) / (r1 * l2 + r2 * l1)

        # per-face diffusivity prefactor (multiplied by De(T) at runtime) and
        # face-centered spacing; faces f = 0..3P-2 sit between volumes f, f+1
        face_d = np.zeros((nc, nv - 1))
        face_len = np.zeros((nc, nv - 1))
        for f in range(nv - 1):
            if f < P - 1:
                face_d[:, f] = dp
                face_len[:, f] = self.dx_p
            elif f == P - 1:
                face_d[:, f] = hmean(dp, dp, self.dx_p, self.dx_s)
                face_len[:, f] = 0.5 * (self.dx_p + self.dx_s)
            elif f < 2 * P - 1:
                face_d[:, f] = ds
                face_len[:, f] = self.dx_s
            elif f == 2 * P - 1:
                face_d[:, f] = hmean(ds, dn, self.dx_s, self.dx_n)
                face_len[:, f] = 0.5 * (self.dx_s + self.dx_n)
            else:
                face_d[:, f] = dn
                face_len[:, f] = self.dx_n
        coef = face_d / face_len                              # (nc, 3P-1)

        L0 = np.zeros((nc, nv, nv))
        for v in range(nv):
            if v > 0:
                L0[:, v, v - 1] += coef[:, v - 1]
                L0[:, v, v] -= coef[:, v - 1]
            if v < nv - 1:
                L0[:, v, v + 1] += coef[:, v]
                L0[:, v, v] -= coef[:, v]
        L0 /= (dx_vol * eps_vol)[:, :, None]
        self.L0eps = L0

        src = np.zeros((nc, nv))
        src[:, :P] = (-(1.0 - self.t_plus) / (self.F * self.A * self.L_p))[:, None]
        src[:, 2 * P:] = ((1.0 - self.t_plus) / (self.F * self.A * self.L_n))[:, None]
        self.src_eps = src / eps_vol

        # trapezoidal ionic-current weights for the electrolyte ohmic drop:
        # per-volume coefficient dx * w / eps^brug, separator weight doubled
        k_idx = np.arange(1, P + 1, dtype=float)
        w_p = 2.0 * k_idx - 1.0
        w_s = 2.0 * np.ones(P)
        w_n = 2.0 * P - 2.0 * k_idx + 1.0
        self.phi_coef = np.concatenate([
            self.dx_p[:, None] * w_p[None, :] / dp[:, None],
            self.dx_s[:, None] * w_s[None, :] / ds[:, None],
            self.dx_n[:, None] * w_n[None, :] / dn[:, None],
        ], axis=1)                                            # (nc, 3P)

    # typical magnitudes per state entry, used to scale Newton residuals
    def state_scale(self):
        scale = np.ones(self.n_x)
        scale[1] = 1e8
        scale[2] = 1e8
        scale[3:3 + 3 * self.P] = 1e3
        scale[-1] = 3e2
        return scale


def _split_state(states, P):
    states = np.atleast_2d(np.asarray(states, dtype=float))
    th = states[:, 0]
    qp = states[:, 1]
    qn = states[:, 2]
    ce = states[:, 3:3 + 3 * P]
    T = states[:, 3 + 3 * P]
    return th, qp, qn, ce, T


def harmonic_mean(r1, r2, l1, l2):
    """Distance-weighted harmonic mean used at section interfaces."""
    return r1 * r2 * (l1 + l2) / (r1 * l2 + r2 * l1)


def u_ocp_p(theta):
    """Cathode open-circuit potential (sixth-order polynomial fit), V."""
    th = np.asarray(theta, dtype=float)
    c = OCP_P_COEFFS
    return (((((c[0] * th + c[1]) * th + c[2]) * th + c[3]) * th + c[4]) * th + c[5]) * th + c[6]


def u_ocp_p_prime(theta):
    th = np.asarray(theta, dtype=float)
    c = OCP_P_COEFFS
    return ((((6 * c[0] * th + 5 * c[1]) * th + 4 * c[2]) * th + 3 * c[3]) * th + 2 * c[4]) * th + c[5]


def u_ocp_n(theta):
    """Anode open-circuit potential (rational fit), V."""
    th = np.asarray(theta, dtype=float)
    num = OCP_N_NUM[0] * th + OCP_N_NUM[1]
    den = (OCP_N_DEN[0] * th + OCP_N_DEN[1]) * th + OCP_N_DEN[2]
    return num / den


def u_ocp_n_prime(theta):
    th = np.asarray(theta, dtype=float)
    num = OCP_N_NUM[0] * th + OCP_N_NUM[1]
    den = (OCP_N_DEN[0] * th + OCP_N_DEN[1]) * th + OCP_N_DEN[2]
    dden = 2.0 * OCP_N_DEN[0] * th + OCP_N_DEN[1]
    return (OCP_N_NUM[0] * den - num * dden) / den**2


def electrolyte_conductivity(c_e, T, Ea_kappa, Rgas=8.314462618):
    """Concentration/temperature-dependent electrolyte conductivity, S/m."""
    gam = 1e-3 * np.asarray(c_e, dtype=float)
    a = KAPPA_COEFFS
    poly = ((a[0] * gam + a[1]) * gam + a[2]) * gam + a[3]
    return poly * np.exp(-np.asarray(Ea_kappa) / (Rgas * np.asarray(T)))


def anode_from_cathode(theta_bar_p, pa: CellParamArrays):
    """Anode average stoichiometry implied by solid-phase lithium conservation."""
    return pa.theta0_n + (np.asarray(theta_bar_p) - pa.theta0_p) * pa.g_theta


def soc_of(theta_bar_n, pa: CellParamArrays):
    """State of charge in percent from the anode average stoichiometry."""
    return 100.0 * (np.asarray(theta_bar_n) - pa.theta0_n) / pa.dtheta_n


def theta_p_from_soc(soc, pa: CellParamArrays):
    """Invert the SOC map to the cathode average stoichiometry."""
    theta_n = pa.theta0_n + np.asarray(soc) / 100.0 * pa.dtheta_n
    return pa.theta0_p + (theta_n - pa.theta0_n) / pa.g_theta


def solid_phase_rates(states, i_app, pa: CellParamArrays):
    """Rates of the average cathode stoichiometry and both concentration fluxes."""
    th, qp, qn, _, T = _split_state(states, pa.P)
    if np.any(T <= 0.0):
        raise VoltageDomainError("temperature must be positive")
    i_app = np.atleast_1d(np.asarray(i_app, dtype=float))
    rt = pa.Rgas * T
    dsp = pa.Ds0_p * np.exp(-pa.Ea_Ds_p / rt)
    dsn = pa.Ds0_n * np.exp(-pa.Ea_Ds_n / rt)
    dth = pa.c_theta * i_app
    dqp = -30.0 * dsp / pa.Rp_p**2 * qp + pa.c_qp * i_app
    dqn = -30.0 * dsn / pa.Rp_n**2 * qn + pa.c_qn * i_app
    return dth, dqp, dqn


def surface_stoichiometries(states, i_app, pa: CellParamArrays, clip=False):
    """Surface stoichiometries of both electrodes under the applied current."""
    th, qp, qn, _, T = _split_state(states, pa.P)
    i_app = np.atleast_1d(np.asarray(i_app, dtype=float))
    rt = pa.Rgas * T
    dsp = pa.Ds0_p * np.exp(-pa.Ea_Ds_p / rt)
    dsn = pa.Ds0_n * np.exp(-pa.Ea_Ds_n / rt)
    th_n_bar = anode_from_cathode(th, pa)
    theta_p = th + pa.cp_q * qp + pa.cp_i0 / dsp * i_app
    theta_n = th_n_bar + pa.cn_q * qn - pa.cn_i0 / dsn * i_app
    if clip:
        theta_p = np.clip(theta_p, THETA_GUARD, 1.0 - THETA_GUARD)
        theta_n = np.clip(theta_n, THETA_GUARD, 1.0 - THETA_GUARD)
    return theta_p, theta_n


def electrolyte_rates(states, i_app, pa: CellParamArrays):
    """Rates of the 3P volume-averaged electrolyte concentrations."""
    _, _, _, ce, T = _split_state(states, pa.P)
    if np.any(ce <= 0.0):
        raise VoltageDomainError("electrolyte concentrations must be positive")
    i_app = np.atleast_1d(np.asarray(i_app, dtype=float))
    de = pa.De0 * np.exp(-pa.Ea_De / (pa.Rgas * T))
    diff = np.einsum("cij,cj->ci", pa.L0eps, ce)
    return de[:, None] * diff + pa.src_eps * i_app[:, None]


def _voltage_core(states, i_app, pa: CellParamArrays, clip: bool, grad: bool):
    """Shared voltage-map evaluation; optionally returns all derivatives."""
    P = pa.P
    th, qp, qn, ce, T = _split_state(states, P)
    i_app = np.atleast_1d(np.asarray(i_app, dtype=float))
    if np.any(T <= 0.0):
        raise VoltageDomainError("temperature must be positive")

    ce_e = np.maximum(ce, CE_FLOOR) if clip else ce
    if not clip and np.any(ce <= 0.0):
        raise VoltageDomainError("electrolyte concentrations must be positive")

    rt = pa.Rgas * T
    rt2 = pa.Rgas * T**2
    tv = 2.0 * rt / pa.F

    dsp = pa.Ds0_p * np.exp(-pa.Ea_Ds_p / rt)
    dsn = pa.Ds0_n * np.exp(-pa.Ea_Ds_n / rt)
    cp_i = pa.cp_i0 / dsp
    cn_i = pa.cn_i0 / dsn

    theta_p = th + pa.cp_q * qp + cp_i * i_app
    theta_n = anode_from_cathode(th, pa) + pa.cn_q * qn - cn_i * i_app
    if clip:
        theta_p = np.clip(theta_p, THETA_GUARD, 1.0 - THETA_GUARD)
        theta_n = np.clip(theta_n, THETA_GUARD, 1.0 - THETA_GUARD)
    elif np.any(theta_p <= 0.0) or np.any(theta_p >= 1.0) or np.any(theta_n <= 0.0) or np.any(theta_n >= 1.0):
        raise VoltageDomainError("surface stoichiometry left (0, 1)")

    up = u_ocp_p(theta_p)
    un = u_ocp_n(theta_n)

    ce_p = ce_e[:, :P]
    ce_n = ce_e[:, 2 * P:]
    ce_mean_p = ce_p.mean(axis=1)
    ce_mean_n = ce_n.mean(axis=1)

    kp = pa.k0_p * np.exp(-pa.Ea_k_p / rt)
    kn = pa.k0_n * np.exp(-pa.Ea_k_n / rt)
    gp = ce_mean_p * theta_p * (1.0 - theta_p)
    gn = ce_mean_n * theta_n * (1.0 - theta_n)
    i0p = pa.F * kp * np.sqrt(gp)
    i0n = pa.F * kn * np.sqrt(gn)

    arg_p = -i_app / (pa.B_p * i0p)
    arg_n = i_app / (pa.B_n * i0n)
    eta_p = tv * np.arcsinh(arg_p)
    eta_n = tv * np.arcsinh(arg_n)

    # electrolyte conductivity per volume and ohmic drop
    gam = 1e-3 * ce_e
    a = KAPPA_COEFFS
    kpoly = ((a[0] * gam + a[1]) * gam + a[2]) * gam + a[3]
    arrh_k = np.exp(-pa.Ea_kappa / rt)
    kappa = kpoly * arrh_k[:, None]
    if np.any(kappa <= 0.0):
        raise VoltageDomainError("electrolyte conductivity is nonpositive")
    s_phi = np.sum(pa.phi_coef / kappa, axis=1)
    phi_drop = -i_app / (2.0 * P * pa.A) * s_phi

    log_ratio = np.log(ce_e[:, 0] / ce_e[:, -1])
    l_log = tv * (1.0 - pa.t_plus) * log_ratio

    v = -i_app * pa.R_sei + up - un + eta_p - eta_n + phi_drop + l_log
    pol = v - (up - un)

    out = {"V": v, "U_p": up, "U_n": un, "pol": pol,
           "theta_p": theta_p, "theta_n": theta_n}
    if not grad:
        return out

    nc = th.shape[0]
    n_x = pa.n_x

    # surface-stoichiometry partials: columns [theta_bar_p, q_p, q_n, T, I]
    dthp_dT = -cp_i * i_app * pa.Ea_Ds_p / rt2
    dthn_dT = cn_i * i_app * pa.Ea_Ds_n / rt2

    dup = u_ocp_p_prime(theta_p)
    dun = u_ocp_n_prime(theta_n)

    # exchange-current partials
    di0p_dthp = pa.F * kp * ce_mean_p * (1.0 - 2.0 * theta_p) / (2.0 * np.sqrt(gp))
    di0n_dthn = pa.F * kn * ce_mean_n * (1.0 - 2.0 * theta_n) / (2.0 * np.sqrt(gn))
    di0p_dcep = pa.F * kp * theta_p * (1.0 - theta_p) / (2.0 * np.sqrt(gp))
    di0n_dcen = pa.F * kn * theta_n * (1.0 - theta_n) / (2.0 * np.sqrt(gn))
    di0p_dT = i0p * pa.Ea_k_p / rt2
    di0n_dT = i0n * pa.Ea_k_n / rt2

    sp = 1.0 / np.sqrt(1.0 + arg_p**2)
    sn = 1.0 / np.sqrt(1.0 + arg_n**2)
    # d(eta)/d(i0) chains; the direct current terms are added separately
    detap_di0 = tv * sp * (i_app / (pa.B_p * i0p**2))
    detan_di0 = -tv * sn * (i_app / (pa.B_n * i0n**2))

    # ohmic-drop partials
    dkpoly = (3.0 * a[0] * gam + 2.0 * a[1]) * gam + a[2]
    dkap_dce = dkpoly * 1e-3 * arrh_k[:, None]
    ds_phi_dce = -pa.phi_coef / kappa**2 * dkap_dce
    ds_phi_dT = np.sum(-pa.phi_coef / kappa**2 * (kappa * (pa.Ea_kappa / rt2)[:, None]), axis=1)
    drop_coef = -i_app / (2.0 * P * pa.A)

    dv = np.zeros((nc, n_x))
    dpol = np.zeros((nc, n_x))

    # theta_bar_p column
    ocp_thbar = dup - dun * pa.g_theta
    eta_thbar = detap_di0 * di0p_dthp - detan_di0 * di0n_dthn * pa.g_theta
    dv[:, 0] = ocp_thbar + eta_thbar
    dpol[:, 0] = eta_thbar
    # q_p column
    ocp_qp = dup * pa.cp_q
    eta_qp = detap_di0 * di0p_dthp * pa.cp_q
    dv[:, 1] = ocp_qp + eta_qp
    dpol[:, 1] = eta_qp
    # q_n column
    ocp_qn = -dun * pa.cn_q
    eta_qn = -detan_di0 * di0n_dthn * pa.cn_q
    dv[:, 2] = ocp_qn + eta_qn
    dpol[:, 2] = eta_qn

    # electrolyte columns
    dce = np.zeros((nc, 3 * P))
    dce += drop_coef[:, None] * ds_phi_dce
    dce[:, :P] += (detap_di0 * di0p_dcep / P)[:, None]
    dce[:, 2 * P:] += (-detan_di0 * di0n_dcen / P)[:, None]
    dce[:, 0] += tv * (1.0 - pa.t_plus) / ce_e[:, 0]
    dce[:, -1] -= tv * (1.0 - pa.t_plus) / ce_e[:, -1]
    dv[:, 3:3 + 3 * P] = dce
    dpol[:, 3:3 + 3 * P] = dce

    # temperature column
    detap_dT = eta_p / T + detap_di0 * (di0p_dthp * dthp_dT + di0p_dT)
    detan_dT = eta_n / T + detan_di0 * (di0n_dthn * dthn_dT + di0n_dT)
    ocp_T = dup * dthp_dT - dun * dthn_dT
    rest_T = (detap_dT - detan_dT) + drop_coef * ds_phi_dT + l_log / T
    dv[:, -1] = ocp_T + rest_T
    dpol[:, -1] = rest_T

    # current derivative
    dthp_dI = cp_i
    dthn_dI = -cn_i
    detap_dI = tv * sp * (-1.0 / (pa.B_p * i0p)) + detap_di0 * di0p_dthp * dthp_dI
    detan_dI = tv * sn * (1.0 / (pa.B_n * i0n)) + detan_di0 * di0n_dthn * dthn_dI
    ocp_I = dup * dthp_dI - dun * dthn_dI
    rest_I = -pa.R_sei + detap_dI - detan_dI - s_phi / (2.0 * P * pa.A)
    dv_di = ocp_I + rest_I

    out.update({
        "dV_dx": dv, "dV_dI": dv_di,
        "dpol_dx": dpol, "dpol_dI": rest_I,
        "dUpUn_dx": dv - dpol, "dUpUn_dI": ocp_I,
    })
    return out


def terminal_voltage(states, i_app, pa: CellParamArrays, clip=False):
    """Terminal voltage and the two open-circuit potentials."""
    out = _voltage_core(states, i_app, pa, clip=clip, grad=False)
    return out["V"], out["U_p"], out["U_n"]


def voltage_gradients(states, i_app, pa: CellParamArrays, clip=False):
    """Voltage map with derivatives w.r.t. the cell state and applied current."""
    return _voltage_core(states, i_app, pa, clip=clip, grad=True)


def thermal_rate(states, i_app, v, u_p, u_n, pa: CellParamArrays):
    """Lumped temperature rate from polarization heating and sink cooling."""
    _, _, _, _, T = _split_state(states, pa.P)
    i_app = np.atleast_1d(np.asarray(i_app, dtype=float))
    q_heat = np.abs(i_app) * np.abs(v - (u_p - u_n))
    return (q_heat - (T - pa.T_sink) / pa.R_th) / pa.C_th


def cell_rhs(states, i_app, pa: CellParamArrays, clip=False):
    """Full state derivative, shape (cells, 4+3P)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    i_app = np.atleast_1d(np.asarray(i_app, dtype=float))
    dth, dqp, dqn = solid_phase_rates(states, i_app, pa)
    dce = electrolyte_rates(states, i_app, pa)
    v, up, un = terminal_voltage(states, i_app, pa, clip=clip)
    dT = thermal_rate(states, i_app, v, up, un, pa)
    out = np.empty_like(states)
    out[:, 0] = dth
    out[:, 1] = dqp
    out[:, 2] = dqn
    out[:, 3:3 + 3 * pa.P] = dce
    out[:, -1] = dT
    return out


def rhs_jacobian(states, i_app, pa: CellParamArrays, clip=False):
    """Per-cell Jacobians of the rhs: (cells, Nx, Nx) in state, (cells, Nx) in current.

    Also returns the voltage-map gradients so callers can assemble the
    algebraic and output Jacobians without re-evaluating the voltage.
    """
    P = pa.P
    states = np.atleast_2d(np.asarray(states, dtype=float))
    th, qp, qn, ce, T = _split_state(states, P)
    i_app = np.atleast_1d(np.asarray(i_app, dtype=float))
    nc = states.shape[0]
    n_x = pa.n_x

    vg = _voltage_core(states, i_app, pa, clip=clip, grad=True)
    pol = vg["pol"]
    sign_i = np.sign(i_app)
    sign_pol = np.sign(pol)

    rt = pa.Rgas * T
    rt2 = pa.Rgas * T**2
    dsp = pa.Ds0_p * np.exp(-pa.Ea_Ds_p / rt)
    dsn = pa.Ds0_n * np.exp(-pa.Ea_Ds_n / rt)
    de = pa.De0 * np.exp(-pa.Ea_De / rt)

    f_x = np.zeros((nc, n_x, n_x))
    # concentration-flux rows
    f_x[:, 1, 1] = -30.0 * dsp / pa.Rp_p**2
    f_x[:, 2, 2] = -30.0 * dsn / pa.Rp_n**2
    f_x[:, 1, -1] = -30.0 * qp / pa.Rp_p**2 * (dsp * pa.Ea_Ds_p / rt2)
    f_x[:, 2, -1] = -30.0 * qn / pa.Rp_n**2 * (dsn * pa.Ea_Ds_n / rt2)
    # electrolyte rows
    sl = slice(3, 3 + 3 * P)
    f_x[:, sl, sl] = de[:, None, None] * pa.L0eps
    diff = np.einsum("cij,cj->ci", pa.L0eps, ce)
    f_x[:, sl, -1] = diff * (de * pa.Ea_De / rt2)[:, None]
    # thermal row
    dq_dx = (np.abs(i_app) * sign_pol)[:, None] * vg["dpol_dx"]
    f_x[:, -1, :] = dq_dx / pa.C_th[:, None]
    f_x[:, -1, -1] -= 1.0 / (pa.R_th * pa.C_th)

    f_i = np.zeros((nc, n_x))
    f_i[:, 0] = pa.c_theta
    f_i[:, 1] = pa.c_qp
    f_i[:, 2] = pa.c_qn
    f_i[:, sl] = pa.src_eps
    dq_di = sign_i * np.abs(pol) + np.abs(i_app) * sign_pol * vg["dpol_dI"]
    f_i[:, -1] = dq_di / pa.C_th

    return f_x, f_i, vg
