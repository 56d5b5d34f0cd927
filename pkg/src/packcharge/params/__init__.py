"""Cell parameter records, derived geometry and config-file round-tripping.

All quantities are SI unless noted: lengths in m, areas in m2, concentrations
in mol/m3, temperatures in K, resistances in Ohm, energies in J/mol. Cell
capacity C_cap is in Ah (converted to coulombs where it enters formulas).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from importlib import resources


class ParameterError(ValueError):
    """Raised when a parameter record is inconsistent or unphysical."""


@dataclass(frozen=True)
class CellParams:
    """Electrochemical/thermal/geometric record for one cell.

    Stoichiometry windows: theta0/theta100 are the electrode stoichiometries
    at 0% and 100% SOC. The cathode window is decreasing (theta100_p <
    theta0_p); both windows must lie in (0, 1) and have nonzero width.
    """

    theta0_p: float
    theta100_p: float
    theta0_n: float
    theta100_n: float
    cs_max_p: float          # mol/m3
    cs_max_n: float          # mol/m3
    Rp_p: float              # particle radius, m
    Rp_n: float              # m
    L_p: float               # section thickness, m
    L_s: float               # m
    L_n: float               # m
    A: float                 # electrode area, m2
    C_cap: float             # capacity, Ah
    Ds0_p: float             # solid diffusion pre-exponential, m2/s
    Ds0_n: float             # m2/s
    Ea_Ds_p: float           # activation energies, J/mol
    Ea_Ds_n: float
    Ea_kappa: float
    Ea_De: float
    Ea_k_p: float
    Ea_k_n: float
    De0: float               # electrolyte diffusion pre-exponential, m2/s
    t_plus: float            # transference number
    eps_p: float             # porosities
    eps_s: float
    eps_n: float
    brug_p: float            # Bruggeman exponents
    brug_s: float
    brug_n: float
    k0_p: float              # reaction-rate pre-exponentials
    k0_n: float
    R_sei: float             # film resistance, Ohm
    C_th: float              # thermal capacity, J/K
    R_th: float              # thermal resistance, K/W
    T_sink: float            # coolant temperature, K
    F: float = 96485.33212   # C/mol
    Rgas: float = 8.314462618  # J/mol/K
    P: int = 2               # finite volumes per section

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = (
            "cs_max_p", "cs_max_n", "Rp_p", "Rp_n", "L_p", "L_s", "L_n", "A",
            "C_cap", "Ds0_p", "Ds0_n", "De0", "eps_p", "eps_s", "eps_n",
            "brug_p", "brug_s", "brug_n", "k0_p", "k0_n", "C_th", "R_th",
            "T_sink", "F", "Rgas",
        )
        for name in positive:
            v = getattr(self, name)
            if not (v > 0.0):
                raise ParameterError(f"{name} must be strictly positive, got {v!r}")
        nonneg = ("R_sei", "Ea_Ds_p", "Ea_Ds_n", "Ea_kappa", "Ea_De", "Ea_k_p", "Ea_k_n")
        for name in nonneg:
            v = getattr(self, name)
            if v < 0.0:
                raise ParameterError(f"{name} must be nonnegative, got {v!r}")
        for name in ("theta0_p", "theta100_p", "theta0_n", "theta100_n"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ParameterError(f"{name} must lie in (0, 1), got {v!r}")
        if self.theta100_p == self.theta0_p:
            raise ParameterError("cathode stoichiometry window has zero width")
        if self.theta100_n == self.theta0_n:
            raise ParameterError("anode stoichiometry window has zero width")
        if not (0.0 < self.t_plus < 1.0):
            raise ParameterError(f"t_plus must lie in (0, 1), got {self.t_plus!r}")
        if self.P < 1:
            raise ParameterError(f"P must be >= 1, got {self.P!r}")

    def replace(self, **changes) -> "CellParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CellParams":
        fields = {f.name for f in dataclasses.fields(cls)}
        known = {k: v for k, v in data.items() if k in fields}
        unknown = [k for k in data if k not in fields and not k.startswith("_")]
        if unknown:
            raise ParameterError(f"unknown parameter keys: {unknown}")
        if "P" in known:
            known["P"] = int(known["P"])
        return cls(**known)

    @property
    def i_1c(self) -> float:
        """1C current in A (charges the nominal capacity in one hour)."""
        return self.C_cap

    @property
    def capacity_coulombs(self) -> float:
        return self.C_cap * 3600.0


@dataclass(frozen=True)
class DerivedGeometry:
    """Quantities derived from a CellParams record."""

    eps_act_p: float   # active-material volume fraction
    eps_act_n: float
    a_p: float         # specific active surface area, 1/m
    a_n: float
    dx_p: float        # finite-volume width, m
    dx_s: float
    dx_n: float


def derive_geometry(params: CellParams) -> DerivedGeometry:
    """Active-material fractions, surface areas and finite-volume widths.

    eps_act_p = -C / (dtheta_p * A * F * L_p * cs_max_p) with C in coulombs;
    the anode takes the + sign. a_i = 3*eps_act_i / Rp_i, dx_j = L_j / P.
    """
    c_coul = params.capacity_coulombs
    dtheta_p = params.theta100_p - params.theta0_p
    dtheta_n = params.theta100_n - params.theta0_n
    eps_act_p = -c_coul / (dtheta_p * params.A * params.F * params.L_p * params.cs_max_p)
    eps_act_n = c_coul / (dtheta_n * params.A * params.F * params.L_n * params.cs_max_n)
    geom = DerivedGeometry(
        eps_act_p=eps_act_p,
        eps_act_n=eps_act_n,
        a_p=3.0 * eps_act_p / params.Rp_p,
        a_n=3.0 * eps_act_n / params.Rp_n,
        dx_p=params.L_p / params.P,
        dx_s=params.L_s / params.P,
        dx_n=params.L_n / params.P,
    )
    for name in ("eps_act_p", "eps_act_n", "a_p", "a_n", "dx_p", "dx_s", "dx_n"):
        v = getattr(geom, name)
        if not (v > 0.0) or not (v < float("inf")):
            raise ParameterError(
                f"derived quantity {name} = {v!r} is not finite and positive; "
                "check the stoichiometry window signs and capacity"
            )
    return geom


def load_cell_params(path) -> CellParams:
    with open(path, "r", encoding="utf-8") as fh:
        return CellParams.from_dict(json.load(fh))


def save_cell_params(params: CellParams, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def kokam_reference() -> CellParams:
    """Representative 7.5 Ah Kokam SLPB 75106100 record shipped with the package."""
    text = resources.files(__package__).joinpath("kokam_reference.json").read_text("utf-8")
    return CellParams.from_dict(json.loads(text))
