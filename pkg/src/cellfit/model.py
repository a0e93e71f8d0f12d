"""Coupled electro-thermal equivalent-circuit model of a lithium-ion cell.

Electrical side: a double-capacitor RC chain (bulk capacitor C_b, surface
capacitor C_s, diffusion resistor R_b) in series with an open-circuit
voltage source U = ocv(V_s) and an ohmic resistor R_o. Thermal side: a
two-node lumped circuit with core/surface heat capacities (C_core, C_surf),
core-to-surface conduction R_core and surface-to-ambient convection R_surf.

The two sides couple both ways: R_b and R_o depend on the core temperature
through an Arrhenius law, and the ohmic/diffusion overpotential feeds heat
into the core,

    Q_gen = I * (V - ocv(SoC)),   V = ocv(V_s) + R_o(T_c) * I.

State vector order is [V_b, V_s, T_c, T_s] (volts, volts, kelvin, kelvin).
Sign convention: I < 0 discharges the cell. All temperatures are absolute;
there is no Celsius anywhere in this package.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

# Reference temperature of the Arrhenius law [K].
T_REF = 298.0

STATE_LABELS = ("V_b", "V_s", "T_c", "T_s")

PARAM_NAMES = (
    "C_b", "C_s", "R_b", "R_o",
    "C_core", "C_surf", "R_core", "R_surf",
    "kappa1", "kappa2",
)


@dataclass(frozen=True)
class CellParams:
    """The ten physical parameters of the cell model.

    Electrical: C_b, C_s [F], R_b, R_o [ohm]. Thermal: C_core, C_surf [J/K],
    R_core, R_surf [K/W]. Arrhenius coefficients kappa1 (acts on R_o) and
    kappa2 (acts on R_b), both in kelvin.
    """

    C_b: float
    C_s: float
    R_b: float
    R_o: float
    C_core: float
    C_surf: float
    R_core: float
    R_surf: float
    kappa1: float
    kappa2: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "CellParams":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(PARAM_NAMES),):
            raise ValueError(f"expected {len(PARAM_NAMES)} parameters, got shape {values.shape}")
        return cls(*(float(v) for v in values))

    def validate(self) -> None:
        """Raise ValueError unless every parameter is strictly positive."""
        for name in PARAM_NAMES:
            if not getattr(self, name) > 0.0:
                raise ValueError(f"parameter {name} must be strictly positive")


# Nominal 3.3 Ah NCA/graphite cell used throughout the synthetic studies.
NOMINAL = CellParams(
    C_b=10037.0, C_s=973.0, R_b=0.019, R_o=0.026,
    C_core=40.0, C_surf=10.0, R_core=4.0, R_surf=7.0,
    kappa1=30.0, kappa2=70.0,
)

# Default per-parameter search ranges for identification.
SEARCH_BOX = {
    "C_b": (7000.0, 11000.0),
    "C_s": (700.0, 1100.0),
    "R_b": (0.0, 0.1),
    "R_o": (0.0, 0.1),
    "C_core": (20.0, 70.0),
    "C_surf": (0.0, 20.0),
    "R_core": (0.0, 10.0),
    "R_surf": (5.0, 15.0),
    "kappa1": (0.0, 100.0),
    "kappa2": (0.0, 100.0),
}


def search_box_array(box: dict[str, tuple[float, float]] | None = None) -> np.ndarray:
    """Search box as a (10, 2) array of [lo, hi] rows in canonical order."""
    box = SEARCH_BOX if box is None else box
    out = np.array([box[n] for n in PARAM_NAMES], dtype=float)
    if np.any(out[:, 0] >= out[:, 1]):
        raise ValueError("search box must satisfy lo < hi in every dimension")
    return out


@dataclass(frozen=True)
class OcvCurve:
    """Monotone piecewise-linear open-circuit voltage curve U = ocv(V_s).

    Breakpoints live on the surface charge state in [0, 1]; evaluation
    outside the breakpoint range clamps to the endpoint values so that
    badly-parameterized simulations cannot produce unbounded voltages.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        va = np.asarray(self.values, dtype=float)
        if bp.ndim != 1 or bp.shape != va.shape or bp.size < 2:
            raise ValueError("breakpoints and values must be 1-D arrays of equal length >= 2")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(np.diff(va) <= 0):
            raise ValueError("OCV values must be strictly increasing")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", va)

    def __call__(self, s):
        """Interpolated OCV [V] at surface charge state ``s`` (scalar or array)."""
        return np.interp(s, self.breakpoints, self.values)

    @classmethod
    def default(cls) -> "OcvCurve":
        """Built-in NCA/graphite-like curve: steep knee below 0.1, mid plateau."""
        return cls(
            breakpoints=np.linspace(0.0, 1.0, 11),
            values=np.array([3.00, 3.45, 3.55, 3.62, 3.67, 3.72,
                             3.78, 3.85, 3.94, 4.06, 4.20]),
        )

    @classmethod
    def from_csv(cls, path) -> "OcvCurve":
        """Load a curve from a two-column CSV (V_s, OCV_volts) with a header row."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 3:
            raise ValueError(f"OCV table {path} needs a header and at least two rows")
        data = np.array([[float(r[0]), float(r[1])] for r in rows[1:]])
        return cls(breakpoints=data[:, 0], values=data[:, 1])


def arrhenius_resistance(r_base: float, kappa: float, t_core: float,
                         t_ref: float = T_REF) -> float:
    """Temperature-corrected resistance r_base * exp(kappa * (1/T_c - 1/T_ref)).

    For kappa > 0 the resistance strictly decreases with core temperature.
    """
    if t_core <= 0.0 or t_ref <= 0.0:
        raise ValueError("temperatures must be strictly positive kelvin")
    return r_base * math.exp(kappa * (1.0 / t_core - 1.0 / t_ref))


def soc(v_b, v_s, c_b: float, c_s: float):
    """State of charge as the capacity-weighted mean of V_b and V_s.

    Returns a fraction in [0, 1] for states within the charge endpoints
    (multiply by 100 for percent). Accepts scalars or arrays.
    """
    if c_b <= 0.0 or c_s <= 0.0:
        raise ValueError("capacitances must be strictly positive")
    return (c_b * v_b + c_s * v_s) / (c_b + c_s)


def heat_generation(current: float, voltage: float, soc_value: float,
                    ocv: OcvCurve) -> float:
    """Heat input to the core [W]: I * (V - ocv(SoC)).

    May be transiently negative; the model places no sign constraint.
    """
    return current * (voltage - float(ocv(soc_value)))


def output(x, current: float, params: CellParams, ocv: OcvCurve,
           t_ref: float = T_REF) -> tuple[float, float]:
    """Noiseless measurement map: terminal voltage and surface temperature.

    V = ocv(V_s) + R_o(T_c) * I; the second output is the T_s component
    of the state, returned unchanged.
    """
    v_b, v_s, t_c, t_s = (float(v) for v in x)
    r_o_t = arrhenius_resistance(params.R_o, params.kappa1, t_c, t_ref)
    return float(ocv(v_s)) + r_o_t * current, t_s


def state_derivative(x, current: float, t_amb: float, params: CellParams,
                     ocv: OcvCurve, t_ref: float = T_REF) -> np.ndarray:
    """Time derivative of [V_b, V_s, T_c, T_s] at state ``x``.

    The electrical block exchanges charge through the Arrhenius-corrected
    diffusion resistance; the thermal block is driven by the heat generated
    by the present operating point and by the ambient temperature.
    """
    v_b, v_s, t_c, t_s = (float(v) for v in x)
    r_b_t = arrhenius_resistance(params.R_b, params.kappa2, t_c, t_ref)

    dv_b = (v_s - v_b) / (params.C_b * r_b_t)
    dv_s = (v_b - v_s) / (params.C_s * r_b_t) + current / params.C_s

    v_term, _ = output(x, current, params, ocv, t_ref)
    q_gen = heat_generation(current, v_term, soc(v_b, v_s, params.C_b, params.C_s), ocv)

    dt_c = (t_s - t_c) / (params.R_core * params.C_core) + q_gen / params.C_core
    dt_s = ((t_c - t_s) / (params.R_core * params.C_surf)
            + (t_amb - t_s) / (params.R_surf * params.C_surf))

    return np.array([dv_b, dv_s, dt_c, dt_s])
