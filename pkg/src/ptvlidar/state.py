"""State parameterizations: raw optimization variables -> physical variables.

The estimated variables live in unconstrained x-space; realize() applies the
soft-limit mappings (exponentials for positive quantities, cumulative lapse
integration for temperature), fits the per-time linear temperature profile,
and closes pressure hydrostatically. Physical fields are [time, range] at
native resolution; coarsened x-fields are block-replicated up first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import M_H2O, N_AVOGADRO
from .grids import (Field2D, Grid, block_sum, check_compatible, coarse_shape,
                    resample_up)

# per-m^3 number density per (g/m^3) of absolute humidity
HUMIDITY_TO_NUMBER = N_AVOGADRO / M_H2O

# estimated-variable names in canonical order
FIELD_NAMES = ("x_phi", "x_B", "x_Cwv", "x_n", "x_Cmol", "x_T", "x_Gon")

# floor used by inverse parameterizations so log(0) stays finite
_LOG_FLOOR = 1e-300


@dataclass
class StateVector:
    """Raw estimation variables plus surface boundary series.

    x_phi, x_B, x_Cwv, x_n are Field2D (x_n in g/m^3); x_Cmol is per-range
    with index 0 pinned to 0; x_T is a coarsened Field2D of local lapse rate
    [K/m]; x_Gon is per-time. T_surface [K] and P_surface [Pa] are known
    per-time boundary measurements, never estimated.
    """

    x_phi: Field2D
    x_B: Field2D
    x_Cwv: Field2D
    x_n: Field2D
    x_Cmol: np.ndarray
    x_T: Field2D
    x_Gon: np.ndarray
    T_surface: np.ndarray
    P_surface: np.ndarray

    def __post_init__(self):
        self.x_Cmol = np.asarray(self.x_Cmol, dtype=float)
        self.x_Gon = np.asarray(self.x_Gon, dtype=float)
        self.T_surface = np.asarray(self.T_surface, dtype=float)
        self.P_surface = np.asarray(self.P_surface, dtype=float)
        if self.x_Cmol.size:
            self.x_Cmol[0] = 0.0

    def copy(self) -> "StateVector":
        return StateVector(
            x_phi=self.x_phi.copy(), x_B=self.x_B.copy(),
            x_Cwv=self.x_Cwv.copy(), x_n=self.x_n.copy(),
            x_Cmol=self.x_Cmol.copy(), x_T=self.x_T.copy(),
            x_Gon=self.x_Gon.copy(), T_surface=self.T_surface.copy(),
            P_surface=self.P_surface.copy())

    def get(self, name: str) -> np.ndarray:
        """Raw value array for one estimated variable (views, not copies)."""
        if name not in FIELD_NAMES:
            raise KeyError(name)
        attr = getattr(self, name)
        return attr.values if isinstance(attr, Field2D) else attr

    def set(self, name: str, values: np.ndarray) -> None:
        if name not in FIELD_NAMES:
            raise KeyError(name)
        attr = getattr(self, name)
        values = np.asarray(values, dtype=float)
        if isinstance(attr, Field2D):
            if values.shape != attr.values.shape:
                raise ValueError(f"{name}: shape {values.shape} != "
                                 f"{attr.values.shape}")
            attr.values = values
        else:
            if values.shape != attr.shape:
                raise ValueError(f"{name}: shape {values.shape} != {attr.shape}")
            setattr(self, name, values)
        if name == "x_Cmol":
            self.x_Cmol[0] = 0.0

    def check(self, grid: Grid) -> None:
        for name in ("x_phi", "x_B", "x_Cwv", "x_n", "x_T"):
            check_compatible(getattr(self, name), grid)
        if self.x_Cmol.shape != (grid.n_range,):
            raise ValueError("x_Cmol must be per-range")
        for name in ("x_Gon", "T_surface", "P_surface"):
            if getattr(self, name).shape != (grid.n_time,):
                raise ValueError(f"{name} must be per-time")
        if not all(np.all(np.isfinite(self.get(n))) for n in FIELD_NAMES):
            raise ValueError("state contains non-finite values")


@dataclass
class PhysicalState:
    """Realized physical variables on the native grid.

    phi, B, C_wv, T, P are [time, range]; n is water vapor number density
    [1/m^3]; C_mol is per-range; G_on, Tbar0 [K], L0 [K/m] are per-time.
    """

    phi: np.ndarray
    B: np.ndarray
    C_wv: np.ndarray
    n: np.ndarray
    C_mol: np.ndarray
    T: np.ndarray
    G_on: np.ndarray
    Tbar0: np.ndarray
    L0: np.ndarray
    P: np.ndarray


def linear_fit_temperature(T: np.ndarray, r: np.ndarray) -> tuple[float, float]:
    """Least-squares line through (r, T): returns (intercept K, slope K/m)."""
    T = np.asarray(T, dtype=float)
    r = np.asarray(r, dtype=float)
    if T.size < 2:
        raise ValueError("linear temperature fit needs >= 2 range points")
    G = fit_pinv(r)
    coef = G @ T
    return float(coef[0]), float(coef[1])


def fit_pinv(r: np.ndarray) -> np.ndarray:
    """Pseudo-inverse of the [1, r] design matrix, shape [2, n_range]."""
    A = np.stack([np.ones_like(r), r], axis=1)
    return np.linalg.pinv(A)


def integrate_lapse(xu_native: np.ndarray, T_surface: np.ndarray,
                    dr: float) -> np.ndarray:
    """T_k = T_{k-1} + dr*x_k for k >= 1, anchored at T_surface in gate 0.

    The k = 0 lapse entry never enters (the anchor is the surface value), so
    its gradient through the forward model is structurally zero.
    """
    inc = xu_native.copy()
    inc[:, 0] = 0.0
    return T_surface[:, None] + dr * np.cumsum(inc, axis=1)


def realize(state: StateVector, grid: Grid) -> PhysicalState:
    """Apply every parameterization and close pressure hydrostatically."""
    from .forward import pressure_profile  # deferred: forward imports state

    state.check(grid)
    phi = np.exp(resample_up(state.x_phi, grid))
    B = 1.0 + np.exp(resample_up(state.x_B, grid))
    C_wv = np.exp(resample_up(state.x_Cwv, grid))
    n = resample_up(state.x_n, grid) * HUMIDITY_TO_NUMBER

    x = state.x_Cmol
    two_term = np.concatenate([[x[0]], x[:-1] + x[1:]])
    C_mol = np.exp(two_term)

    xu = resample_up(state.x_T, grid)
    T = integrate_lapse(xu, state.T_surface, grid.dr)
    G_on = np.exp(state.x_Gon)

    G = fit_pinv(grid.range_centers)
    coef = T @ G.T                       # [time, 2]
    Tbar0, L0 = coef[:, 0], coef[:, 1]

    P = np.empty_like(T)
    for t in range(grid.n_time):
        P[t] = pressure_profile(Tbar0[t], L0[t], state.P_surface[t], grid)

    return PhysicalState(phi=phi, B=B, C_wv=C_wv, n=n, C_mol=C_mol, T=T,
                         G_on=G_on, Tbar0=Tbar0, L0=L0, P=P)


def initial_state(grid: Grid, instrument, surface: tuple[np.ndarray, np.ndarray],
                  *, C_wv0: float = 1.0, C_mol0: np.ndarray | None = None,
                  t_factor: int = 8, r_factor: int = 4,
                  lapse0: float = -0.009) -> StateVector:
    """Standard initial conditions.

    Common terms, WV overlap, online gain at their configured constants;
    backscatter ratio 1.01; humidity 0; molecular overlap 1.0 unless a prior
    calibration vector is given; temperature a 9 K/km lapse from the surface
    (temperature decreasing upward). x_T is coarsened by (t_factor, r_factor).
    """
    del instrument  # reserved for signal-scale-based C_wv initialization
    T0, P0 = surface
    T0 = np.asarray(T0, dtype=float)
    P0 = np.asarray(P0, dtype=float)
    if T0.shape != (grid.n_time,) or P0.shape != (grid.n_time,):
        raise ValueError("surface series must be per-time")
    shape = grid.shape()

    def native(v: float) -> Field2D:
        return Field2D(np.full(shape, v), (1, 1))

    if C_mol0 is None:
        x_Cmol = np.zeros(grid.n_range)
    else:
        x_Cmol = inverse_Cmol(np.asarray(C_mol0, dtype=float))
    ct = coarse_shape(shape, (t_factor, r_factor))
    return StateVector(
        x_phi=native(0.0),
        x_B=native(np.log(0.01)),
        x_Cwv=native(np.log(C_wv0)),
        x_n=native(0.0),
        x_Cmol=x_Cmol,
        x_T=Field2D(np.full(ct, lapse0), (t_factor, r_factor)),
        x_Gon=np.zeros(grid.n_time),
        T_surface=T0,
        P_surface=P0,
    )


# inverse parameterizations (used by the simulator and warm starts)

def inverse_phi(phi: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(phi, _LOG_FLOOR))


def inverse_B(B: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(np.asarray(B, dtype=float) - 1.0, _LOG_FLOOR))


def inverse_Cwv(C: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(C, _LOG_FLOOR))


def inverse_n(n_number: np.ndarray) -> np.ndarray:
    """Number density [1/m^3] -> absolute humidity [g/m^3]."""
    return np.asarray(n_number, dtype=float) / HUMIDITY_TO_NUMBER


def inverse_Cmol(C: np.ndarray) -> np.ndarray:
    """Invert the two-term overlap map; requires C[0] = 1."""
    C = np.asarray(C, dtype=float)
    if abs(C[0] - 1.0) > 1e-12:
        raise ValueError("C_mol[0] must be 1 (x index 0 is pinned to 0)")
    lnC = np.log(np.maximum(C, _LOG_FLOOR))
    x = np.zeros_like(lnC)
    for k in range(1, x.size):
        x[k] = lnC[k] - x[k - 1]
    return x


def inverse_Gon(G: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(G, _LOG_FLOOR))


def lapse_from_temperature(T: np.ndarray, dr: float,
                           factors: tuple[int, int]) -> Field2D:
    """Coarse lapse-rate field whose realization best matches native T.

    Native increments (T_k - T_{k-1})/dr are block-averaged onto the coarse
    grid. Entry k = 0 is a dead coordinate (the surface anchor), so it is
    excluded from its block's average rather than dragging it toward zero.
    """
    inc = np.zeros_like(T)
    inc[:, 1:] = np.diff(T, axis=1) / dr
    live = np.ones_like(T)
    live[:, 0] = 0.0
    weight = np.maximum(block_sum(live, factors), 1.0)
    return Field2D(block_sum(inc, factors) / weight, factors)
