"""Absorption cross sections and the molecular scattering spectrum.

Provides a Voigt line-by-line oracle for oxygen and water vapor cross
sections, a Gaussian (Knudsen-limit) surrogate for the Rayleigh-Brillouin
shape, and fast principal-component surrogates trained on those oracles.
Surrogates are polynomial in normalized (T, P) and analytically
differentiable in temperature, which the solver's chain rule requires.

Conventions: cross sections in m^2 on the grid's frequency comb; the
molecular scattering shape is renormalized to unit sum over the comb at
every (T, P) so spectral sums need no d-nu factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import wofz

from .constants import C_LIGHT, KB, M_AIR, N_AVOGADRO
from .grids import Grid

# line-list reference conditions (strengths and widths are quoted here)
T_REF = 296.0       # K
P_REF = 101325.0    # Pa

# default absolute carrier frequencies for Doppler widths [Hz]
NU0_O2_BAND = C_LIGHT / 770e-9   # ~3.893e14, oxygen DIAL / HSRL carrier
NU0_WV_BAND = C_LIGHT / 828e-9   # ~3.621e14, water vapor DIAL carrier

# oracle validity domain
T_DOMAIN = (150.0, 350.0)   # K
P_DOMAIN = (100.0, 120000.0)  # Pa

QUANTITIES = ("oxygen_xsec", "wv_xsec", "rayleigh_brillouin")


@dataclass(frozen=True)
class LineRecord:
    """One absorption line.

    center_offset : Hz relative to the transmit frequency
    strength_ref : integrated line strength [m^2 Hz] at T_REF
    lorentz_width_ref : Lorentz HWHM [Hz] at (T_REF, P_REF)
    temp_exponent : broadening temperature exponent (dimensionless)
    lower_state_energy : lower-state energy [J] for strength T scaling
    species_mass : molecular mass [kg]
    """

    center_offset: float
    strength_ref: float
    lorentz_width_ref: float
    temp_exponent: float
    lower_state_energy: float
    species_mass: float

    def __post_init__(self):
        if self.strength_ref <= 0:
            raise ValueError("strength_ref must be > 0")
        if self.lorentz_width_ref < 0:
            raise ValueError("lorentz_width_ref must be >= 0")
        if self.species_mass <= 0:
            raise ValueError("species_mass must be > 0")


def _check_domain(T, P) -> None:
    T = np.asarray(T, dtype=float)
    P = np.asarray(P, dtype=float)
    if np.any(T <= T_DOMAIN[0]) or np.any(T >= T_DOMAIN[1]):
        raise ValueError(f"temperature outside oracle domain {T_DOMAIN} K")
    if np.any(P <= P_DOMAIN[0]) or np.any(P >= P_DOMAIN[1]):
        raise ValueError(f"pressure outside oracle domain {P_DOMAIN} Pa")


def voigt_profile(nu: np.ndarray, sigma_g: float, gamma_l: float) -> np.ndarray:
    """Area-normalized Voigt profile [1/Hz].

    sigma_g is the Gaussian std, gamma_l the Lorentzian HWHM. Degenerates to
    the pure Gaussian for gamma_l = 0 and (numerically) to the Lorentzian for
    sigma_g -> 0.
    """
    nu = np.asarray(nu, dtype=float)
    if sigma_g <= 0:
        # pure Lorentzian limit
        return gamma_l / np.pi / (nu**2 + gamma_l**2)
    z = (nu + 1j * gamma_l) / (sigma_g * np.sqrt(2.0))
    return np.real(wofz(z)) / (sigma_g * np.sqrt(2.0 * np.pi))


def oracle_absorption(lines: list[LineRecord], T: float, P: float, grid: Grid,
                      nu0_abs: float = NU0_O2_BAND) -> np.ndarray:
    """Line-by-line Voigt absorption cross section on the comb [m^2].

    Per line: Doppler std sigma_D = (nu0_abs/c)*sqrt(kB*T/m), Lorentz HWHM
    gamma_L = ref*(P/P_REF)*(T_REF/T)^n, strength scaled by the Boltzmann
    factor exp[(E''/kB)(1/T_REF - 1/T)].
    """
    _check_domain(T, P)
    T = float(T)
    P = float(P)
    out = np.zeros(grid.n_freq)
    for ln in lines:
        sigma_d = (nu0_abs / C_LIGHT) * np.sqrt(KB * T / ln.species_mass)
        gamma_l = ln.lorentz_width_ref * (P / P_REF) * (T_REF / T) ** ln.temp_exponent
        strength = ln.strength_ref * np.exp(
            (ln.lower_state_energy / KB) * (1.0 / T_REF - 1.0 / T))
        out += strength * voigt_profile(
            grid.freq_offsets - ln.center_offset, sigma_d, gamma_l)
    return out


def oracle_rayleigh_brillouin(T: float, P: float, grid: Grid,
                              nu0_abs: float = NU0_O2_BAND) -> np.ndarray:
    """Unit-sum molecular scattering shape on the comb.

    Gaussian Knudsen-limit surrogate: std sigma_RB = (nu0/c)*sqrt(2*kB*T/m_air)
    (the factor 2 is the double Doppler shift of backscatter), renormalized to
    sum to 1 over the comb. P is accepted for interface uniformity.
    """
    _check_domain(T, P)
    m_air = M_AIR / N_AVOGADRO
    sigma = (nu0_abs / C_LIGHT) * np.sqrt(2.0 * KB * float(T) / m_air)
    shape = np.exp(-0.5 * (grid.freq_offsets / sigma) ** 2)
    return shape / shape.sum()


class SurrogateTrainingError(RuntimeError):
    pass


@dataclass
class SpectroModel:
    """PCA surrogate for one spectral quantity, differentiable in T.

    value(T,P) = mean + sum_m poly_m(Tn, Pn) * component_m, with (Tn, Pn) the
    (T, P) point mapped to [-1, 1]^2 over the training domain and poly_m a
    bivariate polynomial of total degree <= d. rayleigh_brillouin quantities
    are renormalized to unit sum after reconstruction. Immutable after
    training; evaluate is pure and reentrant.
    """

    quantity: str
    mean_spectrum: np.ndarray          # [n_freq]
    components: np.ndarray             # [M, n_freq]
    coeffs: np.ndarray                 # [M, n_terms]
    powers: np.ndarray                 # [n_terms, 2] (T power, P power)
    t_range: tuple[float, float]
    p_range: tuple[float, float]
    train_report: dict = field(default_factory=dict)

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def in_domain(self, T, P) -> np.ndarray:
        T = np.asarray(T, dtype=float)
        P = np.asarray(P, dtype=float)
        return ((T >= self.t_range[0]) & (T <= self.t_range[1])
                & (P >= self.p_range[0]) & (P <= self.p_range[1]))


def _poly_powers(degree: int) -> np.ndarray:
    return np.array([(i, j) for i in range(degree + 1)
                     for j in range(degree + 1 - i)], dtype=int)


def _normalize(x, lo: float, hi: float):
    if hi <= lo:
        # degenerate training axis: map everything to 0
        return np.zeros_like(np.asarray(x, dtype=float)), 0.0
    scale = 2.0 / (hi - lo)
    return (np.asarray(x, dtype=float) - lo) * scale - 1.0, scale


def _design_matrix(Tn: np.ndarray, Pn: np.ndarray, powers: np.ndarray) -> np.ndarray:
    # columns Tn^i * Pn^j for each (i, j) row of powers
    return np.stack([Tn ** i * Pn ** j for i, j in powers], axis=-1)


def train_surrogate(oracle, T_grid: np.ndarray, P_grid: np.ndarray,
                    M: int = 6, d: int = 4,
                    quantity: str = "oxygen_xsec",
                    rel_rms_tol: float = 1e-3) -> SpectroModel:
    """Fit a SpectroModel to an oracle over a (T, P) training grid.

    oracle: callable (T, P) -> per-comb spectrum. The training report records
    the worst relative reconstruction RMS over the grid, the polynomial fit
    condition number, and the count of materially negative reconstructions.
    Training fails if the grid-point reconstruction error exceeds
    rel_rms_tol, if more than 0.1% of reconstructions dip negative, or if
    the polynomial fit is ill-conditioned.
    """
    if quantity not in QUANTITIES:
        raise ValueError(f"unknown quantity {quantity!r}")
    T_grid = np.asarray(T_grid, dtype=float)
    P_grid = np.asarray(P_grid, dtype=float)
    powers = _poly_powers(d)
    n_terms = powers.shape[0]
    n_samples = T_grid.size * P_grid.size
    if n_samples < n_terms:
        raise SurrogateTrainingError(
            f"training grid has {n_samples} points, need >= {n_terms}")

    TT, PP = np.meshgrid(T_grid, P_grid, indexing="ij")
    Tf, Pf = TT.ravel(), PP.ravel()
    spectra = np.stack([oracle(t, p) for t, p in zip(Tf, Pf)], axis=0)

    mean = spectra.mean(axis=0)
    centered = spectra - mean
    M_eff = int(min(M, n_samples, spectra.shape[1]))
    if M_eff > 0:
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        components = vt[:M_eff]
        weights = centered @ components.T            # [n_samples, M]
    else:
        components = np.zeros((0, spectra.shape[1]))
        weights = np.zeros((n_samples, 0))

    t_range = (float(T_grid.min()), float(T_grid.max()))
    p_range = (float(P_grid.min()), float(P_grid.max()))
    Tn, _ = _normalize(Tf, *t_range)
    Pn, _ = _normalize(Pf, *p_range)
    A = _design_matrix(Tn, Pn, powers)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e8:
        raise SurrogateTrainingError(
            f"polynomial design matrix ill-conditioned (cond={cond:.3e})")
    coeffs, *_ = np.linalg.lstsq(A, weights, rcond=None)

    model = SpectroModel(quantity=quantity, mean_spectrum=mean,
                         components=components, coeffs=coeffs.T,
                         powers=powers, t_range=t_range, p_range=p_range)

    # training telemetry: worst-case reconstruction and negativity clamps
    recon = evaluate(model, Tf, Pf)[0]
    ref = spectra
    if quantity == "rayleigh_brillouin":
        ref = ref / ref.sum(axis=-1, keepdims=True)
    scale = np.sqrt(np.mean(ref**2, axis=-1))
    scale = np.where(scale > 0, scale, 1.0)
    rel_rms = np.sqrt(np.mean((recon - ref) ** 2, axis=-1)) / scale
    raw = mean + weights @ components
    peak = np.abs(raw).max() if raw.size else 1.0
    n_clamped = int(np.sum(raw < -1e-9 * peak))
    clamp_frac = n_clamped / max(raw.size, 1)
    model.train_report = {
        "max_rel_rms": float(rel_rms.max()),
        "condition_number": float(cond),
        "clamp_fraction": float(clamp_frac),
        "n_samples": int(n_samples),
    }
    if clamp_frac >= 1e-3:
        raise SurrogateTrainingError(
            f"reconstruction dips negative on {clamp_frac:.2%} of samples")
    if model.train_report["max_rel_rms"] > rel_rms_tol:
        raise SurrogateTrainingError(
            "training-grid reconstruction error "
            f"{model.train_report['max_rel_rms']:.3e} exceeds {rel_rms_tol:g};"
            " raise M/d or loosen rel_rms_tol")
    return model


def evaluate(model: SpectroModel, T, P):
    """Evaluate a surrogate: (per-comb value, per-comb dValue/dT).

    T, P may be scalars or broadcastable arrays; outputs gain a trailing
    frequency axis. Values are clamped at 0 (with zero derivative where
    clamped); rayleigh_brillouin output is renormalized to unit sum with the
    derivative corrected by the quotient rule. Extrapolation outside the
    training domain is allowed (check in_domain for a warning mask).
    """
    val, dT, _ = evaluate_with_partials(model, T, P)
    return val, dT


def evaluate_with_partials(model: SpectroModel, T, P):
    """Like evaluate, but also returns dValue/dP (needed by the adjoint)."""
    T = np.asarray(T, dtype=float)
    P = np.asarray(P, dtype=float)
    T, P = np.broadcast_arrays(T, P)
    Tn, t_scale = _normalize(T, *model.t_range)
    Pn, p_scale = _normalize(P, *model.p_range)

    powers = model.powers
    A = _design_matrix(Tn, Pn, powers)                      # [..., n_terms]
    # d/dTn and d/dPn of each basis term
    i_pow = powers[:, 0]
    j_pow = powers[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        dA_dTn = np.where(i_pow > 0,
                          i_pow * np.stack([Tn ** max(i - 1, 0) * Pn ** j
                                            for i, j in powers], axis=-1), 0.0)
        dA_dPn = np.where(j_pow > 0,
                          j_pow * np.stack([Tn ** i * Pn ** max(j - 1, 0)
                                            for i, j in powers], axis=-1), 0.0)

    if model.n_components:
        w = A @ model.coeffs.T                              # [..., M]
        dw_dT = (dA_dTn @ model.coeffs.T) * t_scale
        dw_dP = (dA_dPn @ model.coeffs.T) * p_scale
        val = model.mean_spectrum + w @ model.components
        dT_val = dw_dT @ model.components
        dP_val = dw_dP @ model.components
    else:
        shape = T.shape + (model.mean_spectrum.size,)
        val = np.broadcast_to(model.mean_spectrum, shape).copy()
        dT_val = np.zeros(shape)
        dP_val = np.zeros(shape)

    neg = val < 0.0
    if np.any(neg):
        val = np.where(neg, 0.0, val)
        dT_val = np.where(neg, 0.0, dT_val)
        dP_val = np.where(neg, 0.0, dP_val)

    if model.quantity == "rayleigh_brillouin":
        s = val.sum(axis=-1, keepdims=True)
        if np.any(s <= 0):
            raise ValueError("rayleigh_brillouin reconstruction sums to <= 0")
        ds_dT = dT_val.sum(axis=-1, keepdims=True)
        ds_dP = dP_val.sum(axis=-1, keepdims=True)
        dT_val = dT_val / s - val * ds_dT / s**2
        dP_val = dP_val / s - val * ds_dP / s**2
        val = val / s

    return val, dT_val, dP_val
