"""Synthetic truth scenes and Poisson-sampled six-channel observations.

Everything downstream validates against these scenes: truth fields pass
through the same forward model used by the solver, counts are drawn Poisson
per capture-resolution sub-bin (negative binomial inside cloud blobs to
break the Poisson assumption on purpose), and the standard instrument and
spectroscopy fixtures live here so a retrieval can be exercised end to end
with no external data.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .constants import KB
from .forward import LaserSpectro, full_forward
from .grids import Grid, coarse_shape, make_grid, resample_up
from .instrument import (CHANNEL_IDS, CHANNEL_WIRING, WAVELENGTH_TAGS,
                         ChannelSpec, InstrumentModel, PulseShape)
from . import spectroscopy as spectro_mod
from .solver import ObservationSet, observation_from_subbins
from .state import (StateVector, integrate_lapse, inverse_B, inverse_Cmol,
                    inverse_Cwv, inverse_Gon, inverse_phi,
                    lapse_from_temperature)

PRESETS = ("linear_lapse", "inversion", "cloudy", "isothermal")

# Fixture line sets. Doppler-dominated Voigt lines (narrow Lorentz widths)
# keep the spectral family compressible; strengths are tuned so the online
# optical depths reach ~0.7 (o2, 3 km) and ~0.5 (wv at 8 g/m3, 2 km), the
# regime where DIAL sensitivity peaks. The online oxygen line sits on a hot
# band (lower-state energy ~1500 K): its strength then swings strongly with
# temperature, which is what makes the absorption thermometric in the first
# place. Without that, a bulk temperature shift is nearly unobservable: the
# hydrostatically closed density change cancels the cross-section change.
O2_MASS = 5.3136e-26       # kg
H2O_MASS = 2.9915e-26      # kg

O2ON_LINES = (spectro_mod.LineRecord(0.0, 1.0e-19, 0.30e9, 0.70,
                                     1500.0 * KB, O2_MASS),)
O2OFF_LINES = (spectro_mod.LineRecord(4.2e9, 2.0e-21, 0.30e9, 0.70,
                                      200.0 * KB, O2_MASS),)
WVON_LINES = (spectro_mod.LineRecord(0.0, 3.2e-18, 0.35e9, 0.65,
                                     300.0 * KB, H2O_MASS),)
WVOFF_LINES = (spectro_mod.LineRecord(4.0e9, 4.0e-20, 0.35e9, 0.65,
                                      300.0 * KB, H2O_MASS),)
# weak water absorption on the oxygen wavelengths
WV_AT_O2_LINES = (spectro_mod.LineRecord(2.8e9, 2.0e-20, 0.35e9, 0.65,
                                         300.0 * KB, H2O_MASS),)

TRAIN_T_GRID = np.arange(200.0, 321.0, 10.0)
TRAIN_P_GRID = np.arange(10000.0, 100001.0, 10000.0)


def default_grid(n_time: int = 24, n_range: int = 80, dr_m: float = 37.5,
                 n_freq: int = 21, freq_span_hz: float = 8e9) -> Grid:
    """Desk-scale analysis grid: 2 h x 3 km, 300 s x 37.5 m cells."""
    return make_grid(n_time, n_range, dr_m, n_freq, freq_span_hz)


def build_default_suite(grid: Grid) -> dict:
    """Train the standard surrogate set for all four laser lines.

    o2 lasers carry oxygen plus (weak) water-vapor absorption; wv lasers
    water only. One Rayleigh-Brillouin model per band.
    """
    def absorb(lines, nu0, quantity):
        # M=8/d=6: the hot-band strength scaling needs the extra polynomial
        # headroom to stay within the reconstruction contract
        return spectro_mod.train_surrogate(
            lambda T, P: spectro_mod.oracle_absorption(list(lines), T, P,
                                                       grid, nu0),
            TRAIN_T_GRID, TRAIN_P_GRID, M=8, d=6, quantity=quantity)

    def rb(nu0):
        return spectro_mod.train_surrogate(
            lambda T, P: spectro_mod.oracle_rayleigh_brillouin(T, P, grid,
                                                               nu0),
            TRAIN_T_GRID, TRAIN_P_GRID, quantity="rayleigh_brillouin")

    nu_o2 = spectro_mod.NU0_O2_BAND
    nu_wv = spectro_mod.NU0_WV_BAND
    rb_o2 = rb(nu_o2)
    rb_wv = rb(nu_wv)
    wv_at_o2 = absorb(WV_AT_O2_LINES, nu_o2, "wv_xsec")
    return {
        "o2on": LaserSpectro(absorb(O2ON_LINES, nu_o2, "oxygen_xsec"),
                             wv_at_o2, rb_o2),
        "o2off": LaserSpectro(absorb(O2OFF_LINES, nu_o2, "oxygen_xsec"),
                              wv_at_o2, rb_o2),
        "wv_on": LaserSpectro(None, absorb(WVON_LINES, nu_wv, "wv_xsec"),
                              rb_wv),
        "wv_off": LaserSpectro(None, absorb(WVOFF_LINES, nu_wv, "wv_xsec"),
                               rb_wv),
    }


def build_default_instrument(grid: Grid, shots_per_bin: float = 2.7e6,
                             background: float = 50.0) -> InstrumentModel:
    """Standard six-channel instrument.

    Combined detectors see a wide etalon passband; molecular detectors add a
    narrow notch at the laser line (leak 0.005) to reject aerosol; wv
    detectors are broadband. Small afterpulse tail on every channel.
    """
    nu = grid.freq_offsets
    etalon = 0.8 * np.exp(-0.5 * (nu / 2.5e9) ** 2)
    notch = 1.0 - 0.995 * np.exp(-0.5 * (nu / 0.45e9) ** 2)
    eta_by_det = {
        "wv": 0.7 * np.exp(-0.5 * (nu / 3.0e9) ** 2),
        "comb": etalon,
        "mol": etalon * notch,
    }
    gains = {"wv": 1.0, "o2on": 0.9, "o2off": 1.1}
    gammas = {"wv": 0.85, "o2on": 1.0, "o2off": 1.0}
    after = 2e-6 * np.exp(-grid.range_centers / 600.0)
    channels = {}
    for cid in CHANNEL_IDS:
        tag, det = CHANNEL_WIRING[cid]
        channels[cid] = ChannelSpec(
            id=cid, wavelength_tag=tag, detector_tag=det,
            eta=eta_by_det[det].copy(), gain=gains[tag], gamma=gammas[tag],
            shots_per_bin=shots_per_bin, background=background,
            afterpulse=after.copy())
    pulses = {tag: PulseShape(np.array([0.55, 0.30, 0.15]))
              for tag in WAVELENGTH_TAGS}
    return InstrumentModel(channels=channels, pulses=pulses)


@dataclass
class TruthScene:
    """Known atmospheric truth on the analysis grid.

    humidity is absolute humidity in g/m3 (the retrieval's native humidity
    unit); dispersion is the per-cell variance inflation used by observe
    (1 = Poisson). coarse_factors is the lapse-rate block size the
    temperature field is built on, so truth is exactly representable.
    """

    preset: str
    T: np.ndarray
    humidity: np.ndarray
    B: np.ndarray
    phi: np.ndarray
    C_wv: np.ndarray
    C_mol: np.ndarray
    G_on: np.ndarray
    T_surface: np.ndarray
    P_surface: np.ndarray
    dispersion: np.ndarray
    coarse_factors: tuple = (8, 4)

    def blob_mask(self) -> np.ndarray:
        return self.dispersion > 1.0


def _representable_T(T_target: np.ndarray, grid: Grid, factors: tuple,
                     T_surface: np.ndarray) -> np.ndarray:
    """Project a temperature field onto the coarse-lapse basis."""
    coarse = lapse_from_temperature(T_target, grid.dr, factors)
    return integrate_lapse(resample_up(coarse, grid), T_surface, grid.dr)


def make_scene(preset: str, grid: Grid, seed=0,
               coarse_factors: tuple = (8, 4)) -> TruthScene:
    """Construct a named truth scene.

    linear_lapse: T = 288.15 - 6.5 K/km * r. inversion: adds a +5 K bump
    centered at 2.5 km (one local temperature maximum in 2-3 km).
    cloudy: linear_lapse plus high-backscatter blobs (B up to ~100) whose
    cells inflate sub-bin variance x10. isothermal: constant T.
    Temperature is projected onto the coarse lapse basis so the scene is
    exactly representable by the state parameterization.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    rng = np.random.default_rng(seed)
    nt, nr = grid.shape()
    r = grid.range_centers[None, :]
    t_idx = np.arange(nt)[None].T

    T_surface = np.full(nt, 288.15)
    P_surface = np.full(nt, 101325.0)

    if preset == "isothermal":
        T_target = np.full((nt, nr), 288.15)
    else:
        T_target = 288.15 - 6.5e-3 * r + np.zeros((nt, 1))
        if preset == "inversion":
            T_target = T_target + 5.0 * np.exp(-0.5 * ((r - 2500.0)
                                                       / 300.0) ** 2)
    T = _representable_T(T_target, grid, coarse_factors, T_surface)

    overlap = 1.0 - np.exp(-(np.maximum(r, 1.0) / 450.0) ** 2)
    geom = 1.0 / (1.0 + r / 500.0) ** 2
    tmod = 1.0 + 0.05 * np.sin(2.0 * np.pi * t_idx / max(nt, 1))
    phi = overlap * geom * np.exp(-r / 9000.0) * tmod

    B = 1.0 + 2.5 * np.exp(-r / 800.0) \
        + 0.8 * np.exp(-0.5 * ((r - 1800.0) / 250.0) ** 2) + 0.0 * t_idx
    humidity = (8.0 * np.exp(-r / 1500.0)
                * (1.0 + 0.1 * np.sin(2.0 * np.pi * t_idx / max(nt, 1))))
    C_wv = 1.3 * (1.0 - 0.45 * np.exp(-(r / 500.0) ** 2)) + 0.0 * t_idx
    C_mol = 1.0 + 0.35 * (1.0 - np.exp(-grid.range_centers / 500.0))
    G_on = np.full(nt, 1.1)
    dispersion = np.ones((nt, nr))

    if preset == "cloudy":
        span_r = grid.range_centers[-1] - grid.range_centers[0]
        for _ in range(2):
            ct = rng.uniform(0.2, 0.8) * nt
            cr = grid.range_centers[0] + rng.uniform(0.35, 0.75) * span_r
            at, ar = max(2.0, 0.09 * nt), 0.08 * span_r
            ell = (((np.arange(nt)[:, None] - ct) / at) ** 2
                   + ((r - cr) / ar) ** 2)
            blob = ell <= 1.0
            B = B + np.where(blob, 95.0 * (1.0 - ell) ** 2, 0.0)
            dispersion = np.where(blob, 10.0, dispersion)

    return TruthScene(preset=preset, T=T, humidity=humidity, B=B, phi=phi,
                      C_wv=C_wv, C_mol=C_mol, G_on=G_on,
                      T_surface=T_surface, P_surface=P_surface,
                      dispersion=dispersion, coarse_factors=coarse_factors)


def state_from_truth(scene: TruthScene, grid: Grid) -> StateVector:
    """Exact StateVector whose realize() reproduces the scene fields."""
    from .grids import Field2D
    tf, rf = scene.coarse_factors
    x_T = lapse_from_temperature(scene.T, grid.dr, scene.coarse_factors)
    return StateVector(
        x_phi=Field2D(inverse_phi(scene.phi), (1, 1)),
        x_B=Field2D(inverse_B(scene.B), (1, 1)),
        x_Cwv=Field2D(inverse_Cwv(scene.C_wv), (1, 1)),
        x_n=Field2D(scene.humidity.copy(), (1, 1)),
        x_Cmol=inverse_Cmol(scene.C_mol),
        x_T=x_T,
        x_Gon=inverse_Gon(scene.G_on),
        T_surface=scene.T_surface.copy(),
        P_surface=scene.P_surface.copy(),
    )


def calibrate_flux(scene: TruthScene, instrument: InstrumentModel,
                   spectro: dict, grid: Grid,
                   target_hz: float = 1e6) -> InstrumentModel:
    """Scale the instrument gains so the brightest sub-bin rate is target_hz.

    The count scale lives in the per-wavelength gain G (the truth flux
    profile stays order one, matching the retrieval's flux-equals-one
    initialization). The expected rate is affine in a common gain factor
    (signal linear, background and afterpulse constant), so the factor
    solving max-rate = target is the cellwise minimum of
    (target - constant)/signal.
    """
    state = state_from_truth(scene, grid)
    res = full_forward(state, instrument, spectro, grid)
    denom = grid.n_subbins * grid.raw_bin_duration
    best = np.inf
    for cid in CHANNEL_IDS:
        ch = instrument.channels[cid]
        const = ch.shots_per_bin * ch.afterpulse[None, :] + ch.background
        signal = res.expected[cid] - const
        with np.errstate(divide="ignore"):
            a = (target_hz * denom - const) / np.maximum(signal, 1e-300)
        best = min(best, float(a[signal > 0].min()))
    if not np.isfinite(best) or best <= 0:
        raise ValueError("cannot reach target rate: no positive signal")
    channels = {cid: dc_replace(ch, gain=ch.gain * best)
                for cid, ch in instrument.channels.items()}
    return InstrumentModel(channels=channels, pulses=instrument.pulses)


def observe(scene: TruthScene, instrument: InstrumentModel, spectro: dict,
            grid: Grid, seed=0,
            rho_max: float = 2e6) -> ObservationSet:
    """Draw one seeded six-channel observation of the scene.

    Per-cell expectations come from full_forward on the exact truth state;
    each of the grid's sub-bins draws Poisson(yhat/n_sub). Cells with
    dispersion D > 1 draw negative binomial with variance D * mean instead,
    violating the Poisson assumption the way optically thick cloud returns
    do. Weights are computed from the drawn sub-bin statistics.
    """
    rng = np.random.default_rng(seed)
    state = state_from_truth(scene, grid)
    res = full_forward(state, instrument, spectro, grid)
    nsub = grid.n_subbins
    channels = {}
    over = scene.dispersion > 1.0
    for cid in CHANNEL_IDS:
        lam = res.expected[cid] / nsub
        draws = rng.poisson(lam[:, :, None], size=lam.shape + (nsub,))
        if np.any(over):
            d = scene.dispersion[over][:, None]
            mu = np.broadcast_to(lam[over][:, None],
                                 (int(over.sum()), nsub))
            k = mu / (d - 1.0)              # var = mu (1 + mu/k) = d mu
            nb = rng.negative_binomial(k, k / (k + mu))
            draws[over] = nb
        channels[cid] = observation_from_subbins(
            draws.astype(float), rho_max=rho_max,
            dt=grid.raw_bin_duration)
    return ObservationSet(channels=channels, shot_fraction=1.0)
