"""Channel calibrations and instrument constants.

An instrument is exactly six channels: two DIAL wavelength pairs (wv, o2)
times the detector wiring, with per-channel receiver spectra, gains, shot
counts, backgrounds, and afterpulse curves, plus one pulse kernel per
wavelength tag. Everything here is immutable during a retrieval.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import xlogy

from .grids import Grid

CHANNEL_IDS = ("wv_on", "wv_off", "o2on_comb", "o2on_mol",
               "o2off_comb", "o2off_mol")
WAVELENGTH_TAGS = ("wv", "o2on", "o2off")
DETECTOR_TAGS = ("wv", "comb", "mol")

# channel id -> (wavelength_tag, detector_tag)
CHANNEL_WIRING = {
    "wv_on": ("wv", "wv"),
    "wv_off": ("wv", "wv"),
    "o2on_comb": ("o2on", "comb"),
    "o2on_mol": ("o2on", "mol"),
    "o2off_comb": ("o2off", "comb"),
    "o2off_mol": ("o2off", "mol"),
}

# channel id -> laser line used for absorption spectroscopy
LASER_LINES = {
    "wv_on": "wv_on",
    "wv_off": "wv_off",
    "o2on_comb": "o2on",
    "o2on_mol": "o2on",
    "o2off_comb": "o2off",
    "o2off_mol": "o2off",
}


@dataclass(frozen=True)
class ChannelSpec:
    """Calibration block for one channel.

    eta : per-comb receiver transmission in [0, 1]
    gain : G, scalar power/absorption-below-first-gate factor per wavelength
    gamma : wavelength scaling multiplying (B - 1); 1.0 at the HSRL wavelength
    shots_per_bin : laser shots m accumulated into one analysis cell
    background : expected background counts b per cell
    afterpulse : per-range afterpulse counts/shot
    """

    id: str
    wavelength_tag: str
    detector_tag: str
    eta: np.ndarray
    gain: float
    gamma: float
    shots_per_bin: float
    background: float
    afterpulse: np.ndarray

    def __post_init__(self):
        if self.id not in CHANNEL_IDS:
            raise ValueError(f"unknown channel id {self.id!r}")
        if CHANNEL_WIRING[self.id] != (self.wavelength_tag, self.detector_tag):
            raise ValueError(f"channel {self.id}: tags "
                             f"({self.wavelength_tag}, {self.detector_tag}) "
                             f"do not match the six-channel wiring")
        eta = np.asarray(self.eta, dtype=float)
        if np.any(eta < 0) or np.any(eta > 1):
            raise ValueError("eta must lie in [0, 1]")
        if self.shots_per_bin <= 0:
            raise ValueError("shots_per_bin must be > 0")
        if self.background < 0:
            raise ValueError("background must be >= 0")
        if np.any(np.asarray(self.afterpulse) < 0):
            raise ValueError("afterpulse must be >= 0")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "afterpulse",
                           np.asarray(self.afterpulse, dtype=float))

    @property
    def laser_line(self) -> str:
        """Laser line tag keying absorption spectroscopy (wv on/off, o2 on/off)."""
        return LASER_LINES[self.id]


@dataclass(frozen=True)
class PulseShape:
    """Causal range kernel l for one wavelength tag. No implicit normalization."""

    kernel: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=float)
        if k.ndim != 1 or k.size < 1:
            raise ValueError("pulse kernel must be a nonempty 1-D array")
        if np.any(k < 0):
            raise ValueError("pulse kernel must be nonnegative")
        object.__setattr__(self, "kernel", k)

    @property
    def total(self) -> float:
        return float(self.kernel.sum())


@dataclass(frozen=True)
class InstrumentModel:
    """Six ChannelSpecs plus one PulseShape per wavelength tag."""

    channels: dict[str, ChannelSpec]
    pulses: dict[str, PulseShape]

    def __post_init__(self):
        if set(self.channels) != set(CHANNEL_IDS):
            raise ValueError("instrument must define exactly the six channels "
                             f"{CHANNEL_IDS}")
        for cid, ch in self.channels.items():
            if ch.id != cid:
                raise ValueError(f"channel key {cid!r} holds spec {ch.id!r}")
        missing = {ch.wavelength_tag for ch in self.channels.values()} \
            - set(self.pulses)
        if missing:
            raise ValueError(f"missing pulse shapes for {sorted(missing)}")

    def pulse_for(self, channel_id: str) -> PulseShape:
        return self.pulses[self.channels[channel_id].wavelength_tag]

    def with_channel(self, ch: ChannelSpec) -> "InstrumentModel":
        channels = dict(self.channels)
        channels[ch.id] = ch
        return InstrumentModel(channels=channels, pulses=self.pulses)


@dataclass(frozen=True)
class AfterpulseFit:
    """Afterpulse curve: constant floor plus decaying exponential modes.

    b : constant counts/shot; modes : list of (amplitude counts/shot,
    decay length m). Monotone nonincreasing in range for nonnegative modes.
    """

    b: float
    modes: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.b < 0:
            raise ValueError("b must be >= 0")
        for c, p in self.modes:
            if c < 0 or p <= 0:
                raise ValueError("modes need amplitude >= 0 and length > 0")


def afterpulse_model(fit: AfterpulseFit, grid: Grid) -> np.ndarray:
    """Per-range afterpulse expectation rho_k = b + sum_i c_i exp(-r_k/p_i)."""
    r = grid.range_centers
    rho = np.full(r.shape, fit.b)
    for c, p in fit.modes:
        rho = rho + c * np.exp(-r / p)
    return rho


class AfterpulseFitError(RuntimeError):
    pass


def _afterpulse_nll_grad(theta: np.ndarray, counts: np.ndarray,
                         shots: float, r: np.ndarray, n_modes: int):
    """Poisson NLL of shots*rho(theta) and its gradient.

    theta = [b, c_1..c_n, log(p_1)..log(p_n)] with b, c bounded >= 0 by the
    optimizer and decay lengths positive via the log parameterization.
    """
    b = theta[0]
    c = theta[1:1 + n_modes]
    p = np.exp(theta[1 + n_modes:])
    decay = np.exp(-r[:, None] / p[None, :])          # [range, mode]
    rho = b + decay @ c
    lam = shots * rho
    nll = float(np.sum(lam - xlogy(counts, np.maximum(lam, 1e-300))))
    # dNLL/dlam, guarded for lam == 0 cells (only possible with counts == 0)
    dlam = 1.0 - np.divide(counts, lam, out=np.zeros_like(counts), where=lam > 0)
    g = np.empty_like(theta)
    g[0] = shots * dlam.sum()
    g[1:1 + n_modes] = shots * (dlam @ decay)
    # d rho_k/d log p_i = c_i * decay_ki * r_k/p_i
    g[1 + n_modes:] = shots * ((dlam * r) @ (decay * (c / p)[None, :]))
    return nll, g


def fit_afterpulse(counts: np.ndarray, shots: float, grid: Grid,
                   n_modes: int = 2) -> tuple[AfterpulseFit, float]:
    """Maximum-likelihood afterpulse fit to covered-port Poisson counts.

    counts are per-range totals over `shots` laser shots. Returns the fit and
    the Poisson NLL achieved. Decay lengths are optimized in log space; a
    small multistart over initial decay lengths guards against local minima.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 1 or counts.size != grid.n_range:
        raise ValueError("counts must be per-range over the grid")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    if shots <= 0 or n_modes < 1:
        raise ValueError("need shots > 0 and n_modes >= 1")
    r = grid.range_centers
    span = max(r[-1] - r[0], grid.dr)

    mean_rate = counts.sum() / shots / counts.size
    amp0 = max((counts[0] / shots - mean_rate), mean_rate, 1e-12)
    starts = []
    base_lengths = np.geomspace(span / 30.0, span, 4)
    for start_scale in base_lengths:
        p0 = start_scale * np.geomspace(1.0, 3.0, n_modes)
        theta0 = np.concatenate([[max(mean_rate, 1e-12)],
                                 np.full(n_modes, amp0 / n_modes),
                                 np.log(p0)])
        starts.append(theta0)

    bounds = ([(0.0, None)] + [(0.0, None)] * n_modes
              + [(np.log(grid.dr * 1e-2), np.log(span * 1e3))] * n_modes)
    best = None
    for theta0 in starts:
        res = minimize(_afterpulse_nll_grad, theta0,
                       args=(counts, float(shots), r, n_modes),
                       jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 500, "ftol": 1e-14, "gtol": 1e-10})
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.isfinite(best.fun):
        raise AfterpulseFitError("afterpulse fit did not produce a finite NLL")

    theta = best.x
    fit = AfterpulseFit(b=float(theta[0]),
                        modes=tuple((float(c), float(p)) for c, p in
                                    zip(theta[1:1 + n_modes],
                                        np.exp(theta[1 + n_modes:]))))
    return fit, float(best.fun)


def load_receiver_scan(instrument: InstrumentModel, scan_freqs: np.ndarray,
                       scan_values: dict[str, np.ndarray],
                       grid: Grid) -> InstrumentModel:
    """Populate channel eta curves from a seed-laser transmission scan.

    scan_freqs are offsets [Hz] covering at least the grid's comb span;
    scan_values maps channel id -> measured transmission at scan_freqs.
    Values are linearly interpolated onto the comb and clamped to [0, 1].
    Returns a new InstrumentModel.
    """
    scan_freqs = np.asarray(scan_freqs, dtype=float)
    lo, hi = grid.freq_offsets.min(), grid.freq_offsets.max()
    if scan_freqs.min() > lo or scan_freqs.max() < hi:
        raise ValueError("receiver scan span does not cover the comb")
    order = np.argsort(scan_freqs)
    out = instrument
    for cid, vals in scan_values.items():
        vals = np.asarray(vals, dtype=float)
        eta = np.interp(grid.freq_offsets, scan_freqs[order], vals[order])
        eta = np.clip(eta, 0.0, 1.0)
        out = out.with_channel(replace(out.channels[cid], eta=eta))
    return out
