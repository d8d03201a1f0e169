"""Weighted Poisson maximum likelihood with total-variation regularization.

The objective is O(X) = sum_c w_c * w'_cell * (yhat - y ln yhat)
+ sum_i alpha_i TV(x_i), minimized by proximal-gradient outer iterations
(gradients from the forward-model adjoints, backtracking on the smooth-part
majorizer) with a FISTA gradient-projection TV prox on each field. Also
houses the logistic weighting scheme, Poisson thinning for fit/validation
splits, and the validation loss.

Solve runs are independent; identical seeds give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .forward import full_forward
from .grids import Grid
from .instrument import InstrumentModel
from .state import StateVector

DEFAULT_RHO_MAX = 2e6   # Hz, weight rolloff scale for the max observed rate


class SolverError(RuntimeError):
    """Raised when optimization cannot proceed; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class ChannelObservation:
    """Counts and weights for one channel.

    counts: per-cell totals [time, range]; max/mean/std are raw sub-bin
    statistics per cell at capture resolution; wprime in [0, 1]; wc scalar.
    """

    counts: np.ndarray
    max_sub: np.ndarray
    mean_sub: np.ndarray
    std_sub: np.ndarray
    wprime: np.ndarray
    wc: float

    def copy(self) -> "ChannelObservation":
        return ChannelObservation(self.counts.copy(), self.max_sub,
                                  self.mean_sub, self.std_sub,
                                  self.wprime.copy(), self.wc)


@dataclass
class ObservationSet:
    """Per-channel observations plus the shot fraction of the full scene.

    shot_fraction tracks Poisson thinning: a p-thinned set has expectation
    p * yhat_full, and since yhat is jointly linear in (shots, background)
    one scalar multiplies the full-shot forward expectation.
    """

    channels: dict
    shot_fraction: float = 1.0

    def channel_ids(self) -> tuple:
        return tuple(sorted(self.channels))


def compute_weights(raw: np.ndarray, rho_max: float = DEFAULT_RHO_MAX,
                    dt: float = 2.0):
    """Logistic cell weights and the scalar channel weight from raw sub-bins.

    raw: [time, range, n_sub] counts at capture resolution dt. The logistic
    argument z = (max/dt/rho_max) * (std/sqrt(mean+1)) suppresses cells whose
    sub-bin scatter exceeds Poisson at high flux. Cells with no counts at all
    carry no information and get w' = 0.
    """
    raw = np.asarray(raw)
    if raw.ndim != 3:
        raise ValueError("raw sub-bins must be [time, range, n_sub]")
    if rho_max <= 0 or dt <= 0:
        raise ValueError("rho_max and dt must be positive")
    mx = raw.max(axis=-1)
    mu = raw.mean(axis=-1)
    sd = raw.std(axis=-1, ddof=1) if raw.shape[-1] > 1 else np.zeros_like(mu)
    z = (mx / dt / rho_max) * (sd / np.sqrt(mu + 1.0))
    wprime = 1.0 / (1.0 + np.exp(z))
    wprime = np.where(mx > 0, wprime, 0.0)
    y = raw.sum(axis=-1)
    return wprime, channel_weight(wprime, y)


def channel_weight(wprime: np.ndarray, y: np.ndarray) -> float:
    """Scalar channel weight 1/sqrt(sum((w'y)^2)); 0 for an empty channel."""
    s = float(np.sum((np.asarray(wprime) * np.asarray(y)) ** 2))
    return 1.0 / np.sqrt(s) if s > 0 else 0.0


def observation_from_subbins(raw: np.ndarray, rho_max: float = DEFAULT_RHO_MAX,
                             dt: float = 2.0) -> ChannelObservation:
    """Build a ChannelObservation from raw sub-binned counts."""
    raw = np.asarray(raw)
    wprime, wc = compute_weights(raw, rho_max, dt)
    sd = raw.std(axis=-1, ddof=1) if raw.shape[-1] > 1 else \
        np.zeros(raw.shape[:-1])
    return ChannelObservation(
        counts=raw.sum(axis=-1).astype(float), max_sub=raw.max(axis=-1),
        mean_sub=raw.mean(axis=-1), std_sub=sd, wprime=wprime, wc=wc)


def poisson_nll(y_hat: dict, obs: ObservationSet, scale: float = 1.0,
                extra_weights: dict | None = None) -> float:
    """Weighted Poisson NLL sum_c w_c sum_cells w' (yhat - y ln yhat).

    y_hat maps channel id -> full-shot expectation; scale multiplies it
    (thinned splits pass their shot fraction). Only channels present in both
    y_hat and obs contribute. Raises if any used expectation is nonpositive.
    """
    total = 0.0
    for cid, co in obs.channels.items():
        if cid not in y_hat:
            continue
        lam = scale * np.asarray(y_hat[cid], dtype=float)
        w = co.wc * co.wprime
        if extra_weights and cid in extra_weights:
            w = w * extra_weights[cid]
        used = w != 0.0
        if np.any(lam[used] <= 0.0):
            raise ValueError(f"nonpositive expectation on channel {cid}")
        total += float(np.sum(w * (lam - xlogy(co.counts,
                                               np.where(used, lam, 1.0)))))
    return total


def tv_seminorm(x: np.ndarray) -> float:
    """Anisotropic total variation: sum of absolute neighbor differences."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return float(np.abs(np.diff(x)).sum())
    if x.ndim == 2:
        return float(np.abs(np.diff(x, axis=0)).sum()
                     + np.abs(np.diff(x, axis=1)).sum())
    raise ValueError("tv_seminorm expects a 1-D or 2-D array")


def tv_prox(v: np.ndarray, lam: float, iters: int = 50,
            gap_tol: float = 1e-12) -> np.ndarray:
    """argmin_u 0.5||u - v||^2 + lam*TV(u), anisotropic.

    Gradient projection on the dual with FISTA momentum; dual variables are
    clipped componentwise to [-1, 1] (anisotropic TV). Stops at `iters`
    iterations or when the duality gap falls below gap_tol*max(1, objective).
    """
    v = np.asarray(v, dtype=float)
    if lam < 0:
        raise ValueError("lam must be >= 0")
    orig_shape = v.shape
    if v.ndim == 1:
        v = v[None, :]
    elif v.ndim != 2:
        raise ValueError("tv_prox expects a 1-D or 2-D array")
    if lam == 0.0 or v.size <= 1:
        return v.reshape(orig_shape).copy()

    m, n = v.shape
    active = int(m > 1) + int(n > 1)
    if active == 0:
        return v.reshape(orig_shape).copy()
    L = 4.0 * active

    p = np.zeros((max(m - 1, 0), n))      # dual for time-axis differences
    q = np.zeros((m, max(n - 1, 0)))      # dual for range-axis differences
    p_prev, q_prev = p, q
    t = 1.0

    def adjoint(pp, qq):
        # (D^T [pp, qq])[i,j]; D is forward differencing along each axis
        out = np.zeros((m, n))
        if m > 1:
            out[1:, :] += pp
            out[:-1, :] -= pp
        if n > 1:
            out[:, 1:] += qq
            out[:, :-1] -= qq
        return out

    u = v
    for _ in range(max(iters, 1)):
        u = v - lam * adjoint(p, q)
        gp = u[1:, :] - u[:-1, :] if m > 1 else np.zeros((0, n))
        gq = u[:, 1:] - u[:, :-1] if n > 1 else np.zeros((m, 0))
        p_new = np.clip(p + gp / (L * lam) * 1.0, -1.0, 1.0) if m > 1 else p
        q_new = np.clip(q + gq / (L * lam) * 1.0, -1.0, 1.0) if n > 1 else q

        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_new
        p, p_prev = p_new + mom * (p_new - p_prev), p_new
        q, q_prev = q_new + mom * (q_new - q_prev), q_new
        t = t_new

        # duality gap at the feasible point (p_prev, q_prev)
        u = v - lam * adjoint(p_prev, q_prev)
        gp = u[1:, :] - u[:-1, :] if m > 1 else np.zeros((0, n))
        gq = u[:, 1:] - u[:, :-1] if n > 1 else np.zeros((m, 0))
        tv_u = np.abs(gp).sum() + np.abs(gq).sum()
        gap = lam * (tv_u - (p_prev * gp).sum() - (q_prev * gq).sum())
        obj = 0.5 * np.sum((u - v) ** 2) + lam * tv_u
        if gap <= gap_tol * max(1.0, obj):
            break

    return (v - lam * adjoint(p_prev, q_prev)).reshape(orig_shape)


@dataclass
class SolveConfig:
    """Knobs for one PTV solve.

    free_fields: estimated variable names; alphas: per-field TV scalars
    (missing entries mean 0). channels restricts the fitted channels;
    extra_cell_weights multiplies fit weights per channel (never the
    validation loss). field_scales overrides the probed per-field step
    scaling. Defaults follow the standard configuration: relative objective
    tolerance 1e-6, outer cap 2000, 50 inner TV iterations.
    """

    free_fields: tuple
    alphas: dict = field(default_factory=dict)
    max_outer: int = 2000
    tol: float = 1e-6
    tv_iters: int = 50
    step_init: float = 1.0
    max_backtracks: int = 60
    min_outer: int = 10
    calm_needed: int = 3
    channels: tuple | None = None
    extra_cell_weights: dict | None = None
    field_scales: dict | None = None


@dataclass
class ObjectiveTrace:
    """Per-iteration record of one solve; nonincreasing objective."""

    objective: list = field(default_factory=list)
    nll: list = field(default_factory=list)
    tv: list = field(default_factory=list)
    step: list = field(default_factory=list)
    backtracks: list = field(default_factory=list)
    termination: str = ""

    def append(self, objective, nll, tv, step, backtracks):
        self.objective.append(float(objective))
        self.nll.append(float(nll))
        self.tv.append(float(tv))
        self.step.append(float(step))
        self.backtracks.append(int(backtracks))

    def to_text(self) -> str:
        lines = ["# iter objective nll tv step backtracks"]
        for i in range(len(self.objective)):
            lines.append(f"{i} {self.objective[i]:.12e} {self.nll[i]:.12e} "
                         f"{self.tv[i]:.12e} {self.step[i]:.6e} "
                         f"{self.backtracks[i]}")
        lines.append(f"# termination: {self.termination}")
        return "\n".join(lines) + "\n"


def _nll_and_grads(state: StateVector, cfg: SolveConfig, obs: ObservationSet,
                   instrument: InstrumentModel, spectro, grid: Grid,
                   channels: tuple, want_grads: bool = True):
    fwd = full_forward(state, instrument, spectro, grid, channels=channels)
    s = obs.shot_fraction
    nll = 0.0
    seeds = {}
    for cid in channels:
        co = obs.channels[cid]
        w = co.wc * co.wprime
        if cfg.extra_cell_weights and cid in cfg.extra_cell_weights:
            w = w * cfg.extra_cell_weights[cid]
        yhat_full = fwd.expected[cid]
        used = w != 0.0
        if np.any(yhat_full[used] <= 0.0):
            raise SolverError(f"forward expectation nonpositive on {cid}",
                              fwd.diagnostics)
        lam = np.where(used, s * yhat_full, 1.0)
        nll += float(np.sum(w * (s * yhat_full - xlogy(co.counts, lam))))
        if want_grads:
            # d/d yhat_full of w*(s*yhat - y ln(s*yhat)) = w*(s - y/yhat)
            seeds[cid] = np.where(
                used, w * (s - co.counts / np.maximum(yhat_full, 1e-300)), 0.0)
    if not want_grads:
        return nll, None
    grads = fwd.vjp(seeds)
    if "x_Cmol" in grads:
        grads["x_Cmol"][0] = 0.0   # pinned coordinate
    return nll, grads


def _tv_total(state: StateVector, cfg: SolveConfig) -> float:
    return sum(cfg.alphas.get(name, 0.0) * tv_seminorm(state.get(name))
               for name in cfg.free_fields)


def _probe_scales(state, cfg, obs, instrument, spectro, grid, channels,
                  grads0) -> dict:
    """One-time curvature probe: per-field step scale 1/L_i.

    The fields differ by orders of magnitude in curvature (shared exponential
    parameterizations vs lapse rate in K/m), so a single global step cannot
    move them all; each free field gets scale 1/||d grad_i|| along its own
    gradient direction.
    """
    scales = {}
    for name in cfg.free_fields:
        g0 = grads0[name]
        rms = float(np.sqrt(np.mean(g0**2)))
        x0 = state.get(name).copy()
        direction = g0 / rms if rms > 0 else np.ones_like(g0) / np.sqrt(g0.size)
        eps = 1e-3 * (1.0 + float(np.sqrt(np.mean(x0**2))))
        probe = state.copy()
        probe.set(name, x0 + eps * direction)
        try:
            _, g1 = _nll_and_grads(probe, cfg, obs, instrument, spectro, grid,
                                   channels)
            curv = float(np.sqrt(np.mean((g1[name] - g0) ** 2))) / eps
        except (SolverError, ValueError):
            curv = 0.0
        scales[name] = 1.0 / curv if curv > 0 else 1.0
    return scales


def probe_field_scales(init: StateVector, cfg: SolveConfig,
                       obs: ObservationSet, instrument: InstrumentModel,
                       spectro, grid: Grid) -> dict:
    """Curvature-probe the per-field step scales at ``init``.

    Useful when many solves share a warm start (regularizer search): probe
    once, then pass the result through ``SolveConfig.field_scales``.
    """
    channels = cfg.channels or obs.channel_ids()
    x = init.copy()
    x.set("x_Cmol", x.x_Cmol)
    nll, grads = _nll_and_grads(x, cfg, obs, instrument, spectro, grid,
                                channels)
    return _probe_scales(x, cfg, obs, instrument, spectro, grid, channels,
                         grads)


def noise_gradient_floor(state: StateVector, cfg: SolveConfig,
                         obs: ObservationSet, instrument: InstrumentModel,
                         spectro, grid: Grid, seed=0) -> dict:
    """Statistical noise floor of each free field's gradient at ``state``.

    Resamples counts from the state's own forward expectation (at the
    observation's shot fraction, keeping the real cell and channel weights)
    and returns the per-field RMS of the weighted-NLL gradient under that
    draw. The channel weight w_c strips the likelihood of its raw count
    scale, so this floor, not 1, is the natural magnitude for a TV weight:
    regularizers decades above it override the data term entirely.
    """
    channels = cfg.channels or obs.channel_ids()
    x = state.copy()
    x.set("x_Cmol", x.x_Cmol)
    fwd = full_forward(x, instrument, spectro, grid, channels=channels)
    rng = np.random.default_rng(seed)
    fake = {}
    for cid in channels:
        co = obs.channels[cid]
        lam = obs.shot_fraction * fwd.expected[cid]
        fake[cid] = ChannelObservation(
            counts=rng.poisson(lam).astype(float), max_sub=co.max_sub,
            mean_sub=co.mean_sub, std_sub=co.std_sub, wprime=co.wprime,
            wc=co.wc)
    fobs = ObservationSet(channels=fake, shot_fraction=obs.shot_fraction)
    _, grads = _nll_and_grads(x, cfg, fobs, instrument, spectro, grid,
                              channels)
    return {name: float(np.sqrt(np.mean(grads[name] ** 2)))
            for name in cfg.free_fields}


def solve(init: StateVector, cfg: SolveConfig, obs: ObservationSet,
          instrument: InstrumentModel, spectro, grid: Grid
          ) -> tuple[StateVector, ObjectiveTrace]:
    """Proximal-gradient PTV solve over the configured free fields.

    Outer iterations take a gradient step on the weighted NLL (per-field
    scaled, global Barzilai-Borwein step, backtracked until the penalized
    objective shows sufficient decrease), then apply the TV prox per free
    field. The objective never increases between accepted iterates. Frozen
    fields are bit-identical on return.
    """
    if not cfg.free_fields:
        raise ValueError("free_fields must be nonempty")
    channels = cfg.channels or obs.channel_ids()
    x = init.copy()
    x.set("x_Cmol", x.x_Cmol)   # enforce the pinned coordinate

    try:
        nll, grads = _nll_and_grads(x, cfg, obs, instrument, spectro, grid,
                                    channels)
    except (ValueError, FloatingPointError) as err:
        raise SolverError(f"initial state evaluation failed: {err}")
    if any(not np.all(np.isfinite(grads[n])) for n in cfg.free_fields):
        raise SolverError("non-finite gradient at the initial state")
    scales = dict(cfg.field_scales) if cfg.field_scales else \
        _probe_scales(x, cfg, obs, instrument, spectro, grid, channels, grads)

    trace = ObjectiveTrace()
    obj = nll + _tv_total(x, cfg)
    trace.append(obj, nll, obj - nll, 0.0, 0)

    eta = cfg.step_init
    calm = 0
    for it in range(cfg.max_outer):
        accepted = False
        n_back = 0
        while n_back <= cfg.max_backtracks:
            cand = x.copy()
            deltas = {}
            quad = 0.0
            for name in cfg.free_fields:
                s_i = scales[name]
                g_i = grads[name]
                v = x.get(name) - eta * s_i * g_i
                lam_i = eta * s_i * cfg.alphas.get(name, 0.0)
                u = tv_prox(v, lam_i, cfg.tv_iters) if lam_i > 0 else v
                cand.set(name, u)
                d = cand.get(name) - x.get(name)
                deltas[name] = d
                quad += float(np.sum(d * d)) / (2.0 * eta * s_i)
            step_norm = max((float(np.max(np.abs(d))) if d.size else 0.0)
                            for d in deltas.values())
            if step_norm == 0.0:
                accepted = True
                cand_nll, cand_grads = nll, grads
                break
            try:
                cand_nll, cand_grads = _nll_and_grads(
                    cand, cfg, obs, instrument, spectro, grid, channels)
            except (SolverError, ValueError, FloatingPointError):
                cand_nll = np.inf
                cand_grads = None
            cand_obj = cand_nll + _tv_total(cand, cfg) \
                if np.isfinite(cand_nll) else np.inf
            # sufficient decrease relative to the scaled step length
            if cand_obj <= obj - 1e-4 * quad:
                accepted = True
                break
            eta *= 0.5
            n_back += 1

        if not accepted:
            raise SolverError(
                "objective increase after backtracking exhaustion",
                {"iteration": it, "step": eta, "objective": obj})
        if cand_grads is None:
            cand_grads = grads
        if any(not np.all(np.isfinite(cand_grads[n])) for n in cfg.free_fields):
            raise SolverError("non-finite gradient", {"iteration": it})

        if step_norm == 0.0:
            trace.termination = "stationary"
            break

        new_obj = cand_nll + _tv_total(cand, cfg)
        # Barzilai-Borwein step in the per-field scaled metric
        num = 0.0
        den = 0.0
        for name in cfg.free_fields:
            d = deltas[name]
            num += float(np.sum(d * d)) / scales[name]
            den += float(np.sum(d * (cand_grads[name] - grads[name])))
        rel_drop = (obj - new_obj) / max(1.0, abs(obj))
        x, nll, grads = cand, cand_nll, cand_grads
        trace.append(new_obj, cand_nll, new_obj - cand_nll, eta, n_back)
        obj = new_obj
        if den > 0:
            bb = num / den
            # keep the next trial step near the last accepted one so a
            # single optimistic BB estimate cannot restart a halving cascade
            eta = float(np.clip(bb, 0.25 * eta, 4.0 * eta))
        elif n_back == 0:
            eta *= 2.0

        if rel_drop < cfg.tol:
            calm += 1
            if calm >= cfg.calm_needed and it + 1 >= cfg.min_outer:
                trace.termination = "objective_converged"
                break
        else:
            calm = 0
    else:
        trace.termination = "iteration_cap"
    if not trace.termination:
        trace.termination = trace.termination or "objective_converged"
    return x, trace


def poisson_thin(obs: ObservationSet, p: float = 0.5, seed=0
                 ) -> tuple[ObservationSet, ObservationSet]:
    """Binomial split of Poisson counts into independent fit/validation sets.

    Each cell's counts route Binomial(y, p) to the fit half; expectations
    (shots and background jointly) scale through the halves' shot fractions.
    Sub-bin statistics and the cell weights w' are computed once from the
    raw data and shared; the scalar channel weight is recomputed from each
    half's own counts.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    rng = np.random.default_rng(seed)
    fit_ch = {}
    val_ch = {}
    for cid in obs.channel_ids():
        co = obs.channels[cid]
        y = np.asarray(co.counts)
        if np.any(y < 0) or np.any(y != np.floor(y)):
            raise ValueError("thinning requires nonnegative integer counts")
        y_fit = rng.binomial(y.astype(np.int64), p).astype(float)
        y_val = y - y_fit
        fit_ch[cid] = ChannelObservation(
            counts=y_fit, max_sub=co.max_sub, mean_sub=co.mean_sub,
            std_sub=co.std_sub, wprime=co.wprime.copy(),
            wc=channel_weight(co.wprime, y_fit))
        val_ch[cid] = ChannelObservation(
            counts=y_val, max_sub=co.max_sub, mean_sub=co.mean_sub,
            std_sub=co.std_sub, wprime=co.wprime.copy(),
            wc=channel_weight(co.wprime, y_val))
    return (ObservationSet(fit_ch, obs.shot_fraction * p),
            ObservationSet(val_ch, obs.shot_fraction * (1.0 - p)))


def validation_loss(state: StateVector, val_obs: ObservationSet,
                    instrument: InstrumentModel, spectro, grid: Grid,
                    channels: tuple | None = None) -> float:
    """Poisson NLL of the state against held-out data.

    The forward expectation is scaled to the validation split's shot
    fraction. All-zero weights give 0.
    """
    channels = channels or val_obs.channel_ids()
    fwd = full_forward(state, instrument, spectro, grid, channels=channels)
    return poisson_nll(fwd.expected, val_obs, scale=val_obs.shot_fraction)
