"""Staged estimation sequence, regularizer search, bootstrap replicates.

The retrieval runs eight stages, each freeing at most two fields (until the
joint stages 7 and 8), fitting only the channels that constrain them:

1. molecular differential overlap + flux proxy on the online oxygen pair
2. flux on the offline molecular channel
3. flux + backscatter ratio on the offline oxygen pair
4. water-vapor differential overlap on the offline wv channel
5. wv overlap + absolute humidity on the wv pair
6. online gain on the online combined channel (range-decaying fit weight)
7. everything free, searching only the temperature regularizer
8. everything free, all regularizers jittered around the stage-7 optimum

Each stage thins the observations once, runs a Gaussian log10-space search
over its regularizers scored by held-out validation loss, recentered on the
best converged candidate after every batch, and returns the best state as
the warm start of the next stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import Grid
from .instrument import InstrumentModel
from .solver import (ObservationSet, SolveConfig, SolverError,
                     noise_gradient_floor, poisson_thin, probe_field_scales,
                     solve, validation_loss)
from .state import FIELD_NAMES, StateVector, initial_state, realize

DEFAULT_R_DECAY = 1500.0     # m, stage-6 fit-weight scale

# stage id -> (free fields, channels, searched regularizers)
STAGE_TABLE = {
    1: (("x_Cmol", "x_phi"), ("o2on_mol", "o2on_comb"), ("x_Cmol", "x_phi")),
    2: (("x_phi",), ("o2off_mol",), ("x_phi",)),
    3: (("x_phi", "x_B"), ("o2off_mol", "o2off_comb"), ("x_phi", "x_B")),
    4: (("x_Cwv",), ("wv_off",), ("x_Cwv",)),
    5: (("x_Cwv", "x_n"), ("wv_off", "wv_on"), ("x_Cwv", "x_n")),
    6: (("x_Gon",), ("o2on_comb",), ("x_Gon",)),
    7: (FIELD_NAMES, None, ("x_T",)),
    8: (FIELD_NAMES, None, FIELD_NAMES),
}

DEFAULT_BUDGETS = {1: 6, 2: 4, 3: 6, 4: 4, 5: 6, 6: 4, 7: 6, 8: 8}

# the joint stages walk every field at once and need far more outer steps
DEFAULT_MAX_OUTER = {1: 200, 2: 200, 3: 200, 4: 200, 5: 200, 6: 200,
                     7: 1200, 8: 1200}

# log10 starting centers for regularizers never searched before; None means
# center on the measured gradient noise floor (the channel weight normalizes
# the likelihood to order one, so no fixed constant is safe across grids)
DEFAULT_LOG10_CENTERS = {name: None for name in FIELD_NAMES}

# deterministic first-batch spread, in proposal-std units (std 0.5 spans
# -3..+1.5 decades): the useful regularizer range is only known to within
# a few decades, so the search opens wide before the Gaussian refinement
COARSE_OFFSETS = (-6.0, -3.0, 3.0)

# per-replicate Gaussian scalar jitter added to each field's initialization
DEFAULT_JITTER = {"x_phi": 0.02, "x_B": 0.02, "x_Cwv": 0.02, "x_n": 0.1,
                  "x_Cmol": 0.02, "x_T": 5e-4, "x_Gon": 0.02}


class StageError(RuntimeError):
    """Every search candidate of a stage failed."""

    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass
class StageSpec:
    """Wiring of one stage: what is free, what is fitted, what is searched."""

    stage: int
    free_fields: tuple
    channels: tuple | None
    searched: tuple
    extra_cell_weights: dict | None = None


def stage_spec(n: int, grid: Grid | None = None,
               r_decay: float = DEFAULT_R_DECAY) -> StageSpec:
    if n not in STAGE_TABLE:
        raise ValueError("stage must be 1..8")
    free, channels, searched = STAGE_TABLE[n]
    extra = None
    if n == 6:
        if grid is None:
            raise ValueError("stage 6 needs the grid for its range weight")
        w = np.exp(-grid.range_centers / r_decay)[None, :]
        extra = {"o2on_comb": np.broadcast_to(w, grid.shape()).copy()}
    return StageSpec(stage=n, free_fields=tuple(free), channels=channels,
                     searched=tuple(searched), extra_cell_weights=extra)


@dataclass
class SearchState:
    """History of one regularizer search.

    history entries: dict with log10 alphas, validation loss, converged flag,
    and termination string. best_index points at the best converged entry.
    """

    center: dict
    std: float
    history: list = field(default_factory=list)
    best_index: int = -1

    def best(self) -> dict:
        if self.best_index < 0:
            raise StageError("no converged search candidate", self.history)
        return self.history[self.best_index]

    def best_alphas(self) -> dict:
        return {k: 10.0 ** v for k, v in self.best()["log10_alpha"].items()}


def search_regularizers(spec: StageSpec, warm: StateVector,
                        obs_fit: ObservationSet, obs_val: ObservationSet,
                        instrument: InstrumentModel, spectro, grid: Grid,
                        budget: int, seed, *,
                        centers: dict, fixed_alphas: dict | None = None,
                        std0: float = 0.5, batch: int = 4,
                        shrink: float = 0.8, max_outer: int = 200,
                        tol: float = 1e-6) -> tuple:
    """Search in log10 regularizer space: coarse sweep, Gaussian refinement.

    The first candidate is the center itself; the next few step all searched
    regularizers together by the fixed COARSE_OFFSETS (in std units), pinning
    down the right decade. Later candidates are Gaussian draws around the
    current center. Each candidate solves from the same warm state, converged
    runs are scored by held-out validation loss, and the search recenters on
    the best converged point after every batch, shrinking the proposal std.
    Failed runs are recorded and never become the center. The coarse sweep is
    deterministic and draws are sequential from one seeded stream, so a
    larger budget extends a smaller one's history verbatim.

    Returns (best state, SearchState).
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    center = {k: float(centers[k]) for k in spec.searched}
    state = SearchState(center=dict(center), std=std0)
    best_state = None
    # all candidates start from the same warm state, so the curvature probe
    # can be shared across the whole search
    probe_cfg = SolveConfig(free_fields=spec.free_fields, alphas={},
                            channels=spec.channels,
                            extra_cell_weights=spec.extra_cell_weights)
    try:
        field_scales = probe_field_scales(warm, probe_cfg, obs_fit,
                                          instrument, spectro, grid)
    except (SolverError, ValueError, FloatingPointError):
        field_scales = None
    for i in range(budget):
        if i == 0:
            cand_log = dict(center)
        elif i <= len(COARSE_OFFSETS) and i < batch:
            off = COARSE_OFFSETS[i - 1] * std0
            cand_log = {k: center[k] + off for k in spec.searched}
        else:
            cand_log = {k: center[k] + state.std * rng.standard_normal()
                        for k in spec.searched}
        alphas = {k: 10.0 ** v for k, v in cand_log.items()}
        if fixed_alphas:
            for k, v in fixed_alphas.items():
                if k not in alphas:
                    alphas[k] = v
        cfg = SolveConfig(free_fields=spec.free_fields, alphas=alphas,
                          max_outer=max_outer, tol=tol,
                          channels=spec.channels,
                          extra_cell_weights=spec.extra_cell_weights,
                          field_scales=field_scales)
        entry = {"log10_alpha": dict(cand_log), "val_loss": np.inf,
                 "converged": False, "termination": ""}
        try:
            out, trace = solve(warm, cfg, obs_fit, instrument, spectro, grid)
            entry["termination"] = trace.termination
            entry["iterations"] = len(trace.objective) - 1
            entry["converged"] = trace.termination in ("objective_converged",
                                                       "stationary")
            entry["val_loss"] = validation_loss(out, obs_val, instrument,
                                                spectro, grid,
                                                channels=spec.channels)
        except SolverError as err:
            entry["termination"] = f"error: {err}"
            out = None
        state.history.append(entry)
        if entry["converged"] and np.isfinite(entry["val_loss"]) and (
                state.best_index < 0
                or entry["val_loss"]
                < state.history[state.best_index]["val_loss"]):
            state.best_index = len(state.history) - 1
            best_state = out
        if (i + 1) % batch == 0 and state.best_index >= 0:
            center = dict(state.history[state.best_index]["log10_alpha"])
            state.center = dict(center)
            state.std *= shrink
    if best_state is None:
        raise StageError(
            f"stage {spec.stage}: all {budget} candidates failed",
            state.history)
    return best_state, state


def run_stage(n: int, warm: StateVector, obs: ObservationSet,
              instrument: InstrumentModel, spectro, grid: Grid,
              search_budget: int, seed, *,
              alpha_registry: dict | None = None,
              r_decay: float = DEFAULT_R_DECAY, thin_p: float = 0.5,
              std0: float = 0.5, max_outer: int = 200,
              tol: float = 1e-6) -> tuple:
    """Thin, search, and solve one stage; returns (state, SearchState).

    alpha_registry carries regularizers settled by earlier stages: searched
    fields start their search centered on the registry value when present;
    non-searched free fields use it as a fixed regularizer. Fields new to
    the search center on the gradient noise floor at the warm state. Stage 8
    jitters around the full registry with a tighter proposal.
    """
    registry = dict(alpha_registry or {})
    spec = stage_spec(n, grid, r_decay)
    ss = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    thin_seed, search_seed, floor_seed = ss.spawn(3)
    obs_fit, obs_val = poisson_thin(obs, thin_p, thin_seed)
    centers = {}
    floors = None
    for name in spec.searched:
        if name in registry:
            centers[name] = np.log10(registry[name])
            continue
        fixed = DEFAULT_LOG10_CENTERS[name]
        if fixed is not None:
            centers[name] = fixed
            continue
        if floors is None:
            floor_cfg = SolveConfig(free_fields=spec.free_fields, alphas={},
                                    channels=spec.channels,
                                    extra_cell_weights=spec.extra_cell_weights)
            floors = noise_gradient_floor(warm, floor_cfg, obs_fit,
                                          instrument, spectro, grid,
                                          seed=floor_seed)
        centers[name] = float(np.log10(max(floors[name], 1e-12)))
    fixed = {name: registry[name] for name in spec.free_fields
             if name not in spec.searched and name in registry}
    stage_std = 0.25 if n == 8 else std0
    best_state, search = search_regularizers(
        spec, warm, obs_fit, obs_val, instrument, spectro, grid,
        search_budget, search_seed, centers=centers, fixed_alphas=fixed,
        std0=stage_std, max_outer=max_outer, tol=tol)
    return best_state, search


@dataclass
class PipelineResult:
    state: StateVector
    searches: dict
    alphas: dict
    grid: Grid

    def physical(self):
        return realize(self.state, self.grid)


def run_pipeline(obs: ObservationSet, instrument: InstrumentModel, spectro,
                 grid: Grid, surface: tuple, master_seed=0, *,
                 budgets: dict | None = None, t_factor: int = 8,
                 r_factor: int = 4, r_decay: float = DEFAULT_R_DECAY,
                 calibration: np.ndarray | None = None,
                 max_outer: int | dict | None = None,
                 tol: float = 1e-6) -> PipelineResult:
    """Run stages 1 through 8 and return the final state.

    surface: (T_surface, P_surface) per-time series. A stored molecular
    overlap calibration vector (x_Cmol) skips stage 1's solve. max_outer
    may be one cap for every stage or a {stage: cap} override. The whole
    pipeline is a deterministic function of its inputs and master_seed.
    """
    budgets = {**DEFAULT_BUDGETS, **(budgets or {})}
    if max_outer is None:
        outer_caps = dict(DEFAULT_MAX_OUTER)
    elif isinstance(max_outer, dict):
        outer_caps = {**DEFAULT_MAX_OUTER, **max_outer}
    else:
        outer_caps = {n: int(max_outer) for n in range(1, 9)}
    stage_seeds = np.random.SeedSequence(master_seed).spawn(8)
    state = initial_state(grid, instrument, surface, t_factor=t_factor,
                          r_factor=r_factor)
    registry = {}
    searches = {}
    for n in range(1, 9):
        if n == 1 and calibration is not None:
            state = state.copy()
            state.set("x_Cmol", np.asarray(calibration, dtype=float))
            continue
        state, search = run_stage(
            n, state, obs, instrument, spectro, grid, budgets[n],
            stage_seeds[n - 1], alpha_registry=registry, r_decay=r_decay,
            max_outer=outer_caps[n], tol=tol)
        searches[n] = search
        best = search.best_alphas()
        registry.update(best)
    return PipelineResult(state=state, searches=searches, alphas=registry,
                          grid=grid)


@dataclass
class BootstrapResult:
    """Per-cell spread across replicates of the realized products."""

    T_std: np.ndarray
    n_std: np.ndarray
    B_std: np.ndarray
    lapse_std: np.ndarray
    n_success: int
    failures: list

    def profiles(self):
        return {"T_std": self.T_std, "n_std": self.n_std,
                "B_std": self.B_std, "lapse_std": self.lapse_std}


def bootstrap_lite(warm: StateVector, alphas: dict, obs: ObservationSet,
                   instrument: InstrumentModel, spectro, grid: Grid,
                   replicates: int = 12, jitter_scale: dict | None = None,
                   seed=0, *, thin_p: float = 0.5, min_success: int = 8,
                   vary_thinning: bool = True, max_outer: int = 200,
                   tol: float = 1e-6) -> BootstrapResult:
    """Replicate the final joint solve under re-thinning and init jitter.

    Each replicate re-thins the observations (fresh seed unless
    vary_thinning is off), adds one Gaussian scalar per free field to the
    warm initialization, and reruns the joint solve with fixed regularizers.
    Returns per-cell standard deviations of T, humidity, backscatter ratio,
    and the coarse lapse rate over the successful replicates.
    """
    if replicates < 2:
        raise ValueError("need at least 2 replicates")
    jit = {**DEFAULT_JITTER, **(jitter_scale or {})}
    ss = np.random.SeedSequence(seed)
    thin_seeds = ss.spawn(replicates + 1)
    rng = np.random.default_rng(thin_seeds[-1])
    cfg = SolveConfig(free_fields=FIELD_NAMES, alphas=dict(alphas),
                      max_outer=max_outer, tol=tol)
    Ts, ns, Bs, lapses = [], [], [], []
    failures = []
    for rep in range(replicates):
        tseed = thin_seeds[rep] if vary_thinning else thin_seeds[0]
        obs_fit, _ = poisson_thin(obs, thin_p, tseed)
        init = warm.copy()
        for name in FIELD_NAMES:
            offset = jit.get(name, 0.0) * rng.standard_normal()
            init.set(name, init.get(name) + offset)
        try:
            out, _ = solve(init, cfg, obs_fit, instrument, spectro, grid)
        except SolverError as err:
            failures.append({"replicate": rep, "error": str(err)})
            continue
        phys = realize(out, grid)
        Ts.append(phys.T)
        ns.append(out.x_n.values.copy())     # g/m3
        Bs.append(phys.B)
        lapses.append(out.x_T.values.copy())
    if len(Ts) < min_success:
        raise StageError(
            f"only {len(Ts)}/{replicates} replicates succeeded "
            f"(need {min_success})", failures)
    return BootstrapResult(
        T_std=np.std(np.array(Ts), axis=0, ddof=1),
        n_std=np.std(np.array(ns), axis=0, ddof=1),
        B_std=np.std(np.array(Bs), axis=0, ddof=1),
        lapse_std=np.std(np.array(lapses), axis=0, ddof=1),
        n_success=len(Ts), failures=failures)
