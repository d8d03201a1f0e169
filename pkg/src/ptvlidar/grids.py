"""Shared coordinate system: time/range analysis cells plus the frequency comb.

All retrieval arrays are indexed [time, range] (with a trailing frequency axis
where spectra are involved). Range gates are centers starting at r = 0 with
fixed spacing; the frequency comb is symmetric about the laser line and always
contains exactly one zero offset. Grids are immutable and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Analysis grid shared by observations, state, and the forward model.

    time_edges : accumulation-cell edges [s], length n_time+1, monotone
    range_centers : range-gate centers [m], r_k = k*dr
    freq_offsets : comb offsets from the transmit frequency [Hz]
    raw_bin_duration : raw capture sub-bin length [s]
    dr_m : range-gate spacing [m] (kept explicit for single-gate grids)
    """

    time_edges: np.ndarray
    range_centers: np.ndarray
    freq_offsets: np.ndarray
    raw_bin_duration: float
    dr_m: float

    @property
    def n_time(self) -> int:
        return self.time_edges.size - 1

    @property
    def n_range(self) -> int:
        return self.range_centers.size

    @property
    def n_freq(self) -> int:
        return self.freq_offsets.size

    @property
    def dr(self) -> float:
        return self.dr_m

    @property
    def bin_s(self) -> float:
        """Accumulation-cell length [s]."""
        return float(self.time_edges[1] - self.time_edges[0])

    @property
    def n_subbins(self) -> int:
        """Raw capture sub-bins accumulated into one analysis cell."""
        return int(round(self.bin_s / self.raw_bin_duration))

    @property
    def center_index(self) -> int:
        """Index of the nu = 0 comb point (laser line)."""
        return int(np.argmin(np.abs(self.freq_offsets)))

    def shape(self) -> tuple[int, int]:
        return (self.n_time, self.n_range)


def make_grid(n_time: int, n_range: int, dr_m: float, n_freq: int,
              freq_span_hz: float, raw_bin_s: float = 2.0, *,
              bin_s: float = 300.0) -> Grid:
    """Build a Grid.

    freq_span_hz is the TOTAL comb width: offsets run
    linspace(-span/2, +span/2, n_freq). n_freq must be odd so the comb
    contains the exact laser line. bin_s is the accumulation-cell length.
    """
    if n_time < 1 or n_range < 1:
        raise ValueError("grid needs n_time >= 1 and n_range >= 1")
    if n_freq < 1 or n_freq % 2 == 0:
        raise ValueError("n_freq must be odd so the comb includes zero offset")
    if dr_m <= 0 or bin_s <= 0 or raw_bin_s <= 0:
        raise ValueError("dr_m, bin_s and raw_bin_s must be positive")
    if abs(bin_s / raw_bin_s - round(bin_s / raw_bin_s)) > 1e-9:
        raise ValueError("bin_s must be an integer multiple of raw_bin_s")
    edges = np.arange(n_time + 1, dtype=float) * bin_s
    ranges = np.arange(n_range, dtype=float) * dr_m
    if n_freq == 1:
        offsets = np.zeros(1)
    else:
        offsets = np.linspace(-freq_span_hz / 2.0, freq_span_hz / 2.0, n_freq)
    return Grid(time_edges=edges, range_centers=ranges, freq_offsets=offsets,
                raw_bin_duration=float(raw_bin_s), dr_m=float(dr_m))


@dataclass
class Field2D:
    """A [time, range] field with integer coarsening factors per axis.

    factors = (1, 1) means native resolution. A coarse field covers the
    native grid by block replication; a ragged last block is allowed (the
    replicated array is cropped to the native shape).
    """

    values: np.ndarray
    factors: tuple[int, int] = (1, 1)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("Field2D values must be 2-D [time, range]")
        if self.factors[0] < 1 or self.factors[1] < 1:
            raise ValueError("coarsening factors must be >= 1")

    def copy(self) -> "Field2D":
        return Field2D(self.values.copy(), self.factors)


def coarse_shape(native_shape: tuple[int, int],
                 factors: tuple[int, int]) -> tuple[int, int]:
    """Coarse array shape covering a native shape (ceil division)."""
    return (-(-native_shape[0] // factors[0]), -(-native_shape[1] // factors[1]))


def check_compatible(field: Field2D, grid: Grid) -> None:
    """Raise if the field cannot tile the grid by block replication."""
    if field.values.shape != coarse_shape(grid.shape(), field.factors):
        raise ValueError(
            f"field {field.values.shape} with factors {field.factors} does "
            f"not tile grid {grid.shape()}")


def resample_up(field: Field2D, grid: Grid) -> np.ndarray:
    """Block-replicate a coarse field onto the native grid.

    Nearest-neighbor (piecewise-constant) upsampling; a ragged last block is
    padded by cropping the replication, so coarse [a, b] with factor 2 over 3
    native bins yields [a, a, b].
    """
    check_compatible(field, grid)
    ft, fr = field.factors
    big = np.repeat(np.repeat(field.values, ft, axis=0), fr, axis=1)
    return big[:grid.n_time, :grid.n_range]


def block_sum(native: np.ndarray, factors: tuple[int, int]) -> np.ndarray:
    """Sum native values over coarse blocks (adjoint of resample_up).

    Handles ragged last blocks by zero-padding before the reduction.
    """
    ft, fr = factors
    nt, nr = native.shape
    ct, cr = coarse_shape((nt, nr), factors)
    if (ct * ft, cr * fr) != (nt, nr):
        padded = np.zeros((ct * ft, cr * fr))
        padded[:nt, :nr] = native
        native = padded
    return native.reshape(ct, ft, cr, fr).sum(axis=(1, 3))


def block_mean(native: np.ndarray, factors: tuple[int, int]) -> np.ndarray:
    """Average native values over coarse blocks (ragged blocks use true counts)."""
    ft, fr = factors
    nt, nr = native.shape
    counts = block_sum(np.ones((nt, nr)), factors)
    return block_sum(native, factors) / counts
