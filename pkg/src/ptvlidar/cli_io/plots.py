"""Batch plot emission: curtain heatmaps and profile overlays as SVG."""

from __future__ import annotations

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from ..grids import Grid


def curtain(path: str, field: np.ndarray, grid: Grid, *, title: str,
            units: str, vmin=None, vmax=None) -> str:
    """Time-range heatmap of one 2-D product; returns the written path."""
    field = np.asarray(field, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4))
    t_h = grid.time_edges / 3600.0
    r_km = np.concatenate([grid.range_centers - grid.dr / 2,
                           [grid.range_centers[-1] + grid.dr / 2]]) / 1e3
    pm = ax.pcolormesh(t_h, r_km, field.T, shading="flat",
                       vmin=vmin, vmax=vmax, cmap="viridis")
    fig.colorbar(pm, ax=ax, label=units)
    ax.set_xlabel("time [h]")
    ax.set_ylabel("range [km]")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def profile_overlay(path: str, profiles: dict, grid: Grid, *, title: str,
                    xlabel: str, truth: np.ndarray | None = None) -> str:
    """Range profiles at selected times, with the truth curve when known."""
    fig, ax = plt.subplots(figsize=(5, 5))
    r_km = grid.range_centers / 1e3
    for label, prof in profiles.items():
        ax.plot(np.asarray(prof, dtype=float), r_km, label=label, lw=1.2)
    if truth is not None:
        ax.plot(np.asarray(truth, dtype=float), r_km, "k--", label="truth",
                lw=1.5)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("range [km]")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


_UNITS = {"T": "K", "n": "g/m^3", "B": "", "sigma_e": "K", "T_std": "K",
          "phi": "", "C_wv": "", "C_mol": "", "G_on": "", "P": "Pa"}


def plot_products(outdir: str, products: dict, grid: Grid, *,
                  times=(0,), truth: dict | None = None) -> list:
    """One curtain per 2-D product plus profile overlays at given times."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    for name, arr in products.items():
        arr = np.asarray(arr, dtype=float)
        units = _UNITS.get(name, "")
        if arr.ndim != 2 or arr.shape != grid.shape():
            continue
        p = os.path.join(outdir, f"curtain_{name}.svg")
        written.append(curtain(p, arr, grid, title=name, units=units))
        profs = {f"t={int(ti)}": arr[int(ti)] for ti in times
                 if 0 <= int(ti) < arr.shape[0]}
        if profs:
            tr = None
            if truth and name in truth:
                tr = np.asarray(truth[name], dtype=float)
                tr = tr[int(times[0])] if tr.ndim == 2 else tr
            p = os.path.join(outdir, f"profile_{name}.svg")
            written.append(profile_overlay(p, profs, grid, title=name,
                                           xlabel=units or name, truth=tr))
    return written
