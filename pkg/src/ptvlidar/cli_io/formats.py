"""Versioned on-disk formats: gridded products, observations, models.

Gridded data travels as column-documented delimited text (one cell record
per line) for inspectability; a packed binary variant sits behind the
``binary`` flag for larger runs. Every file opens with a format name and
version plus enough header metadata (units, shape, seed) to interpret it
without the producing code. All writes are atomic: temp file then rename.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from ..grids import Grid, make_grid
from ..instrument import (AfterpulseFit, ChannelSpec, InstrumentModel,
                          PulseShape)
from ..solver import ChannelObservation, ObservationSet
from ..spectroscopy import SpectroModel
from ..state import StateVector
from ..forward import LaserSpectro

CELLS_FORMAT = "ptv-cells"
OBS_FORMAT = "ptv-observations"
FORMAT_VERSION = 1

_FLOAT_FMT = "%.17g"   # round-trips IEEE doubles exactly


def atomic_write_text(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _npz_bytes(arrays: dict) -> bytes:
    import io
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


class FormatError(ValueError):
    pass


def _header_lines(fmt: str, meta: dict) -> list:
    lines = [f"# {fmt} {FORMAT_VERSION}"]
    for k in meta:
        v = meta[k]
        if isinstance(v, float):
            v = _FLOAT_FMT % v
        lines.append(f"# {k}: {v}")
    return lines


def _parse_header(lines, expect_fmt: str) -> tuple[dict, int]:
    if not lines or not lines[0].startswith("# "):
        raise FormatError("missing format header")
    name, _, ver = lines[0][2:].rpartition(" ")
    if name != expect_fmt:
        raise FormatError(f"expected {expect_fmt}, found {name!r}")
    if int(ver) != FORMAT_VERSION:
        raise FormatError(f"unsupported {name} version {ver}")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("# "):
        body = lines[i][2:]
        key, _, val = body.partition(": ")
        meta[key] = val
        i += 1
    return meta, i


def write_cells(path: str, array: np.ndarray, *, name: str, units: str,
                meta: dict | None = None, binary: bool = False) -> None:
    """Write a 1-D or 2-D gridded product as cell records (or packed npz)."""
    a = np.asarray(array, dtype=float)
    if a.ndim not in (1, 2):
        raise FormatError("cell files hold 1-D or 2-D arrays")
    axes = "time range" if a.ndim == 2 else "index"
    if binary:
        arrays = {"format": np.bytes_(CELLS_FORMAT),
                  "format_version": np.array([FORMAT_VERSION]),
                  "name": np.bytes_(name), "units": np.bytes_(units),
                  "data": a,
                  "meta_json": np.bytes_(json.dumps(meta or {}, sort_keys=True))}
        atomic_write_bytes(path, _npz_bytes(arrays))
        return
    head = {"name": name, "units": units,
            "shape": " ".join(str(s) for s in a.shape), "axes": axes}
    for k in sorted(meta or {}):
        head[f"meta.{k}"] = (meta or {})[k]
    lines = _header_lines(CELLS_FORMAT, head)
    if a.ndim == 2:
        lines.append("# columns: time_index range_index value")
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                lines.append(f"{i} {j} {_FLOAT_FMT % a[i, j]}")
    else:
        lines.append("# columns: index value")
        for j in range(a.size):
            lines.append(f"{j} {_FLOAT_FMT % a[j]}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_cells(path: str) -> tuple[np.ndarray, dict]:
    """Read a cell-record file (text or npz); returns (array, metadata)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic[:2] == b"PK":   # zip container: the packed binary variant
        with np.load(path) as z:
            if z["format"].item().decode() != CELLS_FORMAT:
                raise FormatError("not a cells file")
            if int(z["format_version"][0]) != FORMAT_VERSION:
                raise FormatError("unsupported cells version")
            meta = json.loads(z["meta_json"].item().decode())
            meta.update({"name": z["name"].item().decode(),
                         "units": z["units"].item().decode()})
            return z["data"].copy(), meta
    with open(path) as fh:
        lines = fh.read().splitlines()
    head, body_at = _parse_header(lines, CELLS_FORMAT)
    shape = tuple(int(s) for s in head["shape"].split())
    a = np.empty(shape, dtype=float)
    filled = np.zeros(shape, dtype=bool)
    for ln in lines[body_at:]:
        if not ln or ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) == 3:
            i, j = int(parts[0]), int(parts[1])
            a[i, j] = float(parts[2])
            filled[i, j] = True
        else:
            j = int(parts[0])
            a[j] = float(parts[1])
            filled[j] = True
    if not filled.all():
        raise FormatError(f"{path}: incomplete cell records")
    meta = {k[5:]: v for k, v in head.items() if k.startswith("meta.")}
    meta.update({"name": head["name"], "units": head["units"]})
    return a, meta


def write_grid(path: str, grid: Grid) -> None:
    doc = {"format": "ptv-grid", "format_version": FORMAT_VERSION,
           "time_edges_s": [float(v) for v in grid.time_edges],
           "range_centers_m": [float(v) for v in grid.range_centers],
           "freq_offsets_hz": [float(v) for v in grid.freq_offsets],
           "raw_bin_duration_s": grid.raw_bin_duration,
           "range_bin_m": grid.dr_m}
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_grid(path: str) -> Grid:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "ptv-grid" \
            or doc.get("format_version") != FORMAT_VERSION:
        raise FormatError("not a supported grid file")
    return Grid(time_edges=np.array(doc["time_edges_s"], dtype=float),
                range_centers=np.array(doc["range_centers_m"], dtype=float),
                freq_offsets=np.array(doc["freq_offsets_hz"], dtype=float),
                raw_bin_duration=float(doc["raw_bin_duration_s"]),
                dr_m=float(doc["range_bin_m"]))


_OBS_COLS = ("counts", "max_sub", "mean_sub", "std_sub", "wprime")


def write_observations(outdir: str, obs: ObservationSet) -> list:
    """One cell-record file per channel; returns the written paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = []
    for cid in obs.channel_ids():
        ch = obs.channels[cid]
        head = {"channel": cid, "wc": float(ch.wc),
                "shot_fraction": float(obs.shot_fraction),
                "shape": " ".join(str(s) for s in ch.counts.shape)}
        lines = _header_lines(OBS_FORMAT, head)
        lines.append("# columns: time_index range_index "
                     + " ".join(_OBS_COLS))
        cols = [getattr(ch, c) for c in _OBS_COLS]
        nt, nr = ch.counts.shape
        for i in range(nt):
            for j in range(nr):
                vals = " ".join(_FLOAT_FMT % c[i, j] for c in cols)
                lines.append(f"{i} {j} {vals}")
        p = os.path.join(outdir, f"obs_{cid}.txt")
        atomic_write_text(p, "\n".join(lines) + "\n")
        paths.append(p)
    return paths


def read_observations(outdir: str) -> ObservationSet:
    channels = {}
    shot_fraction = None
    names = sorted(n for n in os.listdir(outdir)
                   if n.startswith("obs_") and n.endswith(".txt"))
    if not names:
        raise FormatError(f"no observation files under {outdir}")
    for fn in names:
        with open(os.path.join(outdir, fn)) as fh:
            lines = fh.read().splitlines()
        head, body_at = _parse_header(lines, OBS_FORMAT)
        shape = tuple(int(s) for s in head["shape"].split())
        data = {c: np.empty(shape, dtype=float) for c in _OBS_COLS}
        for ln in lines[body_at:]:
            if not ln or ln.startswith("#"):
                continue
            parts = ln.split()
            i, j = int(parts[0]), int(parts[1])
            for c, v in zip(_OBS_COLS, parts[2:]):
                data[c][i, j] = float(v)
        sf = float(head["shot_fraction"])
        if shot_fraction is None:
            shot_fraction = sf
        elif sf != shot_fraction:
            raise FormatError("inconsistent shot_fraction across channels")
        channels[head["channel"]] = ChannelObservation(
            counts=data["counts"], max_sub=data["max_sub"],
            mean_sub=data["mean_sub"], std_sub=data["std_sub"],
            wprime=data["wprime"], wc=float(head["wc"]))
    return ObservationSet(channels=channels, shot_fraction=shot_fraction)


def write_instrument(path: str, instrument: InstrumentModel) -> None:
    arrays = {"format": np.bytes_("ptv-instrument"),
              "format_version": np.array([FORMAT_VERSION]),
              "channel_ids": np.array(sorted(instrument.channels))}
    for cid in instrument.channels:
        ch = instrument.channels[cid]
        arrays[f"ch.{cid}.eta"] = ch.eta
        arrays[f"ch.{cid}.afterpulse"] = ch.afterpulse
        arrays[f"ch.{cid}.scalars"] = np.array(
            [ch.gain, ch.gamma, ch.shots_per_bin, ch.background])
        arrays[f"ch.{cid}.tags"] = np.array(
            [ch.wavelength_tag, ch.detector_tag])
    arrays["pulse_tags"] = np.array(sorted(instrument.pulses))
    for tag in instrument.pulses:
        arrays[f"pulse.{tag}"] = instrument.pulses[tag].kernel
    atomic_write_bytes(path, _npz_bytes(arrays))


def read_instrument(path: str) -> InstrumentModel:
    with np.load(path) as z:
        if z["format"].item().decode() != "ptv-instrument" \
                or int(z["format_version"][0]) != FORMAT_VERSION:
            raise FormatError("not a supported instrument file")
        channels = {}
        for cid in (str(c) for c in z["channel_ids"]):
            gain, gamma, shots, bg = z[f"ch.{cid}.scalars"]
            wl, det = (str(t) for t in z[f"ch.{cid}.tags"])
            channels[cid] = ChannelSpec(
                id=cid, wavelength_tag=wl, detector_tag=det,
                eta=z[f"ch.{cid}.eta"].copy(),
                gain=float(gain), gamma=float(gamma),
                shots_per_bin=float(shots), background=float(bg),
                afterpulse=z[f"ch.{cid}.afterpulse"].copy())
        pulses = {str(t): PulseShape(kernel=z[f"pulse.{t}"].copy())
                  for t in z["pulse_tags"]}
    return InstrumentModel(channels=channels, pulses=pulses)


_SPECTRO_FIELDS = ("mean_spectrum", "components", "coeffs", "powers")


def write_spectro_suite(path: str, suite: dict) -> None:
    """Serialize the laser-tag -> LaserSpectro mapping to one packed file."""
    arrays = {"format": np.bytes_("ptv-spectro"),
              "format_version": np.array([FORMAT_VERSION]),
              "tags": np.array(sorted(suite))}
    for tag in suite:
        for role in ("oxygen", "water", "rayleigh"):
            model = getattr(suite[tag], role)
            if model is None:
                continue
            pre = f"{tag}.{role}"
            for f in _SPECTRO_FIELDS:
                arrays[f"{pre}.{f}"] = getattr(model, f)
            arrays[f"{pre}.quantity"] = np.bytes_(model.quantity)
            arrays[f"{pre}.ranges"] = np.array(
                [*model.t_range, *model.p_range])
    atomic_write_bytes(path, _npz_bytes(arrays))


def read_spectro_suite(path: str) -> dict:
    suite = {}
    with np.load(path) as z:
        if z["format"].item().decode() != "ptv-spectro" \
                or int(z["format_version"][0]) != FORMAT_VERSION:
            raise FormatError("not a supported spectroscopy file")
        keys = set(z.files)
        for tag in (str(t) for t in z["tags"]):
            models = {}
            for role in ("oxygen", "water", "rayleigh"):
                pre = f"{tag}.{role}"
                if f"{pre}.quantity" not in keys:
                    models[role] = None
                    continue
                rng = z[f"{pre}.ranges"]
                models[role] = SpectroModel(
                    quantity=z[f"{pre}.quantity"].item().decode(),
                    mean_spectrum=z[f"{pre}.mean_spectrum"].copy(),
                    components=z[f"{pre}.components"].copy(),
                    coeffs=z[f"{pre}.coeffs"].copy(),
                    powers=z[f"{pre}.powers"].copy(),
                    t_range=(float(rng[0]), float(rng[1])),
                    p_range=(float(rng[2]), float(rng[3])))
            suite[tag] = LaserSpectro(**models)
    return suite


def write_state(path: str, state: StateVector) -> None:
    arrays = {"format": np.bytes_("ptv-state"),
              "format_version": np.array([FORMAT_VERSION]),
              "T_surface": state.T_surface, "P_surface": state.P_surface,
              "x_Cmol": state.x_Cmol, "x_Gon": state.x_Gon}
    for name in ("x_phi", "x_B", "x_Cwv", "x_n", "x_T"):
        f = getattr(state, name)
        arrays[f"{name}.values"] = f.values
        arrays[f"{name}.factors"] = np.array(f.factors)
    atomic_write_bytes(path, _npz_bytes(arrays))


def read_state(path: str) -> StateVector:
    from ..grids import Field2D
    with np.load(path) as z:
        if z["format"].item().decode() != "ptv-state" \
                or int(z["format_version"][0]) != FORMAT_VERSION:
            raise FormatError("not a supported state file")
        kw = {"T_surface": z["T_surface"].copy(),
              "P_surface": z["P_surface"].copy(),
              "x_Cmol": z["x_Cmol"].copy(), "x_Gon": z["x_Gon"].copy()}
        for name in ("x_phi", "x_B", "x_Cwv", "x_n", "x_T"):
            kw[name] = Field2D(values=z[f"{name}.values"].copy(),
                               factors=tuple(int(v)
                                             for v in z[f"{name}.factors"]))
    return StateVector(**kw)


def write_afterpulse(path: str, fit: AfterpulseFit) -> None:
    doc = {"format": "ptv-afterpulse", "format_version": FORMAT_VERSION,
           "background_per_bin": fit.b,
           "modes": [[float(a), float(k)] for a, k in fit.modes]}
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_afterpulse(path: str) -> AfterpulseFit:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "ptv-afterpulse" \
            or doc.get("format_version") != FORMAT_VERSION:
        raise FormatError("not a supported afterpulse file")
    return AfterpulseFit(b=float(doc["background_per_bin"]),
                         modes=tuple((float(a), float(k))
                                     for a, k in doc["modes"]))


def write_manifest(path: str, entries: dict, *, master_seed=None,
                   extra: dict | None = None) -> None:
    """Product index: file names, units, and the seed that made them."""
    doc = {"format": "ptv-manifest", "format_version": FORMAT_VERSION,
           "master_seed": master_seed, "products": entries}
    if extra:
        doc.update(extra)
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_manifest(path: str) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "ptv-manifest" \
            or doc.get("format_version") != FORMAT_VERSION:
        raise FormatError("not a supported manifest file")
    return doc


def make_grid_from_config(block: dict) -> Grid:
    return make_grid(int(block.get("n_time", 24)),
                     int(block.get("n_range", 80)),
                     float(block.get("range_bin_m", 37.5)),
                     int(block.get("n_freq", 21)),
                     float(block.get("freq_span_hz", 8e9)),
                     raw_bin_s=float(block.get("raw_bin_s", 2.0)),
                     bin_s=float(block.get("time_bin_s", 300.0)))


def load_config(path: str) -> dict:
    """Load the run configuration document and validate referenced paths."""
    import yaml
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise FormatError("configuration must be a mapping")
    paths = cfg.get("paths", {})
    for key, p in paths.items():
        if key.endswith("_out") or key.endswith("_dir_out"):
            continue
        if p and not os.path.exists(p):
            raise FormatError(f"configured path {key} does not exist: {p}")
    grid_block = cfg.get("grid", {})
    for key in grid_block:
        if key not in ("n_time", "n_range", "range_bin_m", "n_freq",
                       "freq_span_hz", "raw_bin_s", "time_bin_s"):
            raise FormatError(f"unknown grid key {key!r}")
        if key.endswith(("_m", "_s", "_hz")) and float(grid_block[key]) <= 0:
            raise FormatError(f"grid key {key} must be positive")
    return cfg
