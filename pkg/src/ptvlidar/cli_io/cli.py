"""Command-line surface: simulate, retrieve, bootstrap, uncertainty, plots.

Every subcommand is batch-oriented and deterministic for a fixed seed; all
failures exit nonzero after printing one machine-readable error record to
stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .. import evidential as ev
from ..constants import M_H2O, N_AVOGADRO
from ..instrument import fit_afterpulse
from ..pipeline import (DEFAULT_BUDGETS, DEFAULT_R_DECAY, bootstrap_lite,
                        run_pipeline, run_stage)
from ..simulator import (build_default_instrument, build_default_suite,
                         calibrate_flux, make_scene, observe,
                         state_from_truth)
from ..state import initial_state, realize
from . import formats as fm


def _grid_from_cfg(cfg: dict):
    return fm.make_grid_from_config(cfg.get("grid", {}))


def _load_cfg(args) -> dict:
    if getattr(args, "config", None):
        return fm.load_config(args.config)
    return {}


def _write_field(outdir, name, arr, units, meta, binary=False):
    ext = "npz" if binary else "txt"
    path = os.path.join(outdir, f"{name}.{ext}")
    fm.write_cells(path, arr, name=name, units=units, meta=meta,
                   binary=binary)
    return os.path.basename(path), units


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    grid = _grid_from_cfg(cfg)
    sim = cfg.get("simulate", {})
    os.makedirs(args.out, exist_ok=True)
    spectro = build_default_suite(grid)
    scene = make_scene(args.preset, grid, seed=args.seed)
    instrument = calibrate_flux(
        scene, build_default_instrument(
            grid, shots_per_bin=float(sim.get("shots_per_bin", 2.7e6)),
            background=float(sim.get("background", 50.0))),
        spectro, grid, target_hz=float(sim.get("target_hz", 1e6)))
    obs = observe(scene, instrument, spectro, grid, seed=args.seed,
                  rho_max=float(sim.get("rho_max_hz", 2e6)))

    fm.write_grid(os.path.join(args.out, "grid.json"), grid)
    fm.write_instrument(os.path.join(args.out, "instrument.npz"), instrument)
    fm.write_spectro_suite(os.path.join(args.out, "spectro.npz"), spectro)
    fm.write_observations(args.out, obs)
    meta = {"preset": args.preset, "seed": args.seed}
    entries = {}
    for name, arr, units in (
            ("truth_T", scene.T, "K"), ("truth_humidity", scene.humidity,
                                        "g/m^3"),
            ("truth_B", scene.B, ""), ("truth_phi", scene.phi, ""),
            ("surface_T", np.full(grid.n_time, scene.T_surface), "K"),
            ("surface_P", np.full(grid.n_time, scene.P_surface), "Pa")):
        fn, u = _write_field(args.out, name, arr, units, meta)
        entries[name] = {"file": fn, "units": u}
    entries["observations"] = {"file": "obs_<channel>.txt", "units": "counts"}
    fm.write_manifest(os.path.join(args.out, "manifest.json"), entries,
                      master_seed=args.seed, extra={"preset": args.preset})
    print(args.out)
    return 0


def cmd_train_spectro(args) -> int:
    cfg = _load_cfg(args)
    grid = _grid_from_cfg(cfg)
    suite = build_default_suite(grid)
    fm.write_spectro_suite(args.out, suite)
    print(args.out)
    return 0


def cmd_fit_afterpulse(args) -> int:
    counts, meta = fm.read_cells(args.counts)
    grid = fm.read_grid(args.grid)
    fit, nll = fit_afterpulse(counts, args.shots, grid, n_modes=args.modes)
    fm.write_afterpulse(args.out, fit)
    print(json.dumps({"out": args.out, "nll": nll,
                      "modes": len(fit.modes)}))
    return 0


def _load_inputs(indir):
    grid = fm.read_grid(os.path.join(indir, "grid.json"))
    instrument = fm.read_instrument(os.path.join(indir, "instrument.npz"))
    spectro = fm.read_spectro_suite(os.path.join(indir, "spectro.npz"))
    obs = fm.read_observations(indir)
    T0, _ = fm.read_cells(os.path.join(indir, "surface_T.txt"))
    P0, _ = fm.read_cells(os.path.join(indir, "surface_P.txt"))
    return grid, instrument, spectro, obs, (T0, P0)


def _product_grids(ph):
    humidity = ph.n * (M_H2O / N_AVOGADRO)
    return (("T", ph.T, "K"), ("humidity", humidity, "g/m^3"),
            ("B", ph.B, ""), ("phi", ph.phi, ""), ("C_wv", ph.C_wv, ""),
            ("pressure", ph.P, "Pa"), ("C_mol", ph.C_mol, ""),
            ("G_on", ph.G_on, ""))


def cmd_retrieve(args) -> int:
    cfg = _load_cfg(args)
    pl = cfg.get("pipeline", {})
    grid, instrument, spectro, obs, surface = _load_inputs(args.indir)
    os.makedirs(args.out, exist_ok=True)
    budgets = {int(k): int(v) for k, v in (pl.get("budgets") or {}).items()} \
        or None
    seed = args.seed if args.seed is not None else pl.get("master_seed", 0)
    res = run_pipeline(
        obs, instrument, spectro, grid, surface, master_seed=seed,
        budgets=budgets,
        t_factor=int(pl.get("t_factor", 8)),
        r_factor=int(pl.get("r_factor", 4)),
        r_decay=float(pl.get("r_decay_m", DEFAULT_R_DECAY)),
        max_outer=int(pl.get("max_outer", 200)),
        tol=float(pl.get("tol", 1e-6)))
    ph = res.physical()
    meta = {"master_seed": seed}
    entries = {}
    for name, arr, units in _product_grids(ph):
        fn, u = _write_field(args.out, name, arr, units, meta,
                             binary=args.binary)
        entries[name] = {"file": fn, "units": u}
    fm.write_state(os.path.join(args.out, "state.npz"), res.state)
    fm.write_grid(os.path.join(args.out, "grid.json"), grid)
    fm.atomic_write_text(
        os.path.join(args.out, "alphas.json"),
        json.dumps({"format": "ptv-alphas", "format_version": 1,
                    "alphas": res.alphas}, indent=1, sort_keys=True) + "\n")
    hist = {str(n): s.history for n, s in res.searches.items()}
    fm.atomic_write_text(
        os.path.join(args.out, "search_history.json"),
        json.dumps(hist, indent=1, sort_keys=True, default=float) + "\n")

    if args.bootstrap_replicates > 0:
        boot = bootstrap_lite(
            res.state, res.alphas, obs, instrument, spectro, grid,
            replicates=args.bootstrap_replicates, seed=seed,
            max_outer=int(pl.get("max_outer", 200)),
            tol=float(pl.get("tol", 1e-6)))
        for name, arr in boot.profiles().items():
            units = "K" if name.startswith("T") else \
                "K/m" if name.startswith("lapse") else ""
            fn, u = _write_field(args.out, name, arr, units, meta,
                                 binary=args.binary)
            entries[name] = {"file": fn, "units": u}
        if args.evidential_net:
            net = ev.load_net(args.evidential_net)
            sig = _predict_sigma(net, ph.T, boot.T_std, boot.lapse_std)
            fn, u = _write_field(args.out, "sigma_e", sig, "K", meta,
                                 binary=args.binary)
            entries["sigma_e"] = {"file": fn, "units": u}
    fm.write_manifest(os.path.join(args.out, "manifest.json"), entries,
                      master_seed=seed)
    print(args.out)
    return 0


def _predict_sigma(net, T, T_std, lapse_std):
    sig = np.empty_like(T)
    for i in range(T.shape[0]):
        feats = ev.ProfileFeatures(T=T[i], T_std=T_std[i],
                                   lapse_std=lapse_std[i])
        _, s = ev.predict(net, feats)
        sig[i] = s
    return sig


def cmd_search(args) -> int:
    cfg = _load_cfg(args)
    pl = cfg.get("pipeline", {})
    grid, instrument, spectro, obs, surface = _load_inputs(args.indir)
    if args.state:
        warm = fm.read_state(args.state)
    else:
        warm = initial_state(grid, instrument, surface,
                             t_factor=int(pl.get("t_factor", 8)),
                             r_factor=int(pl.get("r_factor", 4)))
    registry = {}
    if args.alphas:
        with open(args.alphas) as fh:
            registry = json.load(fh)["alphas"]
    _, search = run_stage(
        args.stage, warm, obs, instrument, spectro, grid, args.budget,
        args.seed, alpha_registry=registry,
        r_decay=float(pl.get("r_decay_m", DEFAULT_R_DECAY)),
        max_outer=int(pl.get("max_outer", 200)),
        tol=float(pl.get("tol", 1e-6)))
    doc = {"format": "ptv-search", "format_version": 1, "stage": args.stage,
           "best": search.best(), "history": search.history}
    fm.atomic_write_text(args.out,
                         json.dumps(doc, indent=1, sort_keys=True,
                                    default=float) + "\n")
    print(args.out)
    return 0


def cmd_bootstrap(args) -> int:
    cfg = _load_cfg(args)
    pl = cfg.get("pipeline", {})
    grid, instrument, spectro, obs, _ = _load_inputs(args.indir)
    warm = fm.read_state(args.state)
    with open(args.alphas) as fh:
        alphas = json.load(fh)["alphas"]
    boot = bootstrap_lite(warm, alphas, obs, instrument, spectro, grid,
                          replicates=args.replicates, seed=args.seed,
                          max_outer=int(pl.get("max_outer", 200)),
                          tol=float(pl.get("tol", 1e-6)))
    os.makedirs(args.out, exist_ok=True)
    entries = {}
    for name, arr in boot.profiles().items():
        units = "K" if name.startswith("T") else \
            "K/m" if name.startswith("lapse") else ""
        fn, u = _write_field(args.out, name, arr, units,
                             {"replicates": args.replicates,
                              "n_success": boot.n_success})
        entries[name] = {"file": fn, "units": u}
    fm.write_manifest(os.path.join(args.out, "manifest.json"), entries,
                      master_seed=args.seed,
                      extra={"n_success": boot.n_success})
    print(args.out)
    return 0


def _read_dataset(path) -> list:
    samples = []
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln:
                continue
            rec = json.loads(ln)
            feats = ev.ProfileFeatures(
                T=np.array(rec["T"], dtype=float),
                T_std=np.array(rec["T_std"], dtype=float),
                lapse_std=np.array(rec["lapse_std"], dtype=float))
            samples.append(ev.ProfileSample(features=feats,
                                            delta=np.array(rec["delta"],
                                                           dtype=float),
                                            day=int(rec["day"])))
    if not samples:
        raise fm.FormatError(f"no records in dataset {path}")
    return samples


def cmd_evidential_train(args) -> int:
    cfg = _load_cfg(args)
    evb = cfg.get("evidential", {})
    samples = _read_dataset(args.dataset)
    net = ev.train(samples,
                   lam=args.lam if args.lam is not None
                   else float(evb.get("lambda", 0.1)),
                   epochs=args.epochs if args.epochs is not None
                   else int(evb.get("epochs", 200)),
                   seed=args.seed,
                   per_range=args.per_range or bool(evb.get("per_range",
                                                            False)),
                   hidden=int(evb.get("hidden", 512)))
    ev.save_net(net, args.out)
    print(args.out)
    return 0


def cmd_evidential_predict(args) -> int:
    net = ev.load_net(args.net)
    T, _ = fm.read_cells(os.path.join(args.products, "T.txt"))
    T_std, _ = fm.read_cells(os.path.join(args.products, "T_std.txt"))
    lapse_std, _ = fm.read_cells(os.path.join(args.products,
                                              "lapse_std.txt"))
    sig = _predict_sigma(net, np.atleast_2d(T), np.atleast_2d(T_std),
                         np.atleast_2d(lapse_std))
    fm.write_cells(args.out, sig, name="sigma_e", units="K",
                   meta={"net": os.path.basename(args.net)})
    print(args.out)
    return 0


def cmd_plot(args) -> int:
    from . import plots
    grid = fm.read_grid(os.path.join(args.products, "grid.json"))
    manifest = fm.read_manifest(os.path.join(args.products, "manifest.json"))
    products = {}
    for name, entry in manifest["products"].items():
        p = os.path.join(args.products, entry["file"])
        if "<" in entry["file"] or not os.path.exists(p):
            continue
        arr, _ = fm.read_cells(p)
        products[name] = arr
    truth = {}
    if args.truth:
        tman = fm.read_manifest(os.path.join(args.truth, "manifest.json"))
        for name, entry in tman["products"].items():
            if not name.startswith("truth_"):
                continue
            arr, _ = fm.read_cells(os.path.join(args.truth, entry["file"]))
            truth[name[len("truth_"):]] = arr
    times = [int(t) for t in args.times.split(",")] if args.times else [0]
    written = plots.plot_products(args.out, products, grid, times=times,
                                  truth=truth or None)
    for w in written:
        print(w)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ptvlidar",
        description="Six-channel photon-counting lidar retrieval engine")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene and "
                       "Poisson observations")
    p.add_argument("--preset", required=True,
                   choices=["linear_lapse", "inversion", "cloudy",
                            "isothermal"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-spectro", help="train the spectroscopy "
                       "surrogates for the configured grid")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train_spectro)

    p = sub.add_parser("fit-afterpulse", help="fit the afterpulse decay "
                       "model to covered-port counts")
    p.add_argument("--counts", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--shots", type=float, required=True)
    p.add_argument("--modes", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_afterpulse)

    p = sub.add_parser("retrieve", help="run the staged retrieval to "
                       "products")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--binary", action="store_true",
                   help="write products as packed binary instead of text")
    p.add_argument("--bootstrap-replicates", type=int, default=0)
    p.add_argument("--evidential-net",
                   help="trained net file; adds a sigma_e product "
                   "(requires bootstrap replicates)")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("search", help="single-stage regularizer search")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--stage", type=int, required=True,
                   choices=list(range(1, 9)))
    p.add_argument("--budget", type=int, default=6)
    p.add_argument("--state", help="warm state file from a prior retrieve")
    p.add_argument("--alphas", help="alphas.json from a prior retrieve")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("bootstrap", help="replicate the joint solve for "
                       "spread products")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--alphas", required=True)
    p.add_argument("--replicates", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("evidential-train", help="train the uncertainty head "
                       "on profile records")
    p.add_argument("--dataset", required=True,
                   help="JSON-lines records: day, T, T_std, lapse_std, delta")
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-range", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_evidential_train)

    p = sub.add_parser("evidential-predict", help="predict sigma_e for "
                       "retrieved products")
    p.add_argument("--net", required=True)
    p.add_argument("--products", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evidential_predict)

    p = sub.add_parser("plot", help="emit curtain and profile SVG plots "
                       "for a products directory")
    p.add_argument("--products", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--times", default="0",
                   help="comma-separated time indices for profile overlays")
    p.add_argument("--truth", help="simulate output dir with truth_* files")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:   # noqa: BLE001 - the CLI boundary
        record = {"error": type(err).__name__, "message": str(err),
                  "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
