"""``rfscape`` command line: simulate, train, adapt, evaluate, heatmap, oracle, gen-synthetic.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  ``RFSCAPE_LOG``
selects the log level (error, info, debug).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import ContainerError
from .classical import efield_sum, enumerate_specular_paths
from .fit import (ChannelMeasurement, MeasurementSet, PoseSearch, TrainConfig, TrainingDiverged, adapt_poses,
                  evaluate, generate_measurements, predict_set, train_primitives)
from .io import (FormatError, HeatmapGrid, lattice, load_scene, read_dataset, read_mesh,
                 save_scene, write_dataset, write_heatmap_csv, write_pgm)
from .tracer import TracerConfig, power_db, predict_many

log = logging.getLogger("rfscape")


class UsageError(Exception):
    """Bad arguments or references; exit code 2."""


# --------------------------------------------------------------------------
# helpers


def _setup_logging():
    level = os.environ.get("RFSCAPE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _tracer(args) -> TracerConfig:
    return TracerConfig(n_rays=args.rays, guide_rays=args.guide_rays, max_depth=args.max_depth,
                        capture_radius=args.capture_radius, seed=args.seed, launch_seed=args.seed,
                        branching=args.branching)


def _radio(scene, rid: str):
    try:
        return scene.radio(rid)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None


def _first_tx(scene, rid):
    if rid is not None:
        return _radio(scene, rid)
    for r in scene.radios:
        if r.role == "tx":
            return r
    raise UsageError("scene has no transmitter; pass --tx")


def _chunks(n: int, k: int):
    k = max(1, min(k, n))
    return [c for c in np.array_split(np.arange(n), k) if c.size]


def _predict_worker(payload):
    scene_path, tx, rx, freq, cfg = payload
    scene = load_scene(scene_path)
    recs = tuple(ChannelMeasurement(tx, tuple(r), freq, "power_db", 0.0) for r in rx)
    re, im = predict_set(scene, MeasurementSet(recs), cfg, chunk=1)
    return np.asarray(re) + 1j * np.asarray(im)


def _predict_points(scene, scene_path, tx, points, cfg, workers: int):
    """Per-receiver predictions, optionally spread over worker processes."""
    freq = scene.frequencies[0]
    points = np.asarray(points, float).reshape(-1, 3)
    tx = tuple(tx.position)
    if workers <= 1 or len(points) < 2:
        return _predict_in_process(scene, tx, points, freq, cfg)
    jobs = [(scene_path, tx, points[c], freq, cfg) for c in _chunks(len(points), workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return np.concatenate(list(pool.map(_predict_worker, jobs)))


def _predict_in_process(scene, tx, points, freq, cfg):
    recs = tuple(ChannelMeasurement(tx, tuple(r), freq, "power_db", 0.0) for r in points)
    re, im = predict_set(scene, MeasurementSet(recs), cfg, chunk=1)
    return np.asarray(re) + 1j * np.asarray(im)


def _path_table(paths) -> list[str]:
    lines = ["  #  rx  depth  length_m      |a|        weight     events"]
    for i, p in enumerate(paths):
        ev = " ".join(f"{e['primitive']}:{e['branch'][0]}" for e in p.events) or "direct"
        lines.append(f"{i:3d} {p.rx:3d} {p.depth:5d} {p.tau:10.5f} {abs(p.a):10.5f} "
                     f"{p.weight:10.4g}  {ev}")
    return lines


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch=args.batch, iters=args.iters, lr_start=args.lr,
                       lr_end=args.lr * args.lr_decay, lambda_eik=args.lambda_eik,
                       lambda_lap=args.lambda_lap, seed=args.seed, rays=args.rays,
                       geometry_lr_scale=args.geometry_lr_scale,
                       geometry_warmup=args.geometry_warmup, tracer=_tracer(args))


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    scene = load_scene(args.scene)
    tx = _first_tx(scene, args.tx)
    rx = _radio(scene, args.rx)
    cfg = _tracer(args)
    rec = ChannelMeasurement(tx.position, rx.position, scene.frequencies[0], "power_db", 0.0)
    if args.paths:
        re, im, counts, paths = predict_many(scene, tx, rx.pos, cfg, rec.freq,
                                             rx_patterns=[rx.pattern], return_paths=True)
        amp = complex(re[0], im[0])
        count = int(counts[0])
    else:
        re, im = predict_set(scene, MeasurementSet((rec,)), cfg, chunk=1)
        amp = complex(re[0], im[0])
        count = None
    print(f"power_db {float(power_db(amp)):.12g}")
    print(f"amplitude {amp.real:.12g} {amp.imag:+.12g}j")
    if args.paths:
        print(f"paths {count}")
        print("\n".join(_path_table(paths)))
    return 0


def cmd_gen_synthetic(args) -> int:
    if args.n <= 0:
        raise UsageError("--n must be positive")
    scene = load_scene(args.scene)
    tx = _first_tx(scene, args.tx)
    rng = np.random.default_rng(args.seed)
    lo, hi = (np.asarray(b, float) for b in scene.bounds)
    if args.region:
        lo, hi = np.asarray(args.region[:3]), np.asarray(args.region[3:])
    rx = rng.uniform(lo, hi, size=(args.n, 3))
    cfg = _tracer(args)
    if args.workers > 1:
        amp = _predict_points(scene, args.scene, tx, rx, cfg, args.workers)
        if args.noise_db > 0:
            amp = amp * 10.0 ** (rng.normal(scale=args.noise_db, size=amp.shape) / 20.0)
        recs = tuple(ChannelMeasurement(tx.position, tuple(r), scene.frequencies[0], args.kind,
                                        float(power_db(a)) if args.kind == "power_db" else [a])
                     for r, a in zip(rx, amp))
        data = MeasurementSet(recs)
    else:
        data = generate_measurements(scene, tx.position, rx, cfg, kind=args.kind,
                                     noise_db=args.noise_db, rng=rng)
    write_dataset(data, args.out)
    print(f"wrote {len(data)} records to {args.out}")
    return 0


def _copy_unchanged(src: Path, out: Path):
    shutil.copyfile(src, out)
    doc = json.loads(src.read_text())
    lib = doc.get("library")
    if lib and (src.parent / lib).resolve() != (out.parent / lib).resolve():
        shutil.copyfile(src.parent / lib, out.parent / lib)


def _library_name(scene_path) -> str | None:
    return json.loads(Path(scene_path).read_text()).get("library")


def cmd_train(args) -> int:
    scene = load_scene(args.scene)
    data = read_dataset(args.dataset)
    cfg = _train_config(args)
    out = Path(args.out)
    if cfg.iters == 0:
        _copy_unchanged(Path(args.scene), out)
        print("iterations 0 (scene unchanged)")
        return 0
    try:
        fitted, report = train_primitives(scene, data, cfg)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    save_scene(fitted, out, _library_name(args.scene))
    rep = {"loss": report.loss, "data_loss": report.data_loss, "eikonal": report.eikonal,
           "laplacian": report.laplacian, "wall_clock": report.wall_clock,
           "residuals_db": np.asarray(report.residuals).tolist(), "iterations": report.iterations}
    out.with_suffix(".report.json").write_text(json.dumps(rep, indent=2) + "\n")
    print(report.summary())
    return 0


def cmd_adapt(args) -> int:
    scene = load_scene(args.scene)
    data = read_dataset(args.dataset)
    cfg = _train_config(args)
    search = None
    if args.search_levels > 0:
        search = PoseSearch(args.search_radius, args.search_step, args.search_levels,
                            args.search_guide_rays, args.seed)
    try:
        adapted, report = adapt_poses(scene, data, cfg, search=search)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    save_scene(adapted, args.out, _library_name(args.scene))
    for p in adapted.primitives:
        if p.dynamic:
            t = p.pose.t
            print(f"{p.id} translation {t[0]:.6f} {t[1]:.6f} {t[2]:.6f} "
                  f"quat {' '.join(f'{q:.6f}' for q in p.pose.quat)}")
            if args.true_translation:
                err = float(np.linalg.norm(t - np.asarray(args.true_translation)))
                print(f"{p.id} translation_error {err:.6f}")
    print(f"final_loss {report.loss[-1]:.6g}" if report.loss else "final_loss nan")
    return 0


def cmd_evaluate(args) -> int:
    scene = load_scene(args.scene)
    data = read_dataset(args.dataset)
    m = evaluate(scene, data, _tracer(args))
    print("metric      value")
    print(f"n           {m['n']}")
    for k in ("median", "p10", "p90", "mean"):
        print(f"{k:<11} {m[k]:.2f} dB")
    if "snr_db" in m:
        print(f"snr         {m['snr_db']:.2f} dB")
    return 0


def cmd_heatmap(args) -> int:
    scene = load_scene(args.scene)
    tx = _first_tx(scene, args.tx)
    nx, ny = args.grid
    origin = args.origin if args.origin else (scene.bounds[0][0], scene.bounds[0][1], tx.position[2])
    pts = lattice(origin, args.cell, nx, ny)
    flat = pts.reshape(-1, 3)
    if not all(scene.contains(p) for p in flat):
        raise UsageError("grid extends outside scene bounds")
    amp = _predict_points(scene, args.scene, tx, flat, _tracer(args), args.workers)
    grid = HeatmapGrid(tuple(origin), args.cell, power_db(amp).reshape(ny, nx))
    write_heatmap_csv(grid, args.out)
    if args.pgm:
        write_pgm(grid, args.pgm, args.floor_db)
    print(f"wrote {nx}x{ny} heatmap to {args.out}")
    return 0


def cmd_oracle(args) -> int:
    mesh = read_mesh(args.mesh)
    tx, rx = np.asarray(args.tx, float), np.asarray(args.rx, float)
    paths = enumerate_specular_paths(mesh, tx, rx, args.max_bounces)
    e = efield_sum(paths, args.freq)
    p_cl = float(power_db(e))
    print(f"classical_power_db {p_cl:.6f}")
    print(f"paths {len(paths)}")
    for i, p in enumerate(paths):
        mats = ",".join(p.materials) or "direct"
        print(f"{i:3d} bounces={p.n_bounces} length={p.length:.6f} materials={mats}")
    if args.compare:
        scene = load_scene(args.compare)
        txr = _first_tx(scene, None).at(tx)
        re, im, _ = predict_many(scene, txr, rx, _tracer(args), args.freq)
        p_n = float(power_db(complex(re[0], im[0])))
        print(f"neural_power_db {p_n:.6f}")
        print(f"delta_db {p_n - p_cl:+.6f}")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_tracer_flags(p):
    p.add_argument("--seed", type=int, default=0, help="rng seed (default 0)")
    p.add_argument("--rays", type=int, default=2048, help="uniform rays per trace")
    p.add_argument("--guide-rays", type=int, default=64, help="extra rays aimed at each receiver")
    p.add_argument("--max-depth", type=int, default=2, help="interactions per path")
    p.add_argument("--capture-radius", type=float, default=0.1, help="receiver capture radius (m)")
    p.add_argument("--branching", choices=("mc", "split"), default="split",
                   help="pick one branch per hit (mc) or follow both (split)")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="worker processes (default: available cores)")


def _add_train_flags(p):
    p.add_argument("--dataset", required=True, help="measurement CSV")
    p.add_argument("--out", required=True, help="output scene JSON")
    p.add_argument("--iters", type=int, default=10000)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=3e-4, help="initial learning rate")
    p.add_argument("--lr-decay", type=float, default=0.1, help="final / initial learning rate")
    p.add_argument("--lambda-eik", type=float, default=0.1)
    p.add_argument("--lambda-lap", type=float, default=0.01)
    p.add_argument("--geometry-lr-scale", type=float, default=1.0)
    p.add_argument("--geometry-warmup", type=int, default=0,
                   help="steps before geometry weights start to move")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rfscape", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="predict the channel between two radios")
    p.add_argument("--scene", required=True)
    p.add_argument("--tx", default=None, help="transmitter id (default: first tx)")
    p.add_argument("--rx", required=True, help="receiver id")
    p.add_argument("--paths", action="store_true", help="print the per-path table")
    _add_tracer_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-synthetic", help="write engine predictions as a dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--tx", default=None)
    p.add_argument("--n", type=int, required=True, help="number of records")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("power_db", "complex"), default="power_db")
    p.add_argument("--noise-db", type=float, default=0.0, help="log-normal noise sigma (dB)")
    p.add_argument("--region", type=float, nargs=6, metavar="V",
                   help="receiver box lo_x lo_y lo_z hi_x hi_y hi_z (default: scene bounds)")
    _add_tracer_flags(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="fit trainable primitives to a dataset")
    p.add_argument("--scene", required=True)
    _add_train_flags(p)
    _add_tracer_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="fit poses of dynamic primitives, networks frozen")
    p.add_argument("--scene", required=True)
    _add_train_flags(p)
    p.add_argument("--true-translation", type=float, nargs=3, metavar="X",
                   help="report the error against this translation")
    p.add_argument("--search-levels", type=int, default=3,
                   help="coarse-to-fine translation grid levels before refinement (0: off)")
    p.add_argument("--search-radius", type=float, default=0.9, help="first grid half-width (m)")
    p.add_argument("--search-step", type=float, default=0.3, help="first grid spacing (m)")
    p.add_argument("--search-guide-rays", type=int, default=64)
    _add_tracer_flags(p)
    p.set_defaults(func=cmd_adapt, iters=30, lr=0.02, batch=5)

    p = sub.add_parser("evaluate", help="error metrics of a scene on a dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--dataset", required=True)
    _add_tracer_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", help="coverage map on a horizontal grid")
    p.add_argument("--scene", required=True)
    p.add_argument("--tx", default=None)
    p.add_argument("--grid", type=int, nargs=2, required=True, metavar=("NX", "NY"))
    p.add_argument("--cell", type=float, required=True, help="cell size (m)")
    p.add_argument("--origin", type=float, nargs=3, metavar="X",
                   help="first cell center (default: bounds corner at tx height)")
    p.add_argument("--out", required=True, help="CSV output")
    p.add_argument("--pgm", default=None, help="optional graymap output")
    p.add_argument("--floor-db", type=float, default=-100.0, help="black level of the graymap")
    _add_tracer_flags(p)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("oracle", help="classical image-method prediction from a mesh")
    p.add_argument("--mesh", required=True, help="OBJ triangle list with usemtl tags")
    p.add_argument("--tx", type=float, nargs=3, required=True, metavar="X")
    p.add_argument("--rx", type=float, nargs=3, required=True, metavar="X")
    p.add_argument("--freq", type=float, default=2.4e9)
    p.add_argument("--max-bounces", type=int, default=2)
    p.add_argument("--compare", default=None, help="scene JSON to compare against")
    _add_tracer_flags(p)
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ContainerError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, RuntimeError) as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
