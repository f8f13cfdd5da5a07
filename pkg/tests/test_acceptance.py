"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (or as a script) to see the
summary lines.  The round-trip training behind criteria 6, 7 and 10 is run
once and shared.
"""
import functools
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from rfprim.autodiff import F, Tape
from rfprim.classical import efield_sum, enumerate_specular_paths
from rfprim.fit import (_param_table, _with_params, adapt_poses, evaluate, generate_measurements,
                        near_surface_eikonal, sample_regularizer_points, total_objective,
                        train_primitives)
from rfprim.fixtures import (PoseFixture, RoundTrip, box_room, data_tracer, floor_plane,
                             ground_truth_primitive, initial_primitive, measure_pairs, pose_config,
                             round_trip_config)
from rfprim.geometry import Box, Sphere, sphere_trace
from rfprim.materials import C0
from rfprim.scene import Pose, Radio, Scene
from rfprim.tracer import (TracerConfig, enumerate_branches, mc_replicates, power_db,
                           predict_channel, predict_many)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    """Print one summary line past pytest's output capture."""

    def emit(num, ok, detail, elapsed):
        line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.1f} s)"
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return emit


# ---------------------------------------------------------------- 1 sphere tracing


def test_c01_sphere_tracing_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    eps = 0.01
    shapes = [Sphere((0.1, -0.2, 0.05), 0.7), Box((0.0, 0.1, -0.1), (0.5, 0.8, 0.4))]
    worst, mismatched, hits = 0.0, 0, 0
    for i in range(1000):
        shape = shapes[i % 2]
        u = rng.normal(size=3)
        o = 3.0 * u / np.linalg.norm(u)
        target = rng.uniform(-1.0, 1.0, 3)
        d = (target - o) / np.linalg.norm(target - o)
        t_in, _ = shape.intersect(o, d)
        h = sphere_trace(shape, o, d, eps)
        if np.isfinite(t_in[0]) != h.hit:
            # a grazing ray may pass within eps of the surface
            if not (h.hit and abs(float(shape.distance(h.point[None])[0])) <= eps):
                mismatched += 1
            continue
        if h.hit:
            hits += 1
            worst = max(worst, abs(h.t - t_in[0]))
    elapsed = time.perf_counter() - t0
    ok = worst <= 2 * eps and mismatched == 0 and elapsed < 5.0
    report(1, ok, f"max |dt|={worst:.2e} over {hits} hits, hit/miss mismatches={mismatched}", elapsed)
    assert ok


# ---------------------------------------------------------------- 2 gradients


def test_c02_objective_gradients_match_fd(report):
    t0 = time.perf_counter()
    rt = RoundTrip()
    data = generate_measurements(rt.scene(ground_truth_primitive()), rt.tx, rt.receivers(8, 1),
                                 data_tracer())
    scene = rt.scene(initial_primitive())
    cfg = round_trip_config()
    seed = 3
    reg = sample_regularizer_points(scene, cfg.reg_samples, np.random.default_rng(0))
    tape = Tape()
    grads = tape.backward(total_objective(scene, data, cfg, tape, seed, reg))
    params = _param_table(scene)
    keys = sorted(params)

    def objective(table):
        return float(F.value(total_objective(_with_params(scene, table), data, cfg, Tape(), seed, reg)))

    rng = np.random.default_rng(2)
    h = 1e-7
    errs = []
    for _ in range(24):
        key = keys[rng.integers(len(keys))]
        idx = tuple(int(rng.integers(0, s)) for s in params[key].shape)
        plus = {k: v.copy() for k, v in params.items()}
        minus = {k: v.copy() for k, v in params.items()}
        plus[key][idx] += h
        minus[key][idx] -= h
        fd = (objective(plus) - objective(minus)) / (2 * h)
        ad = float(grads[key][idx])
        errs.append(abs(ad - fd) / max(abs(ad), abs(fd), 1e-6))
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-3 and elapsed < 120
    report(2, ok, f"max rel err={max(errs):.2e} over {len(errs)} parameters", elapsed)
    assert ok


# ---------------------------------------------------------------- 3 two-ray


def test_c03_two_ray_interference(report):
    t0 = time.perf_counter()
    f = 2.4e9
    lam, k = C0 / f, 2 * np.pi * f / C0
    h1, h2 = 1.5, 2.0
    _, mesh = floor_plane(material="metal")
    errs = []
    for d in np.linspace(1.0, 40.0, 4000):
        d1, d2 = np.hypot(d, h2 - h1), np.hypot(d, h1 + h2)
        frac = ((d2 - d1) / lam) % 1.0
        if min(frac, 1.0 - frac) <= 1 / 8:
            continue
        closed = abs(np.exp(-1j * k * d1) / d1 - np.exp(-1j * k * d2) / d2)
        e = efield_sum(enumerate_specular_paths(mesh, (0, 0, h1), (d, 0, h2), 1), f)
        errs.append(abs(power_db(e) - power_db(closed)))
        if len(errs) == 50:
            break
    elapsed = time.perf_counter() - t0
    ok = len(errs) == 50 and max(errs) <= 0.5 and elapsed < 5.0
    report(3, ok, f"max error={max(errs):.2e} dB at {len(errs)} distances", elapsed)
    assert ok


# ---------------------------------------------------------------- 4 free space


def test_c04_free_space_spreading(report):
    t0 = time.perf_counter()
    bounds = ((-9.0, -9.0, -9.0), (9.0, 9.0, 9.0))
    tx = Radio("tx", "tx", (0.0, 0.0, 0.0))
    scene = Scene((), (tx,), bounds)
    cfg = TracerConfig(n_rays=2048, guide_rays=256, seed=0)
    rng = np.random.default_rng(4)
    drops = []
    for i in range(10):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        d = rng.uniform(0.5, 4.0)
        near = predict_channel(scene, tx, Radio("a", "rx", tuple(u * d)), replace(cfg, seed=i)).power_db()[0]
        far = predict_channel(scene, tx, Radio("b", "rx", tuple(u * 2 * d)), replace(cfg, seed=i)).power_db()[0]
        drops.append(near - far)
    drops = np.array(drops)
    elapsed = time.perf_counter() - t0
    ok = np.all(np.abs(drops - 6.02) <= 0.1) and elapsed < 30
    report(4, ok, f"drops {drops.min():.3f}..{drops.max():.3f} dB over 10 pairs", elapsed)
    assert ok


# ---------------------------------------------------------------- 5 cross-engine


def _los_dominant_probes(mesh, tx, n, rng, half):
    """Probes whose Rician K-factor (direct power over total echo power) is at least 6 dB."""
    probes = []
    while len(probes) < n:
        rx = rng.uniform(-np.asarray(half) + 0.4, np.asarray(half) - 0.4)
        if np.linalg.norm(rx - tx) < 1.0:
            continue
        paths = enumerate_specular_paths(mesh, tx, rx, 2)
        power = np.array([abs(efield_sum([p], 2.4e9)) ** 2 for p in paths])
        direct = power[[p.n_bounces == 0 for p in paths]].sum()
        if direct >= 4.0 * (power.sum() - direct):
            probes.append(rx)
    return np.array(probes)


def test_c05_cross_engine_box_room(report):
    t0 = time.perf_counter()
    half = (2.5, 2.0, 1.5)
    walls, bounds, mesh = box_room(half)
    tx = np.array([-1.0, 0.3, 0.2])
    scene = Scene(tuple(walls), (Radio("tx", "tx", tuple(tx)),), bounds)
    probes = _los_dominant_probes(mesh, tx, 20, np.random.default_rng(5), half)
    cfg = TracerConfig(n_rays=300_000, guide_rays=256, capture_radius=0.3, max_depth=2,
                       branching="split", seed=0)
    re, im, _ = predict_many(scene, scene.radio("tx"), probes, cfg)
    ours = power_db(np.asarray(re) + 1j * np.asarray(im))
    ref = np.array([power_db(efield_sum(enumerate_specular_paths(mesh, tx, r, 2), 2.4e9)) for r in probes])
    err = np.abs(ours - ref)
    elapsed = time.perf_counter() - t0
    ok = err.max() <= 1.0 and elapsed < 120
    report(5, ok, f"max |delta|={err.max():.3f} dB, median {np.median(err):.3f} dB at 20 probes", elapsed)
    assert ok


# ---------------------------------------------------------------- 6, 7, 10 round trip


@functools.lru_cache(maxsize=None)
def _round_trip_data():
    rt = RoundTrip()
    truth = rt.scene(ground_truth_primitive())
    train = generate_measurements(truth, rt.tx, rt.receivers(200, 1), data_tracer())
    held = generate_measurements(truth, rt.tx, rt.receivers(100, 2), data_tracer())
    return rt, train, held


@functools.lru_cache(maxsize=None)
def _fit(n_train, lambda_eik):
    t0 = time.perf_counter()
    rt, train, held = _round_trip_data()
    cfg = round_trip_config(lambda_eik=lambda_eik)
    fitted, rep = train_primitives(rt.scene(initial_primitive()), train.subset(range(n_train)), cfg)
    median = evaluate(fitted, held, cfg.tracer_for(0))["median"]
    eik = near_surface_eikonal(fitted.primitives[0].payload, np.random.default_rng(0))
    return fitted, median, eik, time.perf_counter() - t0


def test_c06_round_trip_fit(report):
    t0 = time.perf_counter()
    rt, _, held = _round_trip_data()
    _, median, _, _ = _fit(200, 3.0)
    mesh = rt.baseline_mesh()
    base = np.array([power_db(efield_sum(enumerate_specular_paths(mesh, rt.tx, r, 2), rt.freq))
                     for r in held.rx])
    base_median = float(np.median(np.abs(base - held.power)))
    elapsed = time.perf_counter() - t0
    ok = median <= 3.5 and base_median - median >= 8.0 and elapsed <= 1800
    report(6, ok, f"held-out median {median:.2f} dB, enlarged-box baseline {base_median:.2f} dB", elapsed)
    assert ok


def test_c07_sample_efficiency_trend(report):
    t0 = time.perf_counter()
    sizes = (25, 50, 100, 200)
    med = [_fit(n, 3.0)[1] for n in sizes]
    elapsed = time.perf_counter() - t0
    ok = all(b <= a + 0.5 for a, b in zip(med, med[1:]))
    report(7, ok, "medians " + ", ".join(f"{n}:{m:.2f}" for n, m in zip(sizes, med)) + " dB", elapsed)
    assert ok


def test_c10_eikonal_regularization(report):
    t0 = time.perf_counter()
    on = _fit(200, 3.0)[2]
    off = _fit(200, 0.0)[2]
    elapsed = time.perf_counter() - t0
    ok = on < 0.1 and off >= 2 * on
    report(10, ok, f"near-surface |grad|-1: {on:.3f} with, {off:.3f} without", elapsed)
    assert ok


# ---------------------------------------------------------------- 8 pose adaptation


def test_c08_pose_adaptation(report):
    t0 = time.perf_counter()
    fx = PoseFixture()
    gt = ground_truth_primitive()
    truth = fx.scene(gt, fx.true_pose())
    meas = measure_pairs(truth, fx.adaptation_pairs(), data_tracer())
    held = measure_pairs(truth, fx.held_out_pairs(100, 5), data_tracer())
    start = fx.scene(gt, Pose(), dynamic=True)
    cfg, search = pose_config()
    adapted, _ = adapt_poses(start, meas, cfg, search=search)
    moved = adapted.primitives[0]
    err = float(np.linalg.norm(moved.pose.t - np.asarray(fx.displacement)))
    median = evaluate(adapted, held, cfg.tracer_for(0))["median"]
    untouched = moved.payload.digest() == gt.digest()
    elapsed = time.perf_counter() - t0
    ok = len(meas) == 5 and err < 0.1 and median <= 3.5 and untouched and elapsed < 600
    report(8, ok, f"translation error {err:.3f} m, held-out median {median:.2f} dB", elapsed)
    assert ok


# ---------------------------------------------------------------- 9 MC unbiasedness


def test_c09_mc_matches_enumeration(report):
    t0 = time.perf_counter()
    rt = RoundTrip()
    scene = rt.scene(ground_truth_primitive())
    tx = scene.radio("tx")
    rx = np.array([1.4, 0.1, 0.05])
    cfg = TracerConfig(n_rays=0, guide_rays=16, max_depth=2, branching="mc")
    exact = enumerate_branches(scene, tx, rx, cfg)[0]
    reps = np.concatenate([mc_replicates(scene, tx, rx, cfg, np.arange(c, c + 1000))
                           for c in range(0, 10_000, 1000)])
    se_re = np.std(reps.real, ddof=1) / np.sqrt(len(reps))
    se_im = np.std(reps.imag, ddof=1) / np.sqrt(len(reps))
    z = (abs(reps.mean().real - exact.real) / se_re, abs(reps.mean().imag - exact.imag) / se_im)
    elapsed = time.perf_counter() - t0
    ok = max(z) <= 3.0 and elapsed < 120
    report(9, ok, f"|mean - exact| = {z[0]:.2f} SE (re), {z[1]:.2f} SE (im) over 10^4 seeds", elapsed)
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
