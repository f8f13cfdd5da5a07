import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from rfprim.autodiff import F, Tape
from rfprim.classical import efield_sum, enumerate_specular_paths
from rfprim.fixtures import floor_plane, make_primitive, shadow_wall
from rfprim.materials import C0, get_material, reflection_coefficient, transmission_factor
from rfprim.scene import PlacedPrimitive, Pose, Radio, Scene, antenna_weight, lobe_pattern
from rfprim.tracer import (REFLECT, PathRecord, TracerConfig, coverage_map, enumerate_branches,
                           launch_rays, mc_replicates, path_signal, power_db, predict_channel,
                           predict_many, ray_uniform, reflect_dir, trace)

BOUNDS = ((-6.0, -6.0, -1.0), (6.0, 6.0, 4.0))
unit = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1).map(
    lambda v: np.array(v) / np.linalg.norm(v))


def free_scene(bounds=BOUNDS):
    return Scene((), (Radio("tx", "tx", (0.0, 0.0, 1.0)),), bounds)


# ---------------------------------------------------------------- reflection


def test_normal_incidence_retroreflects():
    assert_allclose(reflect_dir(np.array([[1.0, 0, 0]]), np.array([[-1.0, 0, 0]])), [[-1, 0, 0]])


def test_floor_mirror():
    w = np.array([[1.0, -1.0, 0.0]]) / np.sqrt(2)
    assert_allclose(reflect_dir(w, np.array([[0.0, 1.0, 0.0]])), [[1 / np.sqrt(2), 1 / np.sqrt(2), 0]])


@given(unit, unit)
def test_law_of_reflection(w, n):
    r = np.asarray(reflect_dir(w[None], n[None]))[0]
    assert np.linalg.norm(r) == pytest.approx(1.0)
    assert np.arccos(np.clip(-w @ n, -1, 1)) == pytest.approx(np.arccos(np.clip(r @ n, -1, 1)), abs=1e-6)


# ---------------------------------------------------------------- launch


def test_isotropic_mean_direction():
    n = 10 ** 6
    ls = launch_rays(Radio("t", "tx", (0.0, 0.0, 0.0)), n, seed=5)
    # CLT bound for i.i.d. uniform directions: each coordinate has variance 1/3
    assert np.all(np.abs(ls.dirs.mean(axis=0)) < 3 * np.sqrt(1 / 3 / n))
    assert_allclose(ls.n_pdf, n / (4 * np.pi))


def test_lobe_weights_follow_pattern():
    pat = lobe_pattern((0, 0, 1), peak=8.0)
    ls = launch_rays(Radio("t", "tx", (0.0, 0.0, 0.0), pat), 500, seed=1)
    assert_allclose(ls.gain, antenna_weight(pat, ls.dirs))


def test_launch_is_deterministic():
    tx = Radio("t", "tx", (0.0, 0.0, 0.0))
    a = launch_rays(tx, 300, seed=9, targets=[[1.0, 2.0, 0.0]], guide_rays=20)
    b = launch_rays(tx, 300, seed=9, targets=[[1.0, 2.0, 0.0]], guide_rays=20)
    assert np.array_equal(a.dirs, b.dirs) and np.array_equal(a.n_pdf, b.n_pdf)


def test_guide_cone_density():
    tx = Radio("t", "tx", (0.0, 0.0, 0.0))
    ls = launch_rays(tx, 0, seed=0, targets=[[2.0, 0.0, 0.0]], guide_rays=400, capture_radius=0.1)
    cos_c = np.sqrt(1 - 0.05 ** 2)
    assert np.all(ls.dirs @ np.array([1.0, 0, 0]) >= cos_c - 1e-9)
    assert_allclose(ls.n_pdf, 400 / (2 * np.pi * (1 - cos_c)))


@settings(max_examples=20)
@given(st.integers(0, 2 ** 32), st.integers(0, 2 ** 20), st.integers(0, 64))
def test_ray_uniform_range_and_determinism(seed, ray, counter):
    u = ray_uniform(seed, ray, counter)
    assert 0.0 <= u < 1.0 and u == ray_uniform(seed, ray, counter)


def test_ray_uniform_is_uniform():
    u = ray_uniform(3, np.arange(200_000), 1)
    hist, _ = np.histogram(u, bins=10, range=(0, 1))
    assert np.all(np.abs(hist - 20_000) < 5 * np.sqrt(20_000))


# ---------------------------------------------------------------- branching


def _floor_scene(material="concrete"):
    placed, _ = floor_plane(0.0, material=material)
    return Scene((placed,), (Radio("tx", "tx", (0.0, 0.0, 1.0)),), BOUNDS)


def test_mc_reflect_probability_matches_magnitudes():
    sc = _floor_scene()
    cfg = TracerConfig(n_rays=40_000, max_depth=1, branching="mc", seed=2)
    log = trace(sc, (0.0, 0.0, 1.0), [[3.0, 0.0, 1.0]], cfg, 2.4e9)
    hit = log.hist_prim[:, 0] == 0
    d = log.launch.dirs[log.root[hit]]
    r = reflection_coefficient(get_material("concrete"), 2.4e9, np.abs(d[:, 2]))
    mr, mt = np.abs(r), transmission_factor(r)
    p = mr / (mr + mt)
    n_ref = int(np.sum(log.hist_branch[hit, 0] == REFLECT))
    assert abs(n_ref - p.sum()) < 4 * np.sqrt(np.sum(p * (1 - p)))


def test_mirror_never_transmits():
    sc = _floor_scene("metal")
    cfg = TracerConfig(n_rays=5000, max_depth=1, branching="mc", seed=2)
    log = trace(sc, (0.0, 0.0, 1.0), [[3.0, 0.0, 1.0]], cfg, 2.4e9)
    hit = log.hist_prim[:, 0] == 0
    assert hit.sum() > 1000 and np.all(log.hist_branch[hit, 0] == REFLECT)


def test_mc_mean_matches_enumeration_small():
    wall = shadow_wall(half=(0.1, 0.6, 0.6), material="concrete")
    sc = Scene((wall,), (Radio("tx", "tx", (-2.0, 0.0, 0.0)),), ((-4, -4, -4), (4, 4, 4)))
    cfg = TracerConfig(n_rays=0, guide_rays=64, max_depth=2, branching="mc", rr_threshold=0.0)
    rx = np.array([2.0, 0.1, 0.0])
    exact = enumerate_branches(sc, sc.radio("tx"), rx, cfg)[0]
    reps = mc_replicates(sc, sc.radio("tx"), rx, cfg, np.arange(2000))
    se = np.std(reps) / np.sqrt(len(reps))
    assert abs(reps.mean() - exact) < 3 * max(se, 1e-12)


# ---------------------------------------------------------------- synthesis


def _record(tau, a=1.0 + 0j):
    return PathRecord(0, [], [tau], tau, a, 1.0, 0j)


def test_full_wavelength_phase():
    s = path_signal(_record(C0 / 1e9), 1e9)
    assert np.angle(s) == pytest.approx(0.0, abs=1e-9)


def test_amplitude_linear_in_a():
    assert abs(path_signal(_record(2.0, 0.5), 2.4e9)) == pytest.approx(0.5 * abs(path_signal(_record(2.0), 2.4e9)))


def test_two_ray_from_records():
    f, h1, h2, d = 1e9, 1.0, 1.5, 6.0
    d1, d2 = np.hypot(d, h2 - h1), np.hypot(d, h1 + h2)
    s = path_signal(_record(d1), f) + path_signal(_record(d2, -1.0), f)
    _, mesh = floor_plane(material="metal")
    ref = efield_sum(enumerate_specular_paths(mesh, (0, 0, h1), (d, 0, h2), 1), f)
    assert abs(s - ref) < 1e-12


def test_zero_length_path_rejected():
    with pytest.raises(ValueError):
        path_signal(_record(0.0), 1e9)


def test_power_floor():
    assert power_db(0.0) == -120.0
    assert power_db(0.1) == pytest.approx(-20.0)


# ---------------------------------------------------------------- prediction


def test_free_space_spreading():
    sc = free_scene()
    cfg = TracerConfig(n_rays=2048, guide_rays=64, seed=0)
    tx = sc.radio("tx")
    p1 = predict_channel(sc, tx, Radio("r", "rx", (1.0, 0.0, 1.0)), cfg).power_db()[0]
    p2 = predict_channel(sc, tx, Radio("r", "rx", (2.0, 0.0, 1.0)), cfg).power_db()[0]
    assert p1 - p2 == pytest.approx(6.02, abs=0.1)


def test_absorber_blocks_all_paths():
    absorber = make_primitive("abs", 0, radius=1.2, init_radius=1.0, alpha0=1e-12, head_scale=0.0,
                              hidden_layers=3, width=16, feature_dim=4, num_freqs=2)
    placed = PlacedPrimitive("abs", absorber, Pose(translation=(3.0, 0.0, 1.0)))
    sc = Scene((placed,), (Radio("tx", "tx", (0.0, 0.0, 1.0)),), BOUNDS)
    pred = predict_channel(sc, sc.radio("tx"), Radio("r", "rx", (3.0, 0.0, 1.0)),
                           TracerConfig(n_rays=1024, guide_rays=64))
    assert pred.path_count == 0 and pred.flagged
    assert pred.power_db()[0] == -120.0


def test_prediction_bit_identical():
    sc = _floor_scene()
    cfg = TracerConfig(n_rays=1024, guide_rays=16, seed=4)
    rx = Radio("r", "rx", (2.5, 0.5, 1.2))
    a = predict_channel(sc, sc.radio("tx"), rx, cfg)
    b = predict_channel(sc, sc.radio("tx"), rx, cfg)
    assert np.array_equal(a.amplitudes, b.amplitudes)


def test_floor_bounce_agrees_with_image_method():
    sc = _floor_scene("metal")
    _, mesh = floor_plane(0.0, material="metal")
    cfg = TracerConfig(n_rays=300_000, guide_rays=128, capture_radius=0.3, max_depth=2,
                       branching="split", seed=1)
    rx = np.array([[3.0, 0.0, 1.0], [2.0, 1.0, 1.5], [4.0, -1.0, 1.6]])
    re, im, _ = predict_many(sc, sc.radio("tx"), rx, cfg)
    ours = power_db(np.asarray(re) + 1j * np.asarray(im))
    ref = [power_db(efield_sum(enumerate_specular_paths(mesh, (0, 0, 1.0), r, 2), 2.4e9)) for r in rx]
    assert_allclose(ours, ref, atol=1.0)


def test_taped_matches_untaped():
    prim = make_primitive("obj", 3, radius=0.6, init_radius=0.4, hidden_layers=3, width=16,
                          feature_dim=4, num_freqs=2)
    sc = Scene((PlacedPrimitive("obj", prim),), (Radio("tx", "tx", (-1.5, 0.0, 0.0)),),
               ((-3, -3, -3), (3, 3, 3)))
    cfg = TracerConfig(n_rays=0, guide_rays=32, branching="split")
    rx = np.array([[1.5, 0.1, 0.0], [1.2, -0.3, 0.2]])
    a = predict_many(sc, sc.radio("tx"), rx, cfg)
    t = Tape()
    b = predict_many(sc, sc.radio("tx"), rx, cfg, tape=t)
    assert_allclose(np.asarray(a[0]), F.value(b[0]), rtol=1e-10, atol=1e-15)
    assert_allclose(np.asarray(a[1]), F.value(b[1]), rtol=1e-10, atol=1e-15)
    g = t.backward(F.sum(F.add(F.mul(b[0], b[0]), F.mul(b[1], b[1]))))
    assert any(k[0] == ("obj", "mat") for k in g.keys())
    assert any(k[0] == ("obj", "sdf") for k in g.keys())


def test_outside_bounds_rejected():
    sc = free_scene()
    with pytest.raises(ValueError):
        predict_channel(sc, sc.radio("tx"), Radio("r", "rx", (9.0, 0.0, 0.0)), TracerConfig())


# ---------------------------------------------------------------- coverage


def test_free_space_map_radial_symmetry():
    sc = free_scene()
    ang = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    pts = np.stack([2 * np.cos(ang), 2 * np.sin(ang), np.ones(12)], 1)
    m = coverage_map(sc, sc.radio("tx"), pts, TracerConfig(n_rays=4096, guide_rays=64))
    assert np.ptp(m) < 0.2


def test_metal_wall_shadow():
    wall = shadow_wall(center=(1.0, 0.0, 1.0), half=(0.05, 1.0, 1.0), material="metal")
    sc = Scene((wall,), (Radio("tx", "tx", (0.0, 0.0, 1.0)),), BOUNDS)
    behind = np.array([[2.5, 0.0, 1.0], [2.0, 0.2, 1.1]])
    mirrored = np.array([[-2.5, 0.0, 1.0], [-2.0, -0.2, 1.1]])
    cfg = TracerConfig(n_rays=4096, guide_rays=64, branching="split", max_depth=2)
    m = coverage_map(sc, sc.radio("tx"), np.concatenate([behind, mirrored]), cfg)
    assert np.all(m[:2] <= m[2:] - 10.0)


def test_variance_shrinks_with_rays():
    wall = shadow_wall(center=(1.0, 0.0, 1.0), half=(0.2, 0.5, 0.5), material="concrete")
    sc = Scene((wall,), (Radio("tx", "tx", (0.0, 0.0, 1.0)),), BOUNDS)
    rx = np.array([2.5, 0.1, 1.0])

    def spread(n):
        cfg = TracerConfig(n_rays=0, guide_rays=n, branching="mc", max_depth=2)
        reps = mc_replicates(sc, sc.radio("tx"), rx, cfg, np.arange(300))
        return np.var(reps)

    ratio = spread(16) / spread(160)
    assert 5.0 < ratio < 20.0
