import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from rfprim.autodiff import ContainerError
from rfprim.fixtures import make_primitive
from rfprim.geometry import Sphere
from rfprim.materials import get_material
from rfprim.scene import (ISOTROPIC, AddEdit, AnalyticBody, AntennaPattern, MoveEdit, PlacedPrimitive,
                          Pose, Radio, RemoveEdit, Scene, antenna_weight, apply_edit, decode_library,
                          encode_library, load_library, lobe_pattern, object_to_world,
                          quat_from_axis_angle, quat_from_rotvec, quat_to_matrix, save_library,
                          world_to_object)
from rfprim.tracer import TracerConfig, predict_many

quats = st.tuples(*[st.floats(-1, 1)] * 4).filter(lambda q: np.linalg.norm(q) > 0.1).map(
    lambda q: tuple(np.array(q) / np.linalg.norm(q)))
vec = st.tuples(*[st.floats(-3, 3)] * 3)


# ---------------------------------------------------------------- poses


def test_identity_pose_unchanged():
    o, d = world_to_object(Pose(), [1.0, 2.0, 3.0], [0.0, 0.6, 0.8])
    assert_allclose(o, [1, 2, 3])
    assert_allclose(d, [0, 0.6, 0.8])


def test_pure_translation():
    o, _ = world_to_object(Pose(translation=(1.0, 0.0, 0.0)), [2.0, 0, 0], [1.0, 0, 0])
    assert_allclose(o, [1, 0, 0])


def test_quarter_turn_about_z():
    pose = Pose(tuple(quat_from_axis_angle((0, 0, 1), np.pi / 2)))
    _, d = world_to_object(pose, [0.0, 0, 0], [1.0, 0, 0])
    assert_allclose(d, [0, -1, 0], atol=1e-12)


@given(quats, vec, vec, vec)
def test_round_trip_transform(q, t, o, d):
    pose = Pose(q, t)
    oo, dd = world_to_object(pose, o, d)
    o2, d2 = object_to_world(pose, oo, dd)
    assert_allclose(o2, o, atol=1e-12)
    assert_allclose(d2, d, atol=1e-12)


@given(quats)
def test_rotation_is_orthonormal(q):
    r = quat_to_matrix(q)
    assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


@given(quats, vec, quats, vec, vec)
def test_compose_matches_sequential(qa, ta, qb, tb, x):
    a, b = Pose(qa, ta), Pose(qb, tb)
    xb, _ = object_to_world(b, x, [1.0, 0, 0])
    xab, _ = object_to_world(a, xb, [1.0, 0, 0])
    xc, _ = object_to_world(a.compose(b), x, [1.0, 0, 0])
    assert_allclose(xc, xab, atol=1e-10)


def test_retract_small_rotation():
    p = Pose().retract([0.0, 0.0, 1e-3], [0.1, 0.0, 0.0])
    assert_allclose(p.t, [0.1, 0, 0])
    assert_allclose(p.quat, quat_from_rotvec([0, 0, 1e-3]), atol=1e-15)


def test_pose_validation():
    with pytest.raises(ValueError):
        Pose((1.0, 1.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        Pose(translation=(np.nan, 0.0, 0.0))


# ---------------------------------------------------------------- antennas


@given(vec.filter(lambda v: np.linalg.norm(v) > 0.1))
def test_isotropic_weight(v):
    assert antenna_weight(ISOTROPIC, np.array(v) / np.linalg.norm(v)) == 1.0


def test_boresight_gain():
    pat = lobe_pattern((0, 0, 1), peak=10.0)
    assert antenna_weight(pat, [0.0, 0.0, 1.0]) == pytest.approx(10.0)


@given(st.floats(-np.pi, np.pi), st.floats(-np.pi / 2, np.pi / 2))
def test_interpolation_between_neighbours(az, el):
    rng = np.random.default_rng(0)
    g = rng.uniform(0, 5, size=(37, 73))
    pat = AntennaPattern(g, "rand")
    d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    w = antenna_weight(pat, d)
    fa = (az + np.pi) / (2 * np.pi) * 72
    fe = (el + np.pi / 2) / np.pi * 36
    ia, ie = min(int(fa), 71), min(int(fe), 35)
    nb = g[ie:ie + 2, ia:ia + 2]
    assert nb.min() - 1e-12 <= w <= nb.max() + 1e-12


def test_pattern_validation():
    with pytest.raises(ValueError):
        AntennaPattern(np.array([[1.0, -1.0], [1.0, 1.0]]))


# ---------------------------------------------------------------- scenes and edits


def _ball(pid="ball", center=(0.0, 0.0, 0.0)):
    return PlacedPrimitive(pid, AnalyticBody(Sphere(center, 0.3), get_material("metal")))


def _scene(*prims):
    return Scene(prims, (Radio("tx", "tx", (-2.0, 0.0, 0.0)),), ((-3, -3, -3), (3, 3, 3)))


def test_add_then_remove_restores():
    s = _scene(_ball())
    extra = _ball("other", (1.0, 1.0, 0.0))
    assert apply_edit(apply_edit(s, AddEdit(extra)), RemoveEdit("other")) == s


def test_move_identity_restores():
    s = _scene(_ball())
    assert apply_edit(s, MoveEdit("ball", Pose())) == s


def test_move_then_predict_equals_fresh_scene():
    pose = Pose(tuple(quat_from_axis_angle((0, 1, 0), 0.3)), (0.2, -0.1, 0.0))
    moved = apply_edit(_scene(_ball()), MoveEdit("ball", pose))
    fresh = _scene(PlacedPrimitive("ball", _ball().payload, pose))
    cfg = TracerConfig(n_rays=512, guide_rays=16, seed=3, branching="split")
    rx = np.array([[2.0, 0.0, 0.1], [1.5, 1.0, 0.0]])
    tx = moved.radio("tx")
    a = predict_many(moved, tx, rx, cfg, 2.4e9)
    b = predict_many(fresh, tx, rx, cfg, 2.4e9)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_scene_validation():
    with pytest.raises(ValueError):
        _scene(_ball(), _ball())
    with pytest.raises(ValueError):
        Scene((), (Radio("tx", "tx", (9.0, 0, 0)),), ((-3, -3, -3), (3, 3, 3)))
    with pytest.raises(KeyError):
        _scene().radio("nope")
    with pytest.raises(KeyError):
        apply_edit(_scene(), RemoveEdit("ghost"))
    with pytest.raises(ValueError):
        Radio("r", "relay", (0.0, 0.0, 0.0))


# ---------------------------------------------------------------- library


def _prims():
    return [make_primitive(pid, seed, hidden_layers=3, width=8, feature_dim=4, num_freqs=2)
            for pid, seed in (("chair", 1), ("desk", 2), ("lamp", 3))]


def test_library_save_load_save_identical(tmp_path):
    a, b = tmp_path / "a.rfsc", tmp_path / "b.rfsc"
    save_library(a, _prims())
    save_library(b, load_library(a))
    assert a.read_bytes() == b.read_bytes()


def test_library_preserves_order_and_params():
    prims = _prims()
    back = decode_library(encode_library(prims))
    assert [p.id for p in back] == ["chair", "desk", "lamp"]
    assert all(p.digest() == q.digest() for p, q in zip(prims, back))


def test_truncated_library_rejected(tmp_path):
    p = tmp_path / "lib.rfsc"
    save_library(p, _prims())
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(ContainerError):
        load_library(p)


def test_duplicate_library_ids_rejected():
    prims = _prims()
    with pytest.raises(ValueError):
        encode_library([prims[0], prims[0]])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_digest_changes_with_params(seed):
    p = _prims()[0]
    arrs = p.param_arrays()
    k = sorted(arrs)[seed % len(arrs)]
    bumped = dict(arrs)
    bumped[k] = arrs[k] + 1e-3
    assert p.with_params(bumped).digest() != p.digest()
