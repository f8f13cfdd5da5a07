from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from rfprim.autodiff import F, Tape
from rfprim.fit import (ChannelMeasurement, MeasurementSet, PoseSearch, TrainConfig, adapt_poses,
                        error_metrics, evaluate, generate_measurements, loss, predict_set,
                        sample_regularizer_points, snr_db, total_objective, train_primitives)
from rfprim.fixtures import RoundTrip, make_primitive
from rfprim.geometry import eikonal_residual
from rfprim.scene import Pose
from rfprim.tracer import TracerConfig, power_db

FIX = RoundTrip()
TRACER = TracerConfig(n_rays=0, guide_rays=16, branching="split", capture_radius=0.2)


def small_prim(pid="obj", seed=3):
    return make_primitive(pid, seed, radius=0.6, init_radius=0.4, hidden_layers=3, width=16,
                          feature_dim=4, num_freqs=2)


def small_cfg(**kw):
    base = dict(batch=4, iters=2, lr_start=1e-3, lr_end=1e-4, rays=0, reg_samples=32,
                lambda_lap=0.0, tracer=TRACER)
    base.update(kw)
    return TrainConfig(**base)


def measured(scene, n=6, seed=1, kind="power_db"):
    return generate_measurements(scene, FIX.tx, FIX.receivers(n, seed), TRACER, kind=kind)


def matched(scene, cfg, n=6, seed=1):
    """Measurements equal to what the objective predicts at its first step."""
    probe = measured(scene, n, seed)
    re, im = predict_set(scene, probe, cfg.tracer_for(0))
    vals = power_db(np.asarray(re) + 1j * np.asarray(im))
    return MeasurementSet(tuple(replace(r, value=float(v)) for r, v in zip(probe, vals)))


def _meas(value, kind="power_db"):
    return ChannelMeasurement((0, 0, 0), (1, 0, 0), 2.4e9, kind, value)


# ---------------------------------------------------------------- losses


def test_loss_zero_at_match():
    assert loss(1.0 + 0j, _meas(0.0)) == pytest.approx(0.0, abs=1e-20)


def test_loss_six_db():
    assert loss(2.0 + 0j, _meas(0.0)) == pytest.approx(36.25, abs=0.01)


@given(st.floats(0, 2 * np.pi), st.floats(1e-3, 10.0))
def test_power_loss_ignores_global_phase(phi, a):
    m = _meas(-3.0)
    assert loss(a * np.exp(1j * phi), m) == pytest.approx(loss(a + 0j, m), rel=1e-9, abs=1e-12)


def test_complex_loss_normalised():
    m = _meas([2.0 + 0j], "complex")
    assert loss(2.0 + 0j, m) == 0.0
    assert loss(1.0 + 0j, m) == pytest.approx(0.25)


def test_snr_perfect_capped():
    assert snr_db([1 + 1j, 2], [1 + 1j, 2]) == 140.0


@given(st.lists(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
                min_size=1, max_size=8), st.floats(0.01, 1.0))
def test_snr_formula(s, e):
    s = np.array(s) + 1.0
    s_hat = s + e
    want = min(140.0, 10 * np.log10(np.sum(np.abs(s) ** 2) / (len(s) * e * e)))
    assert snr_db(s, s_hat) == pytest.approx(want, rel=1e-9)


def test_error_metrics_median():
    m = error_metrics([1.0, 2.0, 9.0], [0.0, 0.0, 0.0])
    assert m["median"] == 2.0 and m["n"] == 3
    with pytest.raises(ValueError):
        error_metrics([], [])


def test_measurement_validation():
    with pytest.raises(ValueError):
        MeasurementSet(())
    with pytest.raises(ValueError):
        MeasurementSet((_meas(0.0), _meas([1j], "complex")))
    with pytest.raises(ValueError):
        _meas(np.nan)
    with pytest.raises(ValueError):
        _meas(0.0, "phase")
    with pytest.raises(ValueError):
        ChannelMeasurement((0, 0, 0), (1, 0, 0), 0.0, "power_db", 0.0)


def test_complex_power_property():
    assert _meas([0.1 + 0j, -0.1j], "complex").power_db == pytest.approx(-20.0)


# ---------------------------------------------------------------- evaluation


def test_evaluate_perfect_model():
    sc = FIX.scene(small_prim())
    for kind in ("power_db", "complex"):
        res = evaluate(sc, measured(sc, kind=kind), TRACER)
        assert res["median"] == pytest.approx(0.0, abs=1e-9)
        if kind == "complex":
            assert res["snr_db"] == 140.0


def test_predict_set_order_independent():
    sc = FIX.scene(small_prim())
    data = measured(sc, n=5)
    perm = [3, 0, 4, 1, 2]
    a = np.asarray(predict_set(sc, data, TRACER, chunk=1)[0])
    b = np.asarray(predict_set(sc, data.subset(perm), TRACER, chunk=1)[0])
    assert_allclose(b, a[perm], rtol=1e-12)


# ---------------------------------------------------------------- objective


def test_objective_regularizer_weight_is_linear():
    sc = FIX.scene(small_prim())
    data = matched(sc, small_cfg(), n=3)
    reg = sample_regularizer_points(sc, 32, np.random.default_rng(0))
    vals, terms = [], {}
    for lam in (1.0, 2.0):
        vals.append(float(F.value(total_objective(sc, data, small_cfg(lambda_eik=lam), Tape(),
                                                  reg_samples=reg, terms=terms))))
    sdf = sc.primitives[0].payload.sdf
    eik = float(eikonal_residual(sdf.distance, reg["obj"], TRACER.eps_fd))
    assert terms["eikonal"] == pytest.approx(eik, rel=1e-12)
    assert vals[1] - vals[0] == pytest.approx(eik, rel=1e-9)
    assert terms["data"] == pytest.approx(0.0, abs=1e-18)


def test_objective_gradient_matches_fd_on_material():
    prim = small_prim()
    sc = FIX.scene(prim)
    data = generate_measurements(FIX.scene(small_prim(seed=9)), FIX.tx, FIX.receivers(3, 4), TRACER)
    cfg = small_cfg(lambda_eik=0.0)
    t = Tape()
    grads = t.backward(total_objective(sc, data, cfg, t))
    key = max((k for k in grads.keys() if k[0] == ("obj", "mat")), key=lambda k: np.abs(grads[k]).max())
    g = grads[key]
    arrs = prim.param_arrays()
    name = ("mat", key[1])
    i = int(np.argmax(np.abs(g)))
    h = 1e-6

    def f(d):
        a = arrs[name].copy()
        a.flat[i] += d
        p2 = prim.with_params({name: a})
        return float(F.value(total_objective(FIX.scene(p2), data, cfg, Tape())))

    assert g.flat[i] == pytest.approx((f(h) - f(-h)) / (2 * h), rel=1e-4)


# ---------------------------------------------------------------- training


def test_zero_iterations_leave_scene_unchanged():
    sc = FIX.scene(small_prim())
    out, rep = train_primitives(sc, measured(sc), small_cfg(iters=0))
    assert out is sc and rep.iterations == 0


def test_training_is_deterministic_and_moves_params():
    target = FIX.scene(small_prim(seed=9))
    data = measured(target)
    sc = FIX.scene(small_prim())
    a, ra = train_primitives(sc, data, small_cfg())
    b, rb = train_primitives(sc, data, small_cfg())
    da, db = a.primitives[0].payload.digest(), b.primitives[0].payload.digest()
    assert da == db and ra.loss == rb.loss
    assert da != sc.primitives[0].payload.digest()
    assert ra.iterations == 2 and ra.residuals.shape == (len(data),)


def test_training_reduces_loss():
    target = FIX.scene(make_primitive("obj", 3, radius=0.6, init_radius=0.4, hidden_layers=3,
                                      width=16, feature_dim=4, num_freqs=2, alpha0=0.9))
    data = measured(target, n=8)
    sc = FIX.scene(small_prim())
    _, rep = train_primitives(sc, data, small_cfg(iters=25, batch=8, lr_start=2e-2, lr_end=5e-3,
                                                  lambda_eik=0.0))
    assert rep.data_loss[-1] < 0.5 * rep.data_loss[0]


def test_frozen_scene_not_trainable():
    sc = FIX.scene(small_prim())
    frozen = sc.replace_primitive(replace(sc.primitives[0], frozen=True))
    with pytest.raises(ValueError):
        train_primitives(frozen, measured(sc), small_cfg())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(lambda_eik=-1.0)


# ---------------------------------------------------------------- pose adaptation


def test_pose_requires_dynamic_primitive():
    sc = FIX.scene(small_prim())
    with pytest.raises(ValueError):
        adapt_poses(sc, measured(sc), small_cfg())


def test_pose_stationary_at_truth_and_networks_untouched():
    pose = Pose(translation=(0.1, 0.05, 0.0))
    sc = FIX.scene(small_prim(), pose, dynamic=True)
    cfg = small_cfg(iters=1, lr_start=0.05, lr_end=0.01)
    data = matched(sc, cfg)
    out, rep = adapt_poses(sc, data, cfg)
    p = out.primitives[0]
    assert_allclose(p.pose.t, pose.t, atol=1e-6)
    assert_allclose(p.pose.quat, pose.quat, atol=1e-6)
    assert p.payload.digest() == sc.primitives[0].payload.digest()
    assert rep.loss[0] == pytest.approx(0.0, abs=1e-18)


def test_pose_search_finds_grid_point():
    truth = Pose(translation=(0.3, 0.0, 0.0))
    target = FIX.scene(small_prim(), truth)
    data = generate_measurements(target, FIX.tx, FIX.receivers(8, 5), TRACER)
    start = FIX.scene(small_prim(), Pose(), dynamic=True)
    out, _ = adapt_poses(start, data, small_cfg(iters=0),
                         search=PoseSearch(radius=0.3, step=0.3, levels=1, guide_rays=16))
    assert np.linalg.norm(out.primitives[0].pose.t - truth.t) < 0.3 + 1e-9


@settings(max_examples=5)
@given(st.floats(-1.0, 0.0))
def test_pose_search_validation(r):
    with pytest.raises(ValueError):
        PoseSearch(radius=r)


@given(st.floats(0, 2 * np.pi))
def test_complex_loss_invariant_to_shared_phase(phi):
    rot = np.exp(1j * phi)
    a, b = 0.3 - 0.7j, 0.5 + 0.2j
    assert loss(a * rot, _meas([b * rot], "complex")) == pytest.approx(loss(a, _meas([b], "complex")),
                                                                      rel=1e-12)


def test_zero_regularizer_weights_give_data_term():
    sc = FIX.scene(small_prim())
    data = measured(FIX.scene(small_prim(seed=9)), n=3)
    cfg = small_cfg(lambda_eik=0.0, lambda_lap=0.0)
    terms = {}
    obj = float(F.value(total_objective(sc, data, cfg, Tape(), terms=terms)))
    assert obj == terms["data"]
