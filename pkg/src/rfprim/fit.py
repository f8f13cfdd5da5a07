"""Fitting primitives and poses to channel measurements."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import F, AdamState, Tape, adam_step, lr_schedule
from .geometry import (eikonal_residual, laplacian_residual, mean_abs_eikonal,
                       regularizer_samples, surface_points)
from .scene import ISOTROPIC, NeuralPrimitive, Radio, Scene
from .tracer import POWER_FLOOR_DB, TracerConfig, power_db, predict_many

log = logging.getLogger(__name__)

KINDS = ("power_db", "complex")
SNR_CAP_DB = 140.0


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``report`` and ``scene`` hold the last good state."""

    def __init__(self, msg, report, scene):
        super().__init__(msg)
        self.report = report
        self.scene = scene


# --------------------------------------------------------------------------
# measurements


@dataclass(frozen=True)
class ChannelMeasurement:
    """One observation: dB power, or complex samples of the channel at ``freq``."""

    tx: tuple
    rx: tuple
    freq: float
    kind: str
    value: object

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        object.__setattr__(self, "tx", tuple(float(v) for v in self.tx))
        object.__setattr__(self, "rx", tuple(float(v) for v in self.rx))
        if not self.freq > 0:
            raise ValueError("measurement frequency must be positive")
        if self.kind == "power_db":
            v = float(self.value)
            if not np.isfinite(v):
                raise ValueError("non-finite measurement value")
            object.__setattr__(self, "value", v)
        else:
            v = np.atleast_1d(np.asarray(self.value, complex))
            if v.size == 0 or not np.all(np.isfinite(v)):
                raise ValueError("complex measurement needs finite samples")
            object.__setattr__(self, "value", v)

    @property
    def power_db(self) -> float:
        if self.kind == "power_db":
            return self.value
        return float(power_db(np.sqrt(np.mean(np.abs(self.value) ** 2))))


@dataclass(frozen=True)
class MeasurementSet:
    records: tuple

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ValueError("measurement set is empty")
        kinds = {r.kind for r in self.records}
        if len(kinds) != 1:
            raise ValueError("measurement kinds must be homogeneous")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def kind(self) -> str:
        return self.records[0].kind

    @property
    def tx(self) -> np.ndarray:
        return np.array([r.tx for r in self.records])

    @property
    def rx(self) -> np.ndarray:
        return np.array([r.rx for r in self.records])

    @property
    def power(self) -> np.ndarray:
        return np.array([r.power_db for r in self.records])

    def subset(self, idx) -> "MeasurementSet":
        return MeasurementSet(tuple(self.records[int(i)] for i in np.atleast_1d(idx)))

    def split(self, n_first: int) -> tuple:
        return self.subset(range(n_first)), self.subset(range(n_first, len(self)))


# --------------------------------------------------------------------------
# prediction over a measurement set


def _tx_radio(scene: Scene, pos) -> Radio:
    for r in scene.radios:
        if r.role == "tx":
            return r.at(pos)
    return Radio("_tx", "tx", tuple(pos))


def _rx_pattern(scene: Scene):
    for r in scene.radios:
        if r.role == "rx":
            return r.pattern
    return ISOTROPIC


def predict_set(scene: Scene, data: MeasurementSet, cfg: TracerConfig, tape=None,
                pose_grad: bool = False, chunk: int | None = None):
    """Complex prediction per record, (re, im) in record order.

    Records sharing a transmitter and frequency are traced together, at most
    ``chunk`` receivers per trace.  With ``chunk=1`` every value equals a
    single-receiver prediction.
    """
    groups: dict = {}
    for i, r in enumerate(data.records):
        key = (r.tx, r.freq)
        bucket = groups.setdefault(key, [[]])
        if chunk is not None and len(bucket[-1]) >= chunk:
            bucket.append([])
        bucket[-1].append(i)
    groups = {(k, j): idx for k, b in groups.items() for j, idx in enumerate(b)}
    pat = _rx_pattern(scene)
    pats = None if pat.gains is None else pat
    parts_re, parts_im, order = [], [], []
    for ((tx, f), _), idx in groups.items():
        rx = np.array([data.records[i].rx for i in idx])
        re, im, _ = predict_many(scene, _tx_radio(scene, tx), rx, cfg, f, tape=tape,
                                 pose_grad=pose_grad,
                                 rx_patterns=None if pats is None else [pats] * len(idx))
        parts_re.append(re)
        parts_im.append(im)
        order.extend(idx)
    re = F.concat(parts_re, axis=0)
    im = F.concat(parts_im, axis=0)
    inv = np.argsort(np.asarray(order))
    if list(order) != sorted(order):
        re, im = F.take(re, inv), F.take(im, inv)
    return re, im


# --------------------------------------------------------------------------
# losses and metrics


def _power_db_taped(re, im):
    p = F.add(F.add(F.mul(re, re), F.mul(im, im)), 1e-300)
    return F.maximum(F.mul(F.log10(p), 10.0), POWER_FLOOR_DB)


def data_losses(re, im, data: MeasurementSet):
    """Per-record loss (tape-aware): dB^2 for power, normalized |error|^2 for complex."""
    if data.kind == "power_db":
        diff = F.sub(_power_db_taped(re, im), data.power)
        return F.mul(diff, diff)
    out = []
    for i, r in enumerate(data.records):
        s = r.value
        er = F.sub(re[i:i + 1], s.real)
        ei = F.sub(im[i:i + 1], s.imag)
        num = F.mean(F.add(F.mul(er, er), F.mul(ei, ei)))
        out.append(F.reshape(F.div(num, max(float(np.mean(np.abs(s) ** 2)), 1e-300)), (1,)))
    return F.concat(out, axis=0)


def loss(pred, meas: ChannelMeasurement) -> float:
    """Loss of one prediction (complex amplitude or object with ``amplitudes``)."""
    amp = complex(np.ravel(getattr(pred, "amplitudes", pred))[0])
    ms = MeasurementSet((meas,))
    return float(data_losses(np.array([amp.real]), np.array([amp.imag]), ms)[0])


def snr_db(s, s_hat) -> float:
    s = np.asarray(s, complex).ravel()
    s_hat = np.asarray(s_hat, complex).ravel()
    err = np.sum(np.abs(s - s_hat) ** 2)
    sig = np.sum(np.abs(s) ** 2)
    if err == 0:
        return SNR_CAP_DB
    return float(min(SNR_CAP_DB, 10.0 * np.log10(sig / err)))


def error_metrics(pred_db, meas_db) -> dict:
    err = np.abs(np.asarray(pred_db, float) - np.asarray(meas_db, float))
    if err.size == 0:
        raise ValueError("cannot evaluate an empty set")
    return {"median": float(np.median(err)), "p10": float(np.percentile(err, 10)),
            "p90": float(np.percentile(err, 90)), "mean": float(np.mean(err)),
            "n": int(err.size), "errors": err}


def evaluate(scene: Scene, held_out: MeasurementSet, cfg: TracerConfig) -> dict:
    """Per-record absolute dB error summary; SNR as well for complex data."""
    if len(held_out) == 0:
        raise ValueError("cannot evaluate an empty set")
    re, im = predict_set(scene, held_out, cfg, chunk=1)
    amp = np.asarray(re) + 1j * np.asarray(im)
    out = error_metrics(power_db(amp), held_out.power)
    if held_out.kind == "complex":
        s = np.concatenate([r.value for r in held_out])
        s_hat = np.concatenate([np.full(r.value.size, a) for r, a in zip(held_out, amp)])
        out["snr_db"] = snr_db(s, s_hat)
    out["pred_db"] = power_db(amp)
    return out


# --------------------------------------------------------------------------
# objective


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings; ``tracer`` holds everything but the per-step seed and ray count."""

    batch: int = 256
    iters: int = 10000
    lr_start: float = 3e-4
    lr_end: float = 3e-5
    lambda_eik: float = 0.1
    lambda_lap: float = 0.01
    seed: int = 0
    rays: int = 2048
    reg_samples: int = 256
    geometry_lr_scale: float = 1.0
    geometry_warmup: int = 0
    tracer: TracerConfig = field(default_factory=TracerConfig)

    def __post_init__(self):
        if self.batch <= 0 or self.iters < 0 or self.rays < 0 or self.reg_samples <= 0:
            raise ValueError("batch, iters, rays and reg_samples must be positive")
        if not (self.lr_start > 0 and self.lr_end > 0):
            raise ValueError("learning rates must be positive")
        if self.lambda_eik < 0 or self.lambda_lap < 0:
            raise ValueError("regularizer weights must be non-negative")

    def tracer_for(self, step_seed: int) -> TracerConfig:
        return replace(self.tracer, n_rays=self.rays, seed=int(step_seed),
                       launch_seed=int(step_seed))


def _trainable(scene: Scene) -> list:
    return [p for p in scene.primitives if p.neural and not p.frozen]


def sample_regularizer_points(scene: Scene, n: int, rng: np.random.Generator) -> dict:
    """Object-frame regularizer samples per trainable primitive."""
    return {p.id: regularizer_samples(p.payload.sdf, rng, n) for p in _trainable(scene)}


def total_objective(scene: Scene, batch: MeasurementSet, cfg: TrainConfig, tape: Tape,
                    seed: int = 0, reg_samples: dict | None = None, terms: dict | None = None,
                    pose_grad: bool = False):
    """Mean data loss over ``batch`` plus weighted eikonal and Laplacian penalties.

    ``reg_samples`` pins the regularizer points (drawn from ``seed`` otherwise);
    the split of the value is written into ``terms`` when given.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    re, im = predict_set(scene, batch, cfg.tracer_for(seed), tape, pose_grad)
    data = F.mean(data_losses(re, im, batch))
    obj = data
    eik_total = lap_total = 0.0
    if cfg.lambda_eik > 0 or cfg.lambda_lap > 0:
        if reg_samples is None:
            reg_samples = sample_regularizer_points(scene, cfg.reg_samples,
                                                    np.random.default_rng(seed))
        for p in _trainable(scene):
            sdf, key = p.payload.sdf, (p.id, "sdf")
            pts = tape.leaf(reg_samples[p.id])

            def dist(x, sdf=sdf, key=key):
                return sdf.distance(x, tape, key)

            if cfg.lambda_eik > 0:
                e = eikonal_residual(dist, pts, cfg.tracer.eps_fd)
                obj = F.add(obj, F.mul(e, cfg.lambda_eik))
                eik_total += float(F.value(e))
            if cfg.lambda_lap > 0:
                lap = laplacian_residual(dist, pts)
                obj = F.add(obj, F.mul(lap, cfg.lambda_lap))
                lap_total += float(F.value(lap))
    if terms is not None:
        terms.update(data=float(F.value(data)), eikonal=eik_total, laplacian=lap_total)
    return obj


# --------------------------------------------------------------------------
# training


@dataclass
class FitReport:
    loss: list = field(default_factory=list)
    data_loss: list = field(default_factory=list)
    eikonal: float = float("nan")
    laplacian: float = float("nan")
    wall_clock: float = 0.0
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    poses: list = field(default_factory=list)

    def summary(self) -> str:
        last = self.loss[-1] if self.loss else float("nan")
        return (f"iterations={self.iterations} final_loss={last:.6g} "
                f"eikonal={self.eikonal:.4g} wall={self.wall_clock:.1f}s")


def _param_table(scene: Scene) -> dict:
    out = {}
    for p in _trainable(scene):
        for (net, name), arr in p.payload.param_arrays().items():
            out[((p.id, net), name)] = arr
    return out


def _with_params(scene: Scene, table: dict) -> Scene:
    prims = []
    for p in scene.primitives:
        mine = {(k[0][1], k[1]): v for k, v in table.items() if k[0][0] == p.id}
        if mine and p.neural and not p.frozen:
            p = replace(p, payload=p.payload.with_params(mine))
        prims.append(p)
    return replace(scene, primitives=tuple(prims))


def near_surface_eikonal(prim: NeuralPrimitive, rng: np.random.Generator, n: int = 512,
                         sigma: float = 0.02, eps: float = 1e-4) -> float:
    """Mean |‖∇S‖ - 1| over jittered zero-level-set points (object frame)."""
    sdf = prim.sdf
    surf = surface_points(sdf, rng, n)
    if len(surf) == 0:
        return float("nan")
    pts = surf + rng.normal(scale=sigma, size=surf.shape)
    return mean_abs_eikonal(sdf.distance, pts, eps)


def _batch_indices(rng, n_data: int, batch: int) -> np.ndarray:
    if batch >= n_data:
        return np.arange(n_data)
    return np.sort(rng.choice(n_data, size=batch, replace=False))


def train_primitives(scene: Scene, data: MeasurementSet, cfg: TrainConfig, callback=None):
    """Adam on every non-frozen neural primitive; returns the fitted scene and a report."""
    trainable = _trainable(scene)
    if not trainable:
        raise ValueError("scene has no trainable neural primitive")
    report = FitReport()
    t0 = time.perf_counter()
    if cfg.iters == 0:
        return scene, report
    rng = np.random.default_rng(cfg.seed)
    params = _param_table(scene)
    scales = {k: cfg.geometry_lr_scale for k in params if k[0][1] == "sdf"}
    state = AdamState()
    current = scene
    for it in range(cfg.iters):
        idx = _batch_indices(rng, len(data), cfg.batch)
        step_seed = cfg.seed * 1_000_003 + it
        reg = sample_regularizer_points(current, cfg.reg_samples, rng) \
            if (cfg.lambda_eik > 0 or cfg.lambda_lap > 0) else None
        tape = Tape()
        terms: dict = {}
        obj = total_objective(current, data.subset(idx), cfg, tape, step_seed, reg, terms)
        val = float(F.value(obj))
        if not np.isfinite(val):
            report.wall_clock = time.perf_counter() - t0
            raise TrainingDiverged(f"non-finite loss at iteration {it}", report, current)
        grads = tape.backward(obj)
        # structure network held fixed until the material has caught up
        g = {k: grads[k] for k in params
             if k in grads and (it >= cfg.geometry_warmup or k[0][1] != "sdf")}
        params = adam_step(state, params, g, lr_schedule(it, cfg.iters, cfg.lr_start, cfg.lr_end),
                           scales)
        current = _with_params(current, params)
        report.loss.append(val)
        report.data_loss.append(terms["data"])
        report.iterations = it + 1
        if callback is not None:
            callback(it, val, terms, current)
        if it % 50 == 0:
            log.info("iter %d loss %.4f data %.4f eik %.4g", it, val, terms["data"],
                     terms["eikonal"])
    report.wall_clock = time.perf_counter() - t0
    erng = np.random.default_rng(cfg.seed + 1)
    report.eikonal = float(np.mean([near_surface_eikonal(p.payload, erng)
                                    for p in _trainable(current)]))
    pts = sample_regularizer_points(current, cfg.reg_samples, erng)
    report.laplacian = float(np.mean([
        laplacian_residual(p.payload.sdf.distance, pts[p.id]) for p in _trainable(current)]))
    re, im = predict_set(current, data, cfg.tracer_for(cfg.seed), chunk=1)
    report.residuals = power_db(np.asarray(re) + 1j * np.asarray(im)) - data.power
    return current, report


# --------------------------------------------------------------------------
# pose adaptation


def _dynamic(scene: Scene) -> list:
    return [p for p in scene.primitives if p.dynamic]


def pose_objective(scene: Scene, data: MeasurementSet, cfg: TrainConfig, tape: Tape,
                   seed: int = 0):
    """Mean data loss with the pose of every dynamic primitive on the tape."""
    re, im = predict_set(scene, data, cfg.tracer_for(seed), tape, pose_grad=True)
    return F.mean(data_losses(re, im, data))


@dataclass(frozen=True)
class PoseSearch:
    """Coarse-to-fine translation grid search run before gradient refinement.

    Each level scans a ``(2k+1)^3`` grid of offsets, ``k = round(radius/step)``,
    around the best translation so far, then halves ``radius`` and ``step``.
    All candidates of a level share one tracer seed.
    """

    radius: float = 0.9
    step: float = 0.3
    levels: int = 3
    guide_rays: int = 64
    seed: int = 0

    def __post_init__(self):
        if not (self.radius > 0 and self.step > 0) or self.levels < 1 or self.guide_rays < 1:
            raise ValueError("search radius, step, levels and guide_rays must be positive")


def _grid_offsets(radius: float, step: float) -> np.ndarray:
    k = max(1, int(round(radius / step)))
    ax = np.arange(-k, k + 1) * step
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)


def search_translations(scene: Scene, data: MeasurementSet, cfg: TrainConfig,
                        search: PoseSearch) -> Scene:
    """Move each dynamic primitive to the grid translation with the lowest data loss.

    The loss of a shadowing object is piecewise smooth in its translation, so
    gradients alone stall when no sampled ray grazes the silhouette.
    """
    current = scene
    for level in range(search.levels):
        radius, step = search.radius / 2 ** level, search.step / 2 ** level
        tcfg = replace(cfg.tracer_for(search.seed * 1_000_003 + level), guide_rays=search.guide_rays)
        for p in _dynamic(current):
            base = current.primitive(p.id)
            best, best_val = base, np.inf
            for off in _grid_offsets(radius, step):
                cand = replace(base, pose=base.pose.retract(np.zeros(3), off))
                sc = current.replace_primitive(cand)
                re, im = predict_set(sc, data, tcfg)
                val = float(np.mean(data_losses(re, im, data)))
                if val < best_val:
                    best, best_val = cand, val
            current = current.replace_primitive(best)
            log.debug("search level %d: %s -> %s (loss %.3g)", level, p.id,
                      best.pose.translation, best_val)
    return current


def adapt_poses(scene: Scene, data: MeasurementSet, cfg: TrainConfig, callback=None,
                search: PoseSearch | None = None):
    """Adam on the poses of dynamic primitives; every network stays untouched.

    Translation is updated directly, rotation through tangent-space increments
    that are folded into the quaternion (and re-normalised) after each step.
    With ``search`` the translations are first initialised by a grid search.
    """
    dyn = _dynamic(scene)
    if not dyn:
        raise ValueError("scene has no dynamic primitive")
    if len(data) == 0:
        raise ValueError("pose adaptation needs at least one measurement")
    report = FitReport()
    t0 = time.perf_counter()
    state = AdamState()
    current = scene if search is None else search_translations(scene, data, cfg, search)
    for it in range(cfg.iters):
        tape = Tape()
        obj = pose_objective(current, data, cfg, tape, cfg.seed * 1_000_003 + it)
        val = float(F.value(obj))
        if not np.isfinite(val):
            report.wall_clock = time.perf_counter() - t0
            raise TrainingDiverged(f"non-finite loss at iteration {it}", report, current)
        grads = tape.backward(obj)
        params, g = {}, {}
        poses = {p.id: current.primitive(p.id).pose for p in dyn}
        for p in dyn:
            for part, init in (("trans", poses[p.id].t), ("rot", np.zeros(3))):
                k = (p.id, part)
                params[k] = np.array(init, float)
                if k in grads:
                    g[k] = grads[k]
        lr = lr_schedule(it, cfg.iters, cfg.lr_start, cfg.lr_end)
        new = adam_step(state, params, g, lr)
        for p in dyn:
            old = poses[p.id]
            pose = old.retract(new[(p.id, "rot")], new[(p.id, "trans")] - old.t)
            current = current.replace_primitive(replace(current.primitive(p.id), pose=pose))
        report.loss.append(val)
        report.data_loss.append(val)
        report.poses.append({p.id: current.primitive(p.id).pose for p in dyn})
        report.iterations = it + 1
        if callback is not None:
            callback(it, val, current)
    report.wall_clock = time.perf_counter() - t0
    return current, report


# --------------------------------------------------------------------------
# synthetic data


def generate_measurements(scene: Scene, tx_pos, rx_positions, cfg: TracerConfig,
                          freq: float | None = None, kind: str = "power_db",
                          noise_db: float = 0.0, rng: np.random.Generator | None = None
                          ) -> MeasurementSet:
    """Engine predictions at ``rx_positions`` packaged as measurements (optional dB noise)."""
    freq = scene.frequencies[0] if freq is None else float(freq)
    rx_positions = np.atleast_2d(np.asarray(rx_positions, float))
    if len(rx_positions) == 0:
        raise ValueError("need at least one receiver position")
    tx = tuple(float(v) for v in tx_pos)
    probe = MeasurementSet(tuple(ChannelMeasurement(tx, tuple(r), freq, "power_db", 0.0)
                                 for r in rx_positions))
    re, im = predict_set(scene, probe, cfg, chunk=1)
    amp = np.asarray(re) + 1j * np.asarray(im)
    if noise_db > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        amp = amp * 10.0 ** (rng.normal(scale=noise_db, size=amp.shape) / 20.0)
    recs = []
    for rx, a in zip(rx_positions, amp):
        val = float(power_db(a)) if kind == "power_db" else np.array([a])
        recs.append(ChannelMeasurement(tx, tuple(rx), freq, kind, val))
    return MeasurementSet(tuple(recs))
