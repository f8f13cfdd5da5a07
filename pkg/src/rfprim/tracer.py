"""Monte Carlo RF path tracing over neural and analytic primitives.

A prediction runs in two passes.  The forward pass (plain numpy) launches
rays, finds interactions by sphere tracing or closed-form intersection, picks
branches and records, per ray, the event history and which receivers each air
segment passes close to.  The evaluation pass replays the recorded histories
to synthesise received amplitudes; it runs either eagerly or on a tape, in
which case hit points follow the implicit surface constraint and gradients
reach network weights and poses.  Both passes share the same event code so
taped and untaped predictions agree.

Receivers collect rays with a smooth kernel over the closest-approach
distance ``b`` (biweight, radius ``capture_radius``); each captured ray is
weighted by the inverse ray density ``D U / (N q)`` so the sum estimates the
field of a point receiver.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .autodiff import F
from .geometry import Box, Plane, Sphere, fd_gradient, refine_root
from .materials import C0, material_response, reflection_coefficient_taped
from .scene import Radio, Scene, antenna_weight

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
ABSORB_EPS = 1e-9
POWER_FLOOR_DB = -120.0

REFLECT, TRANSMIT = 0, 1
OUTSIDE, INSIDE = 0, 1


@dataclass(frozen=True)
class TracerConfig:
    """Ray budget and estimator settings.

    ``n_rays`` uniform (stratified) launches plus ``guide_rays`` launches in a
    cone toward every receiver; the launch density is the mixture of both.
    ``branching`` is ``"mc"`` (one branch per interaction, probability
    proportional to alpha) or ``"split"`` (follow every branch; exact
    expectation over branch choices).
    """

    n_rays: int = 2048
    max_depth: int = 2
    eps_hit: float = 0.01
    capture_radius: float = 0.1
    seed: int = 0
    launch_seed: int | None = None
    rr_threshold: float = 1e-4
    interior_step: float = 0.02
    eps_fd: float = 1e-4
    guide_rays: int = 0
    branching: str = "mc"
    backward: bool = False
    max_iter: int = 128

    def __post_init__(self):
        if self.n_rays < 0 or self.guide_rays < 0 or self.n_rays + self.guide_rays == 0:
            raise ValueError("need a positive ray budget")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        for name in ("eps_hit", "capture_radius", "interior_step", "eps_fd"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.rr_threshold < 0:
            raise ValueError("rr_threshold must be >= 0")
        if self.branching not in ("mc", "split"):
            raise ValueError(f"unknown branching mode {self.branching!r}")


# --------------------------------------------------------------------------
# small helpers


def reflect_dir(w, n):
    """Mirror direction ``w - 2 (w.n) n`` (rows; tape-aware)."""
    wn = F.sum(F.mul(w, n), axis=-1)
    return F.sub(w, F.mul(n, F.expand_dims(F.mul(wn, 2.0), -1)))


def _splitmix(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def ray_uniform(seed, ray, counter) -> np.ndarray:
    """Counter-based uniform in [0, 1) keyed by (seed, ray index, event counter)."""
    with np.errstate(over="ignore"):
        s = np.asarray(seed, np.uint64)
        r = np.asarray(ray, np.uint64)
        c = np.asarray(counter, np.uint64)
        h = _splitmix(_splitmix(_splitmix(s) ^ r) ^ c)
    return (h >> np.uint64(11)).astype(float) * 2.0 ** -53


def _kernel(b2, r):
    """Biweight kernel normalised over the disk of radius ``r`` (tape-aware)."""
    u = F.sub(1.0, F.div(b2, r * r))
    return F.mul(F.mul(u, u), 3.0 / (math.pi * r * r))


def _basis(a):
    a = np.asarray(a, float)
    h = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(a, h)
    u /= np.linalg.norm(u)
    return u, np.cross(a, u)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * GOLDEN_ANGLE
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _cone(axis, cos_c: float, n: int, phase: float) -> np.ndarray:
    i = np.arange(n) + 0.5
    ct = 1.0 - (1.0 - cos_c) * i / n
    st = np.sqrt(np.clip(1.0 - ct * ct, 0.0, None))
    phi = i * GOLDEN_ANGLE + phase
    u, v = _basis(axis)
    return (st * np.cos(phi))[:, None] * u + (st * np.sin(phi))[:, None] * v + ct[:, None] * axis


@dataclass
class LaunchSet:
    dirs: np.ndarray        # (n, 3) unit
    n_pdf: np.ndarray       # N * q(dir): launch density times ray count
    gain: np.ndarray        # transmit antenna weight per ray


def launch_rays(tx: Radio, n: int, seed: int = 0, targets=None, guide_rays: int = 0,
                capture_radius: float = 0.1, frame=None) -> LaunchSet:
    """Stratified uniform launch plus optional cones toward ``targets``.

    The Fibonacci lattice is rotated by a seeded random rotation; ``frame``
    (3x3) rotates the whole launch pattern, so transforming the scene and the
    frame together transforms the rays.
    """
    if n < 0 or (n == 0 and guide_rays == 0):
        raise ValueError("need at least one ray")
    frame = np.eye(3) if frame is None else np.asarray(frame, float)
    rot = Rotation.random(random_state=seed).as_matrix()
    parts = [fibonacci_sphere(n) @ rot.T] if n else []
    cones = []
    origin = np.asarray(tx.position, float)
    if guide_rays and targets is not None:
        rng = np.random.default_rng([seed, 7919])
        for tgt in np.atleast_2d(targets):
            v = (np.asarray(tgt, float) - origin) @ frame
            dist = np.linalg.norm(v)
            if dist <= capture_radius * 1.01:
                continue
            cos_c = math.sqrt(1.0 - (capture_radius / dist) ** 2)
            cones.append((v / dist, cos_c))
            parts.append(_cone(v / dist, cos_c, guide_rays, rng.uniform(0, 2 * math.pi)))
    local = np.concatenate(parts, axis=0)
    n_pdf = np.full(len(local), n / (4.0 * math.pi))
    for axis, cos_c in cones:
        inside = local @ axis >= cos_c - 1e-12
        n_pdf = n_pdf + inside * (guide_rays / (2.0 * math.pi * (1.0 - cos_c)))
    dirs = local @ frame.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return LaunchSet(dirs, n_pdf, np.asarray(antenna_weight(tx.pattern, dirs), float))


def _aabb_exit(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    t = np.where(d > 0, t2, np.where(d < 0, t1, np.inf))
    return np.clip(np.min(t, axis=1), 0.0, None)


# --------------------------------------------------------------------------
# compiled primitives


class _Obj:
    """A placed primitive prepared for tracing and replay."""

    def __init__(self, placed, index: int, cfg: TracerConfig):
        self.placed = placed
        self.id = placed.id
        self.index = index
        self.neural = placed.neural
        self.R = placed.pose.rotation
        self.t = placed.pose.t
        self.sdf = placed.payload.sdf
        if self.neural:
            self.material = placed.payload.material
            self.center, self.radius = self.sdf.bounding_sphere()
            self.K = max(1, int(math.ceil(2.0 * self.radius / cfg.interior_step)))
        else:
            self.material = placed.payload.material
            self.halfspace = isinstance(self.sdf, Plane)

    # frames ---------------------------------------------------------------
    def frame(self, tape=None, pose_grad=False):
        if tape is None or not pose_grad or not self.placed.dynamic:
            return self.R, self.t
        delta = tape.param((self.id, "rot"), np.zeros(3))
        trans = tape.param((self.id, "trans"), self.t)
        dx, dy, dz = delta[0], delta[1], delta[2]
        z = F.mul(dx, 0.0)
        skew = F.stack([F.stack([z, F.neg(dz), dy]), F.stack([dz, z, F.neg(dx)]),
                        F.stack([F.neg(dy), dx, z])], axis=0)
        return F.add(self.R, F.matmul(self.R, skew)), trans

    @staticmethod
    def to_obj(x, fr):
        return F.matmul(F.sub(x, fr[1]), fr[0])

    @staticmethod
    def dir_to_obj(d, fr):
        return F.matmul(d, fr[0])

    # fields ---------------------------------------------------------------
    def eval(self, x, fr):
        """World-frame distance and features at points ``x``."""
        xo = self.to_obj(x, fr)
        if self.neural:
            return self.sdf.evaluate(xo, key=(self.id, "sdf"))
        return self.sdf.distance(xo), None

    def dist(self, x, fr):
        return self.eval(x, fr)[0]

    def grad(self, x, fr, eps):
        return fd_gradient(lambda y: self.dist(y, fr), x, eps)


def _compile(scene: Scene, cfg: TracerConfig):
    return [_Obj(p, i, cfg) for i, p in enumerate(scene.primitives)]


# --------------------------------------------------------------------------
# forward geometry (numpy)


def _march(dist, o, d, t0, t1, eps, max_step, max_iter):
    """Vectorised clamped sphere tracing on [t0, t1]; returns root t or nan.

    Steps are clamped to [eps/2, max_step]; a negative sample brackets the
    crossing, which is then refined to machine precision.  Rays whose first
    sample is already negative are reported with ``-1`` (start inside).
    """
    n = len(o)
    t = t0.copy()
    prev = t0.copy()
    out = np.full(n, np.nan)
    act = np.arange(n)
    lo_b, hi_b, idx_b = [], [], []
    first = True
    for _ in range(max_iter):
        if act.size == 0:
            break
        s = np.asarray(dist(o[act] + t[act, None] * d[act]), float)
        neg = s < 0
        if first:
            out[act[neg]] = -1.0
            first = False
        else:
            if np.any(neg):
                lo_b.append(prev[act[neg]])
                hi_b.append(t[act[neg]])
                idx_b.append(act[neg])
        keep = ~neg
        act, s = act[keep], s[keep]
        done = t[act] >= t1[act]
        act, s = act[~done], s[~done]
        step = np.clip(s, eps * 0.5, max_step)
        prev[act] = t[act]
        t[act] = np.minimum(t[act] + step, t1[act])
    if idx_b:
        idx = np.concatenate(idx_b)
        tr, _ = refine_root(dist, o[idx], d[idx], np.concatenate(lo_b), np.concatenate(hi_b))
        out[idx] = tr
    return out


def _exit_march(dist, o, d, step, t_max):
    """Fixed-step march while S < 0; refined exit distance or nan."""
    n = len(o)
    t = np.full(n, 1e-6)
    out = np.full(n, np.nan)
    act = np.arange(n)
    s0 = np.asarray(dist(o + t[:, None] * d), float)
    act = act[s0 < 0]
    lo_b, hi_b, idx_b = [], [], []
    while act.size:
        tn = t[act] + step
        s = np.asarray(dist(o[act] + tn[:, None] * d[act]), float)
        cross = s >= 0
        if np.any(cross):
            lo_b.append(t[act[cross]])
            hi_b.append(tn[cross])
            idx_b.append(act[cross])
        t[act] = tn
        act = act[~cross & (tn < t_max)]
    if idx_b:
        idx = np.concatenate(idx_b)
        tr, _ = refine_root(dist, o[idx], d[idx], np.concatenate(lo_b), np.concatenate(hi_b))
        out[idx] = tr
    return out


def _entry_t(obj: _Obj, o, d, t_min, cfg: TracerConfig):
    """Distance to the first outside->inside crossing of ``obj`` (nan if none)."""
    fr = (obj.R, obj.t)
    oo = obj.to_obj(o, fr)
    do = obj.dir_to_obj(d, fr)
    sdf = obj.sdf
    n = len(o)
    if obj.neural or not isinstance(sdf, (Sphere, Box, Plane)):
        bs = sdf.bounding_sphere()
        if bs is not None:
            c, r = bs
            if not obj.neural:
                r = r + cfg.eps_hit
            a0, a1 = Sphere(tuple(c), r).intersect(oo, do)
            ok = np.isfinite(a0) & (a1 > t_min)
            out = np.full(n, np.nan)
            if np.any(ok):
                idx = np.nonzero(ok)[0]
                t0 = np.maximum(a0[idx], t_min)
                t1 = a1[idx]
                res = _march(sdf.distance, oo[idx], do[idx], t0, t1, cfg.eps_hit, r, cfg.max_iter)
                res[res < 0] = np.nan  # grazing re-entry right after an interaction
                out[idx] = res
            return out
        t0 = np.full(n, t_min)
        t1 = np.full(n, 1e3)
        res = _march(sdf.distance, oo, do, t0, t1, cfg.eps_hit, np.inf, cfg.max_iter)
        res[res < 0] = np.nan
        return res
    if isinstance(sdf, Plane):
        nrm = np.asarray(sdf.normal)
        s = oo @ nrm - sdf.offset
        dn = do @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -s / dn
        ok = (s > 0) & (dn < 0) & (t >= t_min)
        return np.where(ok, t, np.nan)
    lo, hi = sdf.intersect(oo, do)
    return np.where(np.isfinite(lo) & (lo >= t_min), lo, np.nan)


def _exit_t(obj: _Obj, o, d, cfg: TracerConfig):
    fr = (obj.R, obj.t)
    oo = obj.to_obj(o, fr)
    do = obj.dir_to_obj(d, fr)
    sdf = obj.sdf
    if obj.neural:
        return _exit_march(sdf.distance, oo, do, cfg.interior_step, 2.0 * obj.radius + cfg.interior_step)
    if isinstance(sdf, Plane):
        return np.full(len(o), np.nan)
    if isinstance(sdf, (Sphere, Box)):
        lo, hi = sdf.intersect(oo, do)
        return np.where(np.isfinite(hi) & (hi > 1e-9), hi, np.nan)
    bs = sdf.bounding_sphere()
    t_max = 2.0 * bs[1] + cfg.interior_step if bs is not None else 1e3
    return _exit_march(sdf.distance, oo, do, cfg.interior_step, t_max)


# --------------------------------------------------------------------------
# shared event terms (eager or taped)


@dataclass
class _Terms:
    normal: object
    refl: object
    # complex factors (re, im) for both branches and their magnitudes
    r_re: object
    r_im: object
    t_re: object
    mag_r: object
    mag_t: object


def _surface_terms(obj: _Obj, hit, d, side: int, f: float, fr, feats, cfg: TracerConfig):
    """Normals, reflected direction and per-branch factors at a surface hit."""
    g = obj.grad(hit, fr, cfg.eps_fd)
    nrm = F.div(g, F.expand_dims(F.norm(g, axis=-1), -1))
    refl = reflect_dir(d, nrm)
    if obj.neural:
        n_o = obj.dir_to_obj(nrm, fr)
        p_o = obj.to_obj(hit, fr)
        key = (obj.id, "mat")
        ar = material_response(obj.material, p_o, n_o, obj.dir_to_obj(refl, fr), f, feats, key=key)
        at = material_response(obj.material, p_o, n_o, obj.dir_to_obj(d, fr), f, feats, key=key)
        return _Terms(nrm, refl, ar, None, at, ar, at)
    cos_i = F.sum(F.mul(d, nrm), axis=-1)
    r_re, r_im = reflection_coefficient_taped(obj.material, f, cos_i)
    if side == INSIDE:
        r_re, r_im = F.neg(r_re), F.neg(r_im)
    mag_r = F.sqrt(F.add(F.add(F.mul(r_re, r_re), F.mul(r_im, r_im)), 1e-300))
    if obj.material.pec:
        t_val = np.zeros(np.shape(F.value(cos_i)))
    else:
        t_val = F.sqrt(F.relu(F.sub(1.0, F.mul(mag_r, mag_r))))
    return _Terms(nrm, refl, r_re, r_im, t_val, mag_r, t_val)


def _branch_factor(terms: _Terms, branch: int, mode: str):
    """(re, im) amplitude factor of the chosen branch, MC-compensated if needed."""
    if branch == REFLECT:
        re, im, mag = terms.r_re, terms.r_im, terms.mag_r
    else:
        re, im, mag = terms.t_re, None, terms.mag_t
    if mode == "mc":
        scale = F.div(F.add(terms.mag_r, terms.mag_t), mag)
        re = F.mul(re, scale)
        im = None if im is None else F.mul(im, scale)
    return re, im


def _interior(obj: _Obj, p_from, p_to, d, f, fr, n_rows: int):
    """Exp of minus the Riemann sum of the interior rate over K chord midpoints."""
    if not obj.neural:
        return None
    K = obj.K
    seg = F.sub(p_to, p_from)
    chord = F.norm(seg, axis=-1)
    fracs = (np.arange(K) + 0.5) / K
    # samples ordered (K, n) flattened
    pts = F.add(F.reshape(F.mul(F.expand_dims(seg, 0), fracs[:, None, None]), (K * n_rows, 3)),
                F.reshape(F.add(F.expand_dims(p_from, 0), np.zeros((K, 1, 1))), (K * n_rows, 3)))
    p_o = obj.to_obj(pts, fr)
    _, feats = obj.sdf.evaluate(p_o, key=(obj.id, "sdf"))
    d_o = obj.dir_to_obj(d, fr)
    d_rep = F.reshape(F.add(F.expand_dims(d_o, 0), np.zeros((K, 1, 1))), (K * n_rows, 3))
    zeros = np.zeros((K * n_rows, 3))
    rates = F.mul(material_response(obj.material, p_o, zeros, d_rep, f, feats, key=(obj.id, "mat")),
                  obj.material.rate_scale)
    total = F.sum(F.reshape(rates, (K, n_rows)), axis=0)
    return F.exp(F.neg(F.mul(total, F.div(chord, float(K)))))


def _cmul(a_re, a_im, b_re, b_im):
    if b_re is None:
        return a_re, a_im
    if a_im is None and b_im is None:
        return F.mul(a_re, b_re), None
    if b_im is None:
        return F.mul(a_re, b_re), F.mul(a_im, b_re)
    if a_im is None:
        return F.mul(a_re, b_re), F.mul(a_re, b_im)
    return (F.sub(F.mul(a_re, b_re), F.mul(a_im, b_im)),
            F.add(F.mul(a_re, b_im), F.mul(a_im, b_re)))


# --------------------------------------------------------------------------
# forward pass


@dataclass
class TraceLog:
    """Everything the evaluation pass needs to rebuild captured contributions."""

    tx_pos: np.ndarray
    rx_pos: np.ndarray
    freq: float
    launch: LaunchSet
    root: np.ndarray                     # launch index per row
    row_seed: np.ndarray                 # branch seed per row
    hist_prim: np.ndarray                # (rows, max_depth) primitive index, -1 unused
    hist_side: np.ndarray
    hist_branch: np.ndarray
    hist_t: np.ndarray
    hist_gd: np.ndarray                  # (rows, max_depth) detached slope dS/dt at the root
    hist_rr: np.ndarray                  # roulette compensation per event
    cap_row: np.ndarray                  # captured contributions
    cap_depth: np.ndarray
    cap_rx: np.ndarray
    n_rays: int
    stats: dict = field(default_factory=dict)


class _Rays:
    """Struct-of-arrays ray state; rows are only ever appended."""

    FIELDS = ("o", "d", "inside", "mag", "alive", "key", "seed", "root",
              "hist_prim", "hist_side", "hist_branch", "hist_t", "hist_gd", "hist_rr")

    def __init__(self, origin, dirs, root, seeds, md):
        n = len(root)
        self.o = np.repeat(origin[None], n, axis=0)
        self.d = dirs[root].copy()
        self.inside = np.full(n, -1)
        self.mag = np.ones(n)
        self.alive = np.ones(n, bool)
        self.key = root.astype(np.int64).copy()
        self.seed = seeds
        self.root = root
        self.hist_prim = np.full((n, md), -1)
        self.hist_side = np.zeros((n, md), np.int8)
        self.hist_branch = np.zeros((n, md), np.int8)
        self.hist_t = np.zeros((n, md))
        self.hist_gd = np.zeros((n, md))
        self.hist_rr = np.ones((n, md))
        self.next_key = int(root.max()) + 1 if n else 0

    def __len__(self):
        return len(self.root)

    def grow(self, src):
        """Append copies of rows ``src`` with fresh rng keys; return their indices."""
        n = len(self)
        for name in self.FIELDS:
            a = getattr(self, name)
            setattr(self, name, np.concatenate([a, a[src]], axis=0))
        new = np.arange(n, n + len(src))
        self.key[new] = np.arange(self.next_key, self.next_key + len(src))
        self.next_key += len(src)
        return new

    def advance(self, rows, branch, depth, hitp, newd, fmag, obj, side, cfg):
        """Apply a branch choice to ``rows`` including Russian roulette."""
        if rows.size == 0:
            return
        self.hist_branch[rows, depth] = branch
        self.o[rows] = hitp
        if branch == REFLECT:
            self.d[rows] = newd
        elif side == OUTSIDE:
            if not obj.neural and obj.halfspace:
                self.alive[rows] = False  # nothing is traced inside a half-space
                return
            self.inside[rows] = obj.index
        else:
            self.inside[rows] = -1
        m = self.mag[rows] * fmag
        thr = cfg.rr_threshold
        low = m < thr
        if np.any(low):
            lr = rows[low]
            p = m[low] / thr
            u = ray_uniform(self.seed[lr], self.key[lr], 2 * depth + 1)
            survive = u < p
            self.alive[lr[~survive]] = False
            self.hist_rr[lr[survive], depth] = 1.0 / p[survive]
            m[low] = np.where(survive, thr, 0.0)
        self.mag[rows] = m


def _root_slope(obj, x, d, fr, h=1e-7):
    """Directional derivative of S along the ray at a root (central difference)."""
    sp = np.asarray(obj.dist(x + h * d, fr), float)
    sm = np.asarray(obj.dist(x - h * d, fr), float)
    return (sp - sm) / (2.0 * h)


def _nearest(objs, o, d, t_min, cfg):
    best_t = np.full(len(o), np.inf)
    best_k = np.full(len(o), -1)
    for obj in objs:
        tk = _entry_t(obj, o, d, t_min, cfg)
        better = np.isfinite(tk) & (tk < best_t)
        best_t[better] = tk[better]
        best_k[better] = obj.index
    return best_t, best_k


def trace(scene: Scene, tx_pos, rx_pos, cfg: TracerConfig, freq: float, tx: Radio | None = None,
          seeds=None, frame=None, objs=None) -> TraceLog:
    """Forward pass from ``tx_pos`` toward receivers ``rx_pos`` (m, 3).

    ``seeds`` optionally replicates the launch set once per seed (independent
    branch choices, shared directions) for batched Monte Carlo studies.
    """
    objs = _compile(scene, cfg) if objs is None else objs
    tx_pos = np.asarray(tx_pos, float)
    rx_pos = np.atleast_2d(np.asarray(rx_pos, float))
    tx = tx if tx is not None else Radio("_tx", "tx", tuple(tx_pos))
    lseed = cfg.seed if cfg.launch_seed is None else cfg.launch_seed
    launch = launch_rays(tx, cfg.n_rays, lseed, rx_pos, cfg.guide_rays, cfg.capture_radius, frame)
    n0 = len(launch.dirs)
    if seeds is None:
        root = np.arange(n0)
        row_seed = np.full(n0, cfg.seed, np.int64)
    else:
        seeds = np.asarray(seeds, np.int64)
        root = np.tile(np.arange(n0), len(seeds))
        row_seed = np.repeat(seeds, n0)
    md = cfg.max_depth
    lo, hi = (np.asarray(b, float) for b in scene.bounds)
    R = _Rays(tx_pos, launch.dirs, root, row_seed, md)
    caps_row, caps_depth, caps_rx = [], [], []
    rc2 = cfg.capture_radius ** 2
    t_min = cfg.eps_hit * 0.5
    stats = defaultdict(int)

    for depth in range(md + 1):
        rows = np.nonzero(R.alive)[0]
        if rows.size == 0:
            break
        air = rows[R.inside[rows] < 0]
        ins = rows[R.inside[rows] >= 0]
        groups = []  # (rows, obj, side, t)
        if air.size:
            oa, da = R.o[air], R.d[air]
            best_t, best_k = _nearest(objs, oa, da, t_min, cfg)
            seg_len = np.minimum(best_t, _aabb_exit(oa, da, lo, hi))
            for r, rx in enumerate(rx_pos):
                v = rx - oa
                u = np.sum(v * da, axis=1)
                b2 = np.sum(v * v, axis=1) - u * u
                hit = (u > 0) & (u < seg_len) & (b2 < rc2)
                if np.any(hit):
                    caps_row.append(air[hit])
                    caps_depth.append(np.full(int(hit.sum()), depth))
                    caps_rx.append(np.full(int(hit.sum()), r))
            R.alive[air[best_k < 0]] = False
            if depth < md:
                for obj in objs:
                    m = best_k == obj.index
                    if np.any(m):
                        groups.append((air[m], obj, OUTSIDE, best_t[m]))
        if ins.size and depth < md:
            for obj in objs:
                sel = ins[R.inside[ins] == obj.index]
                if sel.size == 0:
                    continue
                te = _exit_t(obj, R.o[sel], R.d[sel], cfg)
                ok = np.isfinite(te)
                R.alive[sel[~ok]] = False
                stats["lost_inside"] += int((~ok).sum())
                if np.any(ok):
                    groups.append((sel[ok], obj, INSIDE, te[ok]))
        if depth == md:
            break
        for rr, obj, side, tt in groups:
            fr = (obj.R, obj.t)
            hitp = R.o[rr] + tt[:, None] * R.d[rr]
            _, feats = obj.eval(hitp, fr)
            gd = _root_slope(obj, hitp, R.d[rr], fr)
            terms = _surface_terms(obj, hitp, R.d[rr], side, freq, fr, feats, cfg)
            fac_in = np.ones(rr.size)
            if side == INSIDE and obj.neural:
                fac_in = _interior(obj, R.o[rr], hitp, R.d[rr], freq, fr, rr.size)
            mr = np.abs(np.asarray(terms.mag_r, float)) * np.ones(rr.size)
            mt = np.abs(np.asarray(terms.mag_t, float)) * np.ones(rr.size)
            refl = np.asarray(terms.refl)
            R.hist_prim[rr, depth] = obj.index
            R.hist_side[rr, depth] = side
            R.hist_t[rr, depth] = tt
            R.hist_gd[rr, depth] = gd
            tot = mr + mt
            absorbed = tot < ABSORB_EPS
            stats["absorbed"] += int(absorbed.sum())
            R.alive[rr[absorbed]] = False
            keep = ~absorbed
            rr, hitp, refl = rr[keep], hitp[keep], refl[keep]
            mr, mt, tot, fac_in = mr[keep], mt[keep], tot[keep], fac_in[keep]
            if cfg.branching == "mc":
                u = ray_uniform(R.seed[rr], R.key[rr], 2 * depth)
                cr = u < mr / tot
                R.advance(rr[cr], REFLECT, depth, hitp[cr], refl[cr], tot[cr] * fac_in[cr], obj, side, cfg)
                R.advance(rr[~cr], TRANSMIT, depth, hitp[~cr], None, tot[~cr] * fac_in[~cr], obj, side, cfg)
            else:
                okr = mr > 0
                new = R.grow(rr[okr])
                okt = mt > 0
                R.alive[rr[~okt]] = False
                R.advance(rr[okt], TRANSMIT, depth, hitp[okt], None, mt[okt] * fac_in[okt], obj, side, cfg)
                R.advance(new, REFLECT, depth, hitp[okr], refl[okr], mr[okr] * fac_in[okr], obj, side, cfg)
    stats["rows"] = len(R)
    cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0, int))
    return TraceLog(tx_pos, rx_pos, freq, launch, R.root, R.seed, R.hist_prim, R.hist_side,
                    R.hist_branch, R.hist_t, R.hist_gd, R.hist_rr, cat(caps_row), cat(caps_depth),
                    cat(caps_rx), n0, dict(stats))


# --------------------------------------------------------------------------
# evaluation pass


@dataclass
class PathRecord:
    """One captured contribution: events, segments and synthesis factors."""

    rx: int
    events: list
    segments: list
    tau: float
    a: complex
    weight: float
    amplitude: complex

    @property
    def depth(self) -> int:
        return len(self.events)


def evaluate_trace(log: TraceLog, scene: Scene, cfg: TracerConfig, tape=None,
                   pose_grad: bool = False, tx_amp: float = 1.0, rx_gain=None,
                   objs=None, return_paths: bool = False):
    """Coherent sum of captured contributions per receiver.

    Returns ``(re, im)`` arrays of shape (n_rx,) (tape variables when a tape
    is given) and optionally the list of :class:`PathRecord`.
    """
    objs = _compile(scene, cfg) if objs is None else objs
    n_rx = len(log.rx_pos)
    frames = {o.index: o.frame(tape, pose_grad) for o in objs}
    rc = cfg.capture_radius
    k0 = 2.0 * math.pi * log.freq / C0
    parts_re, parts_im, parts_rx = [], [], []
    records = []
    if log.cap_row.size == 0:
        z = np.zeros(n_rx)
        return (z, z.copy(), records) if return_paths else (z, z.copy())
    sig_prim = np.where(np.arange(log.hist_prim.shape[1])[None, :] < log.cap_depth[:, None],
                        log.hist_prim[log.cap_row], -2)
    sig_side = np.where(sig_prim >= 0, log.hist_side[log.cap_row], 0)
    sig_br = np.where(sig_prim >= 0, log.hist_branch[log.cap_row], 0)
    sig = np.concatenate([sig_prim, sig_side, sig_br], axis=1)
    uniq, inv = np.unique(sig, axis=0, return_inverse=True)
    inv = np.asarray(inv).reshape(-1)
    for gi in range(len(uniq)):
        sel = np.nonzero(inv == gi)[0]
        rows = log.cap_row[sel]
        depth = int(log.cap_depth[sel[0]])
        rxi = log.cap_rx[sel]
        nr = rows.size
        root = log.root[rows]
        d = log.launch.dirs[root]
        p = np.repeat(log.tx_pos[None], nr, axis=0)
        if tape is not None:
            # constant leaf so network queries downstream register on the tape
            p = tape.leaf(p)
        c_re, c_im = np.ones(nr), None
        tau = np.zeros(nr)
        ev_info = []
        seg_lens = []
        for j in range(depth):
            obj = objs[int(log.hist_prim[rows[0], j])]
            side = int(log.hist_side[rows[0], j])
            br = int(log.hist_branch[rows[0], j])
            fr = frames[obj.index]
            gd = log.hist_gd[rows, j]
            q = F.add(p, F.mul(d, log.hist_t[rows, j][:, None]))
            s_val = obj.dist(q, fr)
            hit = F.sub(q, F.mul(d, F.expand_dims(F.div(s_val, gd), -1)))
            feats = obj.eval(hit, fr)[1]
            seg = F.norm(F.sub(hit, p), axis=-1)
            tau = F.add(tau, seg)
            terms = _surface_terms(obj, hit, d, side, log.freq, fr, feats, cfg)
            fac_re, fac_im = _branch_factor(terms, br, cfg.branching)
            fac_re = F.mul(fac_re, log.hist_rr[rows, j])
            if fac_im is not None:
                fac_im = F.mul(fac_im, log.hist_rr[rows, j])
            if side == INSIDE and obj.neural:
                att = _interior(obj, p, hit, d, log.freq, fr, nr)
                fac_re = F.mul(fac_re, att)
                fac_im = None if fac_im is None else F.mul(fac_im, att)
            c_re, c_im = _cmul(c_re, c_im, fac_re, fac_im)
            if return_paths:
                ev_info.append((obj.id, side, br, F.value(hit), F.value(terms.normal),
                                F.value(fac_re), None if fac_im is None else F.value(fac_im)))
                seg_lens.append(F.value(seg))
            if br == REFLECT:
                d = terms.refl
            p = hit
        rx = log.rx_pos[rxi]
        v = F.sub(rx, p)
        u_seg = F.sum(F.mul(v, d), axis=-1)
        dseg = F.norm(v, axis=-1)
        b2 = F.relu(F.sub(F.mul(dseg, dseg), F.mul(u_seg, u_seg)))
        U = F.add(tau, u_seg)
        # unfolded source distance: exact for mirror images and free space
        D = F.sqrt(F.add(F.mul(U, U), b2))
        w = F.div(F.mul(_kernel(b2, rc), F.mul(D, U)), log.launch.n_pdf[root])
        gains = log.launch.gain[root] * tx_amp
        if rx_gain is not None:
            arrive = -np.asarray(F.value(d), float)
            gains = gains * np.array([rx_gain[r](arrive[i]) for i, r in enumerate(rxi)]) \
                if callable(rx_gain[0]) else gains * np.asarray(rx_gain)[rxi]
        mag = F.div(F.mul(w, gains), D)
        ph = F.mul(D, k0)
        cs, sn = F.cos(ph), F.sin(ph)
        a_re = F.mul(mag, c_re)
        if c_im is None:
            out_re = F.mul(a_re, cs)
            out_im = F.neg(F.mul(a_re, sn))
        else:
            a_im = F.mul(mag, c_im)
            out_re = F.add(F.mul(a_re, cs), F.mul(a_im, sn))
            out_im = F.sub(F.mul(a_im, cs), F.mul(a_re, sn))
        parts_re.append(out_re)
        parts_im.append(out_im)
        parts_rx.append(rxi)
        if return_paths:
            records.extend(_records(ev_info, seg_lens, rxi, F.value(c_re),
                                    None if c_im is None else F.value(c_im), F.value(w),
                                    F.value(D), F.value(D) - F.value(tau), F.value(out_re),
                                    F.value(out_im)))
    all_rx = np.concatenate(parts_rx)
    re = F.segment_sum(F.concat(parts_re, axis=0), all_rx, n_rx)
    im = F.segment_sum(F.concat(parts_im, axis=0), all_rx, n_rx)
    return (re, im, records) if return_paths else (re, im)


def _records(ev_info, seg_lens, rxi, c_re, c_im, w, D, dseg, out_re, out_im):
    out = []
    for i in range(len(rxi)):
        events = []
        for (pid, side, br, hit, nrm, fre, fim) in ev_info:
            events.append({"primitive": pid, "side": "inside" if side else "outside",
                           "branch": "reflect" if br == REFLECT else "transmit",
                           "point": hit[i].copy(), "normal": nrm[i].copy(),
                           "factor": complex(fre[i], 0.0 if fim is None else fim[i])})
        segs = [float(s[i]) for s in seg_lens] + [float(dseg[i])]
        a = complex(c_re[i], 0.0 if c_im is None else c_im[i])
        out.append(PathRecord(int(rxi[i]), events, segs, float(D[i]), a, float(w[i]),
                              complex(out_re[i], out_im[i])))
    return out


# --------------------------------------------------------------------------
# public prediction API


@dataclass
class ChannelPrediction:
    freqs: np.ndarray
    amplitudes: np.ndarray       # complex, one per frequency
    path_count: int
    paths: list | None = None

    @property
    def flagged(self) -> bool:
        return self.path_count == 0

    def power_db(self) -> np.ndarray:
        return power_db(self.amplitudes)


def power_db(amp, floor: float = POWER_FLOOR_DB):
    """20 log10 |amp| clamped at ``floor`` (numpy)."""
    a = np.abs(np.asarray(amp))
    with np.errstate(divide="ignore"):
        return np.maximum(20.0 * np.log10(a), floor)


def path_signal(path: PathRecord, freq: float, tx_amplitude: float = 1.0) -> complex:
    """tx_amplitude * a * weight / tau * exp(-j 2 pi f tau / c)."""
    if not path.tau > 0:
        raise ValueError("path length must be positive")
    return tx_amplitude * path.a * path.weight / path.tau * np.exp(-2j * np.pi * freq * path.tau / C0)


def _rx_gain_fns(patterns):
    if all(p.isotropic for p in patterns):
        return None
    return [lambda v, p=p: float(antenna_weight(p, v)) for p in patterns]


def predict_many(scene: Scene, tx: Radio, rx_positions, cfg: TracerConfig, freq: float | None = None,
                 tape=None, pose_grad: bool = False, rx_patterns=None, seeds=None,
                 return_paths: bool = False, frame=None):
    """Complex amplitudes at many receivers from one trace (or one per receiver when tracing backward).

    Returns ``(re, im)`` (tape variables with a tape), plus the capture count
    per receiver, plus path records when requested.
    """
    freq = scene.frequencies[0] if freq is None else float(freq)
    rx_positions = np.atleast_2d(np.asarray(rx_positions, float))
    n_rx = len(rx_positions)
    objs = _compile(scene, cfg)
    if cfg.backward:
        res_re, res_im, counts, paths = [], [], np.zeros(n_rx, int), []
        pats = rx_patterns or [None] * n_rx
        for i, rx in enumerate(rx_positions):
            src = Radio("_rx", "tx", tuple(rx), pats[i] if pats[i] is not None else tx.pattern.__class__())
            log = trace(scene, rx, tx.position, cfg, freq, src, seeds, frame, objs)
            gain = _rx_gain_fns([tx.pattern])
            out = evaluate_trace(log, scene, cfg, tape, pose_grad, tx.amplitude, gain, objs, return_paths)
            res_re.append(out[0])
            res_im.append(out[1])
            counts[i] = log.cap_row.size
            if return_paths:
                paths.extend(out[2])
        re = F.concat(res_re, axis=0)
        im = F.concat(res_im, axis=0)
        return (re, im, counts, paths) if return_paths else (re, im, counts)
    log = trace(scene, tx.position, rx_positions, cfg, freq, tx, seeds, frame, objs)
    gain = _rx_gain_fns(rx_patterns) if rx_patterns else None
    out = evaluate_trace(log, scene, cfg, tape, pose_grad, tx.amplitude, gain, objs, return_paths)
    counts = np.bincount(log.cap_rx, minlength=n_rx)
    return (out[0], out[1], counts, out[2]) if return_paths else (out[0], out[1], counts)


def predict_channel(scene: Scene, tx: Radio, rx: Radio, cfg: TracerConfig, freqs=None,
                    return_paths: bool = False, frame=None) -> ChannelPrediction:
    """Complex received amplitude at ``rx`` for each requested frequency."""
    if not scene.contains(tx.pos) or not scene.contains(rx.pos):
        raise ValueError("tx and rx must lie inside scene bounds")
    freqs = np.asarray(scene.frequencies if freqs is None else freqs, float)
    amps = []
    count = 0
    paths = [] if return_paths else None
    for f in freqs:
        out = predict_many(scene, tx, rx.pos, cfg, f, rx_patterns=[rx.pattern],
                           return_paths=return_paths, frame=frame)
        amps.append(complex(out[0][0], out[1][0]))
        count = int(out[2][0])
        if return_paths:
            paths.extend(out[3])
    return ChannelPrediction(freqs, np.asarray(amps), count, paths)


def coverage_map(scene: Scene, tx: Radio, grid_points, cfg: TracerConfig, freq=None) -> np.ndarray:
    """Received power (dB) at each grid point, one trace for the whole grid."""
    pts = np.asarray(grid_points, float)
    shape = pts.shape[:-1]
    flat = pts.reshape(-1, 3)
    for p in flat:
        if not scene.contains(p):
            raise ValueError("grid point outside scene bounds")
    re, im, _ = predict_many(scene, tx, flat, cfg, freq)
    return power_db(re + 1j * im).reshape(shape)


def enumerate_branches(scene: Scene, tx: Radio, rx_positions, cfg: TracerConfig, freq=None):
    """Exact expectation over branch choices (split tracing) for the same launch set."""
    from dataclasses import replace
    split = replace(cfg, branching="split", rr_threshold=0.0)
    re, im, _ = predict_many(scene, tx, rx_positions, split, freq)
    return re + 1j * im


def mc_replicates(scene: Scene, tx: Radio, rx_position, cfg: TracerConfig, seeds, freq=None):
    """Per-seed Monte Carlo predictions sharing one launch set, traced in one batch."""
    freq = scene.frequencies[0] if freq is None else float(freq)
    seeds = np.asarray(seeds, np.int64)
    objs = _compile(scene, cfg)
    log = trace(scene, tx.position, np.atleast_2d(rx_position), cfg, freq, tx, seeds, None, objs)
    # one bucket per seed: captures of row r go to the index of its seed
    order = {int(s): i for i, s in enumerate(seeds)}
    bucket = np.array([order[int(s)] for s in log.row_seed[log.cap_row]], dtype=int)
    log.rx_pos = np.repeat(log.rx_pos[:1], len(seeds), axis=0)
    log.cap_rx = bucket
    re, im = evaluate_trace(log, scene, cfg, None, False, tx.amplitude, None, objs)
    return np.asarray(re) + 1j * np.asarray(im)
