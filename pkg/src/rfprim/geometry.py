"""Signed distance fields, finite-difference normals and sphere tracing.

Distances are in meters, negative inside.  All field evaluations take a batch
of points ``p`` with shape (n, 3) and accept either numpy arrays or tape
variables, so the same code drives tracing and gradient replay.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable

import numpy as np

from .autodiff import F, MlpConfig, MlpParams, init_mlp, mlp_forward, pe_encode

EPS_HIT = 0.01
EPS_FD = 1e-4
_TINY = 1e-30

_AXES = np.eye(3)


def _safe_norm(x):
    return F.sqrt(F.add(F.sum(F.mul(x, x), axis=-1), _TINY))


class AnalyticSdf:
    """Closed-form field; ``bounded`` is False for infinite solids."""

    feature_dim = 0
    bounded = True

    def distance(self, p):
        raise NotImplementedError

    def evaluate(self, p, tape=None, key=None):
        d = self.distance(p)
        return d, np.zeros((np.shape(F.value(p))[0], 0))

    def safe_distance(self, p):
        return self.distance(p)

    def bounding_sphere(self):
        return None


@dataclass(frozen=True)
class Sphere(AnalyticSdf):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def distance(self, p):
        return F.sub(_safe_norm(F.sub(p, np.asarray(self.center, float))), self.radius)

    def bounding_sphere(self):
        return np.asarray(self.center, float), float(self.radius)

    def intersect(self, o, d):
        """Analytic ray/sphere entry and exit distances (nan on miss)."""
        oc = np.atleast_2d(o) - np.asarray(self.center, float)
        d = np.atleast_2d(d)
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius ** 2
        disc = b * b - c
        s = np.sqrt(np.where(disc >= 0, disc, np.nan))
        return -b - s, -b + s


@dataclass(frozen=True)
class Box(AnalyticSdf):
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise ValueError("box half-extents must be positive")

    def distance(self, p):
        q = F.sub(F.absolute(F.sub(p, np.asarray(self.center, float))),
                  np.asarray(self.half_extents, float))
        outside = _safe_norm(F.maximum(q, 0.0))
        inner = F.minimum(F.maximum(F.maximum(q[:, 0], q[:, 1]), q[:, 2]), 0.0)
        # _safe_norm adds 1e-15 m inside; negligible against EPS_HIT
        return F.add(outside, inner)

    def bounding_sphere(self):
        return np.asarray(self.center, float), float(np.linalg.norm(self.half_extents))

    def intersect(self, o, d):
        """Slab test: entry/exit distances (nan on miss)."""
        o = np.atleast_2d(o)
        d = np.atleast_2d(d)
        c = np.asarray(self.center, float)
        h = np.asarray(self.half_extents, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (c - h - o) * inv
            t2 = (c + h - o) * inv
        lo = np.nanmax(np.minimum(t1, t2), axis=1)
        hi = np.nanmin(np.maximum(t1, t2), axis=1)
        miss = lo > hi
        return np.where(miss, np.nan, lo), np.where(miss, np.nan, hi)


@dataclass(frozen=True)
class Plane(AnalyticSdf):
    """Half-space solid ``{p : n.p < offset}``; positive on the normal side."""

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0
    bounded = False

    def __post_init__(self):
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")

    def distance(self, p):
        return F.sub(F.matmul(p, np.asarray(self.normal, float)), self.offset)


@dataclass(frozen=True)
class Union(AnalyticSdf):
    parts: tuple = ()

    def __post_init__(self):
        if not self.parts:
            raise ValueError("union needs at least one part")

    @property
    def bounded(self):
        return all(part.bounded for part in self.parts)

    def distance(self, p):
        d = self.parts[0].distance(p)
        for part in self.parts[1:]:
            d = F.minimum(d, part.distance(p))
        return d


@dataclass
class NeuralSdf:
    """Structure network inside a bounding sphere (object frame).

    The network sees ``pe_encode((p - center) / radius)`` and its first output
    is the distance in units of ``radius``; the remaining outputs are local
    features.  Outside the bounding sphere the field continues as the distance
    to the sphere plus the network value at the radially projected point,
    which keeps it continuous across the boundary.
    """

    params: MlpParams
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0
    num_freqs: int = 6
    bounded = True

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        if self.params.in_dim != 3 + 6 * self.num_freqs:
            raise ValueError("structure network input width does not match encoding")

    @property
    def feature_dim(self) -> int:
        return self.params.out_dim - 1

    def bounding_sphere(self):
        return self.center, float(self.radius)

    def evaluate(self, p, tape=None, key: Hashable = None):
        rel = F.sub(p, self.center)
        r = _safe_norm(rel)
        scale = F.minimum(F.div(self.radius, r), 1.0)
        x = F.mul(rel, F.expand_dims(F.div(scale, self.radius), -1))
        out = mlp_forward(self.params, pe_encode(x, self.num_freqs), tape, key)
        d = F.add(F.mul(out[:, 0], self.radius), F.relu(F.sub(r, self.radius)))
        return d, out[:, 1:]

    def distance(self, p, tape=None, key=None):
        return self.evaluate(p, tape, key)[0]

    def safe_distance(self, p):
        """Step bound for tracing: sphere distance outside, network inside.

        Outside the bound the step overshoots by ``EPS_HIT`` so the iterate
        always enters the sphere instead of stalling on its boundary.
        """
        p = np.asarray(p, float)
        r = np.linalg.norm(p - self.center, axis=1)
        out = r - self.radius + EPS_HIT
        inside = r <= self.radius
        if np.any(inside):
            out[inside] = self.distance(p[inside])
        return out


def _hidden_features(params: MlpParams, x: np.ndarray) -> np.ndarray:
    h = x
    for i, (w, b) in enumerate(zip(params.weights[:-1], params.biases[:-1])):
        if i in params.skips:
            h = np.concatenate([h, x], axis=-1)
        h = np.maximum(h @ w + b, 0.0)
    return h


def geometric_init(rng: np.random.Generator, radius: float, *, init_radius: float | None = None,
                   hidden_layers: int = 4, width: int = 32, feature_dim: int = 16,
                   num_freqs: int = 6, skips: tuple = (2,), calibrate: bool = True) -> NeuralSdf:
    """Structure network whose zero level set approximates a sphere.

    Hidden layers are Kaiming-uniform with the encoded (non-raw) input columns
    zeroed, the distance head follows the sphere initialisation of Atzmon &
    Lipman.  With ``calibrate`` the distance row is then refit by least
    squares to the exact sphere distance over the unit ball.
    """
    init_radius = 0.75 * radius if init_radius is None else init_radius
    in_dim = 3 + 6 * num_freqs
    cfg = MlpConfig(in_dim, 1 + feature_dim, hidden_layers, width, tuple(skips), "linear")
    params = init_mlp(cfg, rng)
    ws, bs = params.weights, params.biases
    ws[0][3:, :] = 0.0
    for s in params.skips:
        ws[s][-(in_dim - 3):, :] = 0.0
    ws[-1][:, 0] = rng.normal(np.sqrt(np.pi) / np.sqrt(width), 1e-4, size=width)
    bs[-1][0] = -init_radius / radius
    sdf = NeuralSdf(MlpParams(ws, bs, params.skips, "linear"), np.zeros(3), radius, num_freqs)
    if calibrate:
        # least-squares refit of the distance row onto the random hidden basis
        x = uniform_ball(rng, 4096, np.zeros(3), 1.0)
        h = _hidden_features(sdf.params, pe_encode(x, num_freqs))
        a = np.concatenate([h, np.ones((len(h), 1))], axis=1)
        target = np.linalg.norm(x, axis=1) - init_radius / radius
        sol = np.linalg.solve(a.T @ a + 1e-6 * np.eye(a.shape[1]), a.T @ target)
        ws[-1][:, 0] = sol[:-1]
        bs[-1][0] = sol[-1]
        sdf = NeuralSdf(MlpParams(ws, bs, params.skips, "linear"), np.zeros(3), radius, num_freqs)
    return sdf


# --------------------------------------------------------------------------
# generic field helpers

def dist_fn(field) -> Callable:
    return field.distance


def sdf_eval(field, p):
    """(distance, features) at points ``p`` (n, 3); analytic fields give no features."""
    p = np.atleast_2d(np.asarray(p, float))
    return field.evaluate(p)


def fd_gradient(dist: Callable, p, eps: float = EPS_FD):
    """Central-difference gradient of ``dist`` at ``p`` (n, 3); tape-aware."""
    n = np.shape(F.value(p))[0]
    pts = [F.add(p, s * eps * _AXES[k]) for k in range(3) for s in (1.0, -1.0)]
    vals = dist(F.concat(pts, axis=0))
    cols = [F.div(F.sub(vals[(2 * k) * n:(2 * k + 1) * n], vals[(2 * k + 1) * n:(2 * k + 2) * n]),
                  2.0 * eps) for k in range(3)]
    return F.stack(cols, axis=-1)


def sdf_normal(field, p, eps: float = EPS_FD):
    """Unit surface normal(s) by central differences."""
    single = np.ndim(p) == 1
    p2 = np.atleast_2d(np.asarray(p, float))
    g = fd_gradient(dist_fn(field), p2, eps)
    mag = np.linalg.norm(g, axis=1)
    if np.any(mag < 1e-12):
        raise ValueError("degenerate surface point: zero-magnitude gradient")
    n = g / mag[:, None]
    return n[0] if single else n


def refine_root(dist: Callable, o, d, t_lo, t_hi, iters: int = 60, tol: float = 1e-13):
    """Illinois regula falsi for a bracketed sign change of dist(o + t d).

    Returns (t, residual).  ``t_lo``/``t_hi`` must bracket a sign change.
    """
    o = np.asarray(o, float)
    d = np.asarray(d, float)
    a = np.array(t_lo, float, copy=True)
    b = np.array(t_hi, float, copy=True)
    fa = np.asarray(dist(o + a[:, None] * d), float)
    fb = np.asarray(dist(o + b[:, None] * d), float)
    t = np.where(np.abs(fa) < np.abs(fb), a, b)
    ft = np.where(np.abs(fa) < np.abs(fb), fa, fb)
    side = np.zeros(a.shape, int)
    act = np.abs(ft) > tol
    for it in range(iters):
        idx = np.nonzero(act)[0]
        if idx.size == 0:
            break
        A, B, FA, FB = a[idx], b[idx], fa[idx], fb[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            c = (A * FB - B * FA) / (FB - FA)
        bad = ~np.isfinite(c) | (c <= np.minimum(A, B)) | (c >= np.maximum(A, B))
        if it % 8 == 7:
            bad[:] = True  # periodic bisection guards slow one-sided convergence
        c = np.where(bad, 0.5 * (A + B), c)
        fc = np.asarray(dist(o[idx] + c[:, None] * d[idx]), float)
        t[idx] = c
        ft[idx] = fc
        same = np.sign(fc) == np.sign(FA)
        sd = side[idx]
        a_new = np.where(same, c, A)
        fa_new = np.where(same, fc, np.where(sd == 1, FA * 0.5, FA))
        b_new = np.where(same, B, c)
        fb_new = np.where(same, np.where(sd == -1, FB * 0.5, FB), fc)
        a[idx], fa[idx], b[idx], fb[idx] = a_new, fa_new, b_new, fb_new
        side[idx] = np.where(same, -1, 1)
        act[idx] = (np.abs(fc) > tol) & (np.abs(b_new - a_new) > 1e-15)
    return t, ft


@dataclass
class HitResult:
    hit: bool
    t: float
    point: np.ndarray
    iterations: int
    residual: float
    clamped: int = 0


def sphere_trace(field, origin, direction, eps_hit: float = EPS_HIT, max_iter: int = 128,
                 max_dist: float = 100.0, refine: bool = True) -> HitResult:
    """March ``p <- p + dir * S(p)`` until ``|S| < eps_hit`` or the budget runs out.

    Steps on neural fields are clamped to ``[eps_hit/2, radius]``; if a step
    lands inside the object the sign change is bracketed and refined.  With
    ``refine`` the reported hit is the zero crossing along the ray.
    """
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be unit length")
    step_fn = getattr(field, "safe_distance", field.distance)

    def S(t):
        return float(step_fn((o + t * d)[None])[0])

    neural = isinstance(field, NeuralSdf)
    max_step = field.radius if neural else np.inf
    t = 0.0
    s = S(t)
    if s < 0:
        raise ValueError("ray starts inside object")
    clamped = 0
    prev_t = None
    for i in range(max_iter + 1):
        if abs(s) < eps_hit or s < 0:
            if s < 0 and prev_t is not None:
                tr, res = refine_root(field.distance, o[None], d[None], np.array([prev_t]), np.array([t]))
                return HitResult(True, float(tr[0]), o + tr[0] * d, i, abs(float(res[0])), clamped)
            if refine:
                # bracket the crossing ahead of the iterate; on a grazing ray it can
                # lie up to ~sqrt(2 R eps) further, so keep stepping while S < eps
                lo = t
                for _ in range(max_iter):
                    t2 = lo + min(max(S(lo), eps_hit * 0.5), max_step)
                    s2 = S(t2)
                    if s2 < 0:
                        tr, res = refine_root(field.distance, o[None], d[None],
                                              np.array([lo]), np.array([t2]))
                        return HitResult(True, float(tr[0]), o + tr[0] * d, i, abs(float(res[0])), clamped)
                    if s2 >= eps_hit or t2 > max_dist:
                        break  # near miss: keep the closest-approach hit
                    lo = t2
            return HitResult(True, t, o + t * d, i, abs(s), clamped)
        if i == max_iter or t > max_dist:
            break
        step = s
        if neural and (s < eps_hit / 2 or s > max_step):
            step = min(max(s, eps_hit / 2), max_step)
            clamped += 1
        prev_t = t
        t += step
        s = S(t)
    return HitResult(False, t, o + t * d, i, abs(s), clamped)


@dataclass
class InteriorChord:
    exit: np.ndarray
    chord: float
    samples: np.ndarray  # midpoints of equal sub-intervals
    step: float          # length represented by each sample


def interior_march(field, entry, direction, step: float = 0.02, max_dist: float = 100.0,
                   n_samples: int | None = None, eps_hit: float = EPS_HIT) -> InteriorChord:
    """Fixed-step march through the object's interior to the exit crossing.

    The exit is refined by regula falsi.  Samples are the midpoints of
    ``n_samples`` equal sub-intervals of the chord (default ``ceil(chord/step)``).
    """
    o = np.asarray(entry, float)
    d = np.asarray(direction, float)
    dist = field.distance

    def S(t):
        return float(dist((o + t * d)[None])[0])

    lo = 1e-9
    if S(lo) >= 0:
        # grazing contact: no interior to speak of
        return InteriorChord(o.copy(), 0.0, np.empty((0, 3)), 0.0)
    t = lo
    while True:
        t_next = t + step
        if t_next > max_dist:
            raise ValueError("unbounded interior: no exit found within distance budget")
        if S(t_next) >= 0:
            break
        t = t_next
    tr, _ = refine_root(dist, o[None], d[None], np.array([t]), np.array([t_next]))
    chord = float(tr[0])
    k = max(1, int(np.ceil(chord / step))) if n_samples is None else int(n_samples)
    dt = chord / k
    samples = o + ((np.arange(k) + 0.5) * dt)[:, None] * d
    exit_pt = o + chord * d
    return InteriorChord(exit_pt, chord, samples, dt)


# --------------------------------------------------------------------------
# regularisers

def eikonal_residual(dist: Callable, samples, eps: float = EPS_FD):
    """Mean of (|grad S| - 1)^2 over samples (tape-aware)."""
    if np.shape(F.value(samples))[0] == 0:
        raise ValueError("eikonal residual needs at least one sample")
    g = fd_gradient(dist, samples, eps)
    return F.mean(F.power(F.sub(F.norm(g, axis=-1), 1.0), 2))


def laplacian_residual(dist: Callable, samples, h: float = 0.02):
    """Mean squared 7-point discrete Laplacian of S over samples."""
    n = np.shape(F.value(samples))[0]
    if n == 0:
        raise ValueError("laplacian residual needs at least one sample")
    pts = [samples] + [F.add(samples, s * h * _AXES[k]) for k in range(3) for s in (1.0, -1.0)]
    v = dist(F.concat(pts, axis=0))
    acc = F.mul(v[0:n], -6.0)
    for j in range(1, 7):
        acc = F.add(acc, v[j * n:(j + 1) * n])
    lap = F.div(acc, h * h)
    return F.mean(F.mul(lap, lap))


def mean_abs_eikonal(dist: Callable, samples, eps: float = EPS_FD) -> float:
    g = fd_gradient(dist, np.asarray(samples, float), eps)
    return float(np.mean(np.abs(np.linalg.norm(g, axis=1) - 1.0)))


def uniform_ball(rng: np.random.Generator, n: int, center, radius: float) -> np.ndarray:
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * rng.uniform(size=n) ** (1.0 / 3.0)
    return np.asarray(center, float) + u * r[:, None]


def surface_points(sdf, rng: np.random.Generator, n: int, eps_hit: float = EPS_HIT,
                   max_iter: int = 128) -> np.ndarray:
    """Zero-level-set points found by tracing random chords of the bounding sphere."""
    c, R = sdf.bounding_sphere()
    pts = []
    tries = 0
    while len(pts) < n and tries < 20 * n:
        tries += 1
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        target = c + 0.5 * R * rng.uniform(-1, 1, size=3)
        o = c + 1.5 * R * u
        d = target - o
        d /= np.linalg.norm(d)
        h = sphere_trace(sdf, o, d, eps_hit, max_iter, max_dist=4 * R)
        if h.hit:
            pts.append(h.point)
    return np.asarray(pts).reshape(-1, 3)


def regularizer_samples(sdf, rng: np.random.Generator, n: int, hit_points=None,
                        sigma: float = 0.02) -> np.ndarray:
    """Half uniform in the bounding ball, half jittered surface points."""
    c, R = sdf.bounding_sphere()
    n_u = n // 2
    ball = uniform_ball(rng, n_u, c, R)
    if hit_points is None or len(hit_points) == 0:
        hit_points = surface_points(sdf, rng, max(8, (n - n_u) // 4))
    if len(hit_points) == 0:
        return uniform_ball(rng, n, c, R)
    pick = np.asarray(hit_points)[rng.integers(0, len(hit_points), size=n - n_u)]
    near = pick + rng.normal(scale=sigma, size=pick.shape)
    return np.concatenate([ball, near], axis=0)
