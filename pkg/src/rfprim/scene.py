"""Scene composition: rigid poses, radios, antenna patterns, placed primitives, edits."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Union as TUnion

import numpy as np

from .autodiff import MlpParams, container
from .geometry import AnalyticSdf, NeuralSdf
from .materials import ClassicalMaterial, NeuralMaterial

# --------------------------------------------------------------------------
# rotations


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, float)
    n = np.linalg.norm(q)
    if n == 0 or not np.isfinite(n):
        raise ValueError("invalid quaternion")
    return q / n


def quat_mul(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_from_rotvec(v) -> np.ndarray:
    v = np.asarray(v, float)
    ang = np.linalg.norm(v)
    if ang < 1e-15:
        return quat_normalize(np.concatenate([[1.0], 0.5 * v]))
    return quat_from_axis_angle(v / ang, ang)


@dataclass(frozen=True)
class Pose:
    """Rigid transform object -> world: ``x_world = R x_obj + t``."""

    quat: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.quat, float)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("pose quaternion must be unit-norm (w, x, y, z)")
        t = np.asarray(self.translation, float)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError("pose translation must be a finite 3-vector")
        object.__setattr__(self, "quat", tuple(float(v) for v in q))
        object.__setattr__(self, "translation", tuple(float(v) for v in t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation)

    def is_identity(self) -> bool:
        return self == Pose()

    def compose(self, other: "Pose") -> "Pose":
        """``self`` applied after ``other``."""
        q = quat_normalize(quat_mul(self.quat, other.quat))
        return Pose(tuple(q), tuple(self.rotation @ other.t + self.t))

    def retract(self, dtheta, dt) -> "Pose":
        """Tangent-space update: rotate by ``exp([dtheta]x)`` (object side), translate by ``dt``."""
        q = quat_normalize(quat_mul(self.quat, quat_from_rotvec(dtheta)))
        return Pose(tuple(q), tuple(self.t + np.asarray(dt, float)))


def world_to_object(pose: Pose, origin, direction):
    """Points/directions (n, 3) or (3,) from world to object frame."""
    r = pose.rotation
    o = (np.asarray(origin, float) - pose.t) @ r
    d = np.asarray(direction, float) @ r
    return o, d


def object_to_world(pose: Pose, origin, direction):
    r = pose.rotation
    o = np.asarray(origin, float) @ r.T + pose.t
    d = np.asarray(direction, float) @ r.T
    return o, d


# --------------------------------------------------------------------------
# radios and antennas


@dataclass(frozen=True)
class AntennaPattern:
    """Isotropic (``gains is None``) or a tabulated amplitude-gain grid.

    The grid is indexed ``gains[i_el, i_az]`` with azimuth nodes spanning
    [-pi, pi] and elevation nodes spanning [-pi/2, pi/2], both inclusive and
    uniformly spaced (5 degree default), in world coordinates.
    """

    gains: np.ndarray | None = None
    name: str = "isotropic"

    def __post_init__(self):
        if self.gains is not None:
            g = np.asarray(self.gains, float)
            if g.ndim != 2 or min(g.shape) < 2 or np.any(g < 0) or not np.all(np.isfinite(g)):
                raise ValueError("antenna gain grid must be finite, non-negative, at least 2x2")
            object.__setattr__(self, "gains", g)

    @property
    def isotropic(self) -> bool:
        return self.gains is None

    def __eq__(self, other):
        if not isinstance(other, AntennaPattern):
            return NotImplemented
        if self.isotropic or other.isotropic:
            return self.isotropic == other.isotropic and self.name == other.name
        return self.name == other.name and np.array_equal(self.gains, other.gains)

    def __hash__(self):
        return hash(self.name)


ISOTROPIC = AntennaPattern()


def lobe_pattern(boresight=(0.0, 0.0, 1.0), peak: float = 10.0, floor: float = 0.1,
                 exponent: float = 4.0, step_deg: float = 5.0, name: str = "lobe") -> AntennaPattern:
    """cos^k lobe around ``boresight`` sampled on the grid."""
    b = np.asarray(boresight, float)
    b = b / np.linalg.norm(b)
    az, el = pattern_grid(step_deg)
    A, E = np.meshgrid(az, el)
    d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
    c = np.clip(d @ b, 0.0, 1.0)
    return AntennaPattern(floor + (peak - floor) * c ** exponent, name)


def pattern_grid(step_deg: float = 5.0):
    n_az = int(round(360.0 / step_deg)) + 1
    n_el = int(round(180.0 / step_deg)) + 1
    return np.linspace(-np.pi, np.pi, n_az), np.linspace(-np.pi / 2, np.pi / 2, n_el)


def antenna_weight(pattern: AntennaPattern, direction) -> np.ndarray | float:
    """Bilinear interpolation of the gain grid at unit direction(s)."""
    d = np.asarray(direction, float)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    if pattern.isotropic:
        out = np.ones(len(d))
    else:
        g = pattern.gains
        n_el, n_az = g.shape
        az = np.arctan2(d[:, 1], d[:, 0])
        el = np.arcsin(np.clip(d[:, 2], -1.0, 1.0))
        fa = (az + np.pi) / (2 * np.pi) * (n_az - 1)
        fe = (el + np.pi / 2) / np.pi * (n_el - 1)
        ia = np.clip(np.floor(fa).astype(int), 0, n_az - 2)
        ie = np.clip(np.floor(fe).astype(int), 0, n_el - 2)
        ua = np.clip(fa - ia, 0.0, 1.0)
        ue = np.clip(fe - ie, 0.0, 1.0)
        out = ((1 - ue) * ((1 - ua) * g[ie, ia] + ua * g[ie, ia + 1])
               + ue * ((1 - ua) * g[ie + 1, ia] + ua * g[ie + 1, ia + 1]))
    return float(out[0]) if single else out


@dataclass(frozen=True)
class Radio:
    id: str
    role: str
    position: tuple
    pattern: AntennaPattern = ISOTROPIC
    amplitude: float = 1.0

    def __post_init__(self):
        if self.role not in ("tx", "rx"):
            raise ValueError(f"radio role must be 'tx' or 'rx', got {self.role!r}")
        p = np.asarray(self.position, float)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ValueError("radio position must be a finite 3-vector")
        if self.role == "tx" and not self.amplitude > 0:
            raise ValueError("transmit amplitude must be positive")
        object.__setattr__(self, "position", tuple(float(v) for v in p))

    @property
    def pos(self) -> np.ndarray:
        return np.asarray(self.position)

    def at(self, position) -> "Radio":
        return replace(self, position=tuple(float(v) for v in position))


# --------------------------------------------------------------------------
# primitives


@dataclass
class NeuralPrimitive:
    """Learnable object: structure field + material network + metadata."""

    id: str
    sdf: NeuralSdf
    material: NeuralMaterial
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sdf.feature_dim != self.material.feature_dim:
            raise ValueError("structure features and material inputs disagree")

    def param_arrays(self) -> dict:
        out = {("sdf", k): v for k, v in self.sdf.params.named().items()}
        out.update({("mat", k): v for k, v in self.material.params.named().items()})
        return out

    def with_params(self, arrays: dict) -> "NeuralPrimitive":
        s = {k[1]: v for k, v in arrays.items() if k[0] == "sdf"}
        m = {k[1]: v for k, v in arrays.items() if k[0] == "mat"}
        sdf = replace(self.sdf, params=self.sdf.params.replace(s)) if s else self.sdf
        mat = replace(self.material, params=self.material.params.replace(m)) if m else self.material
        return NeuralPrimitive(self.id, sdf, mat, dict(self.meta))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.param_arrays().items()):
            h.update(repr(k).encode())
            h.update(np.ascontiguousarray(v, "<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class AnalyticBody:
    """Closed-form solid with a classical material (room shell, baselines, oracles)."""

    sdf: AnalyticSdf
    material: ClassicalMaterial


Payload = TUnion[NeuralPrimitive, AnalyticBody]


@dataclass(frozen=True)
class PlacedPrimitive:
    id: str
    payload: Payload
    pose: Pose = Pose()
    frozen: bool = False
    dynamic: bool = False

    @property
    def neural(self) -> bool:
        return isinstance(self.payload, NeuralPrimitive)

    def world_bounding_sphere(self):
        bs = self.payload.sdf.bounding_sphere()
        if bs is None or (not self.neural and not self.payload.sdf.bounded):
            return None
        c, r = bs
        return self.pose.rotation @ c + self.pose.t, r


@dataclass(frozen=True)
class Scene:
    primitives: tuple = ()
    radios: tuple = ()
    bounds: tuple = ((-10.0, -10.0, -10.0), (10.0, 10.0, 10.0))
    frequencies: tuple = (2.4e9,)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "radios", tuple(self.radios))
        ids = [p.id for p in self.primitives]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate primitive id")
        rids = [r.id for r in self.radios]
        if len(set(rids)) != len(rids):
            raise ValueError("duplicate radio id")
        lo, hi = (np.asarray(b, float) for b in self.bounds)
        if np.any(lo >= hi):
            raise ValueError("scene bounds must have lo < hi")
        for r in self.radios:
            if not self.contains(r.pos):
                raise ValueError(f"radio {r.id!r} lies outside scene bounds")
        for p in self.primitives:
            bs = p.world_bounding_sphere()
            if bs is not None and (np.any(bs[0] - bs[1] < lo) or np.any(bs[0] + bs[1] > hi)):
                raise ValueError(f"primitive {p.id!r} extends outside scene bounds")
        if not self.frequencies or any(f <= 0 for f in self.frequencies):
            raise ValueError("frequencies must be positive")

    def contains(self, p) -> bool:
        lo, hi = (np.asarray(b, float) for b in self.bounds)
        p = np.asarray(p, float)
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def radio(self, rid: str) -> Radio:
        for r in self.radios:
            if r.id == rid:
                return r
        raise KeyError(f"unknown radio id {rid!r}")

    def primitive(self, pid: str) -> PlacedPrimitive:
        for p in self.primitives:
            if p.id == pid:
                return p
        raise KeyError(f"unknown primitive id {pid!r}")

    def replace_primitive(self, placed: PlacedPrimitive) -> "Scene":
        self.primitive(placed.id)
        return replace(self, primitives=tuple(placed if p.id == placed.id else p
                                              for p in self.primitives))


# --------------------------------------------------------------------------
# edits


@dataclass(frozen=True)
class AddEdit:
    placed: PlacedPrimitive


@dataclass(frozen=True)
class RemoveEdit:
    id: str


@dataclass(frozen=True)
class MoveEdit:
    id: str
    pose: Pose


def apply_edit(scene: Scene, edit) -> Scene:
    """Return a new scene; unrelated primitives are shared, not copied."""
    if isinstance(edit, AddEdit):
        return replace(scene, primitives=scene.primitives + (edit.placed,))
    if isinstance(edit, RemoveEdit):
        scene.primitive(edit.id)
        return replace(scene, primitives=tuple(p for p in scene.primitives if p.id != edit.id))
    if isinstance(edit, MoveEdit):
        p = scene.primitive(edit.id)
        return scene.replace_primitive(replace(p, pose=edit.pose))
    raise TypeError(f"unknown edit {edit!r}")


# --------------------------------------------------------------------------
# primitive library


def _entry(prim: NeuralPrimitive) -> dict:
    arrays = {}
    for k, v in prim.sdf.params.named().items():
        arrays["sdf/" + k] = v
    for k, v in prim.material.params.named().items():
        arrays["mat/" + k] = v
    meta = {
        "center": [float(v) for v in prim.sdf.center],
        "radius": float(prim.sdf.radius),
        "num_freqs": prim.sdf.num_freqs,
        "feature_dim": prim.sdf.feature_dim,
        "sdf_skips": list(prim.sdf.params.skips),
        "mat_skips": list(prim.material.params.skips),
        "rate_scale": float(prim.material.rate_scale),
        "training": prim.meta,
    }
    return {"id": prim.id, "meta": meta, "arrays": arrays}


def _from_entry(e: dict) -> NeuralPrimitive:
    m = e["meta"]
    s = {k[4:]: v for k, v in e["arrays"].items() if k.startswith("sdf/")}
    t = {k[4:]: v for k, v in e["arrays"].items() if k.startswith("mat/")}
    sdf = NeuralSdf(MlpParams.from_named(s, m["sdf_skips"], "linear"),
                    np.asarray(m["center"], float), m["radius"], m["num_freqs"])
    mat = NeuralMaterial(MlpParams.from_named(t, m["mat_skips"], "sigmoid"),
                         m["feature_dim"], m["rate_scale"])
    return NeuralPrimitive(e["id"], sdf, mat, dict(m.get("training", {})))


def encode_library(primitives) -> bytes:
    ids = [p.id for p in primitives]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate primitive id in library")
    return container.encode([_entry(p) for p in primitives])


def decode_library(buf: bytes) -> list[NeuralPrimitive]:
    return [_from_entry(e) for e in container.decode(buf)]


def save_library(path, primitives) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_library(primitives))


def load_library(path) -> list[NeuralPrimitive]:
    with open(path, "rb") as fh:
        return decode_library(fh.read())
