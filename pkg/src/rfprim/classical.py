"""Mesh-based image-method ray tracer with Fresnel coefficients.

Specular paths are enumerated over ordered sequences of reflecting planes
(coplanar triangles are grouped into one plane).  Every segment is tested
against all triangles; crossing a surface multiplies the path by the
straight-through transmission factor, and a surface with zero transmission
occludes the path.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .materials import C0, DEFAULT_MATERIALS, get_material, reflection_coefficient, transmission_factor

T_EPS = 1e-9


@dataclass
class TriangleMesh:
    vertices: np.ndarray          # (V, 3) meters
    faces: np.ndarray             # (T, 3) vertex indices
    materials: list               # material name per face

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, int).reshape(-1, 3)
        self.materials = list(self.materials)
        if len(self.materials) != len(self.faces):
            raise ValueError("need one material per face")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.faces.size and np.any(self.areas() <= 1e-12):
            raise ValueError("degenerate triangle (area <= 1e-12 m^2)")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), int), [])

    def __len__(self):
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def normals(self) -> np.ndarray:
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def merged(self, other: "TriangleMesh") -> "TriangleMesh":
        return TriangleMesh(np.concatenate([self.vertices, other.vertices]),
                            np.concatenate([self.faces, other.faces + len(self.vertices)]),
                            self.materials + other.materials)


def box_mesh(center, half_extents, material: str, inward: bool = False) -> TriangleMesh:
    """Axis-aligned box as 12 triangles (outward normals unless ``inward``)."""
    c = np.asarray(center, float)
    h = np.asarray(half_extents, float)
    corners = np.array(list(itertools.product((-1, 1), repeat=3)), float) * h + c
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, cc, d in quads:
        faces += [(a, b, cc), (a, cc, d)]
    faces = np.array(faces)
    mesh = TriangleMesh(corners, faces, [material] * len(faces))
    n = mesh.normals()
    centroid = mesh.triangles().mean(axis=1)
    flip = np.sum(n * (centroid - c), axis=1) < 0
    if inward:
        flip = ~flip
    faces[flip] = faces[flip][:, ::-1]
    return TriangleMesh(corners, faces, [material] * len(faces))


def quad_mesh(corners, material: str) -> TriangleMesh:
    v = np.asarray(corners, float)
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]), [material, material])


def moller_trumbore(origin, direction, triangle):
    """Smallest ``t > 1e-9`` hit with barycentrics ``(u, v)``, or None on a miss."""
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    v0, v1, v2 = np.asarray(triangle, float)
    e1, e2 = v1 - v0, v2 - v0
    pvec = np.cross(d, e2)
    det = e1 @ pvec
    if abs(det) < 1e-15:
        return None
    inv = 1.0 / det
    tvec = o - v0
    u = (tvec @ pvec) * inv
    if u < 0.0 or u > 1.0:
        return None
    qvec = np.cross(tvec, e1)
    v = (d @ qvec) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = (e2 @ qvec) * inv
    if t <= T_EPS:
        return None
    return float(t), float(u), float(v)


def _mt_batch(o, d, tri):
    """Vectorised Moller-Trumbore of one ray against many triangles: t (nan on miss)."""
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    pvec = np.cross(d, e2)
    det = np.sum(e1 * pvec, axis=1)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = o - v0
    u = np.sum(tvec * pvec, axis=1) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec @ d) * inv
    t = np.sum(e2 * qvec, axis=1) * inv
    ok &= (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1)
    return np.where(ok, t, np.nan)


@dataclass
class _Plane:
    normal: np.ndarray
    offset: float
    tris: np.ndarray     # triangle indices
    material: str


def _planes(mesh: TriangleMesh, tol: float = 1e-9) -> list[_Plane]:
    out: list[_Plane] = []
    nrm = mesh.normals()
    tri = mesh.triangles()
    for i in range(len(mesh)):
        n = nrm[i]
        # canonical orientation: first non-zero component positive
        k = int(np.argmax(np.abs(n) > 1e-12))
        if n[k] < 0:
            n = -n
        off = float(n @ tri[i, 0])
        for pl in out:
            if (np.allclose(pl.normal, n, atol=1e-9) and abs(pl.offset - off) < tol
                    and pl.material == mesh.materials[i]):
                pl.tris = np.append(pl.tris, i)
                break
        else:
            out.append(_Plane(n, off, np.array([i]), mesh.materials[i]))
    return out


def _mirror(p, pl: _Plane):
    return p - 2.0 * (p @ pl.normal - pl.offset) * pl.normal


@dataclass
class SpecularPath:
    points: np.ndarray            # tx, bounce points..., rx
    planes: list                  # plane index per bounce
    materials: list               # material per bounce
    cos_incidence: list           # |cos| of the incidence angle per bounce
    crossings: list               # (material, |cos|) per transmitted surface

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    @property
    def length(self) -> float:
        return float(np.sum(self.segment_lengths))

    @property
    def n_bounces(self) -> int:
        return len(self.planes)


def _on_plane_tris(p, pl: _Plane, tri: np.ndarray, tol: float = 1e-9) -> bool:
    for i in pl.tris:
        v0, v1, v2 = tri[i]
        e1, e2 = v1 - v0, v2 - v0
        w = p - v0
        d00, d01, d11 = e1 @ e1, e1 @ e2, e2 @ e2
        d20, d21 = w @ e1, w @ e2
        den = d00 * d11 - d01 * d01
        v = (d11 * d20 - d01 * d21) / den
        u = (d00 * d21 - d01 * d20) / den
        if v >= -tol and u >= -tol and u + v <= 1 + tol:
            return True
    return False


def _segment_crossings(a, b, tri, tri_plane, skip_planes, planes):
    """Surfaces crossed strictly between a and b: list of (plane index, |cos|) or None if blocked."""
    if len(tri) == 0:
        return []
    seg = b - a
    L = np.linalg.norm(seg)
    d = seg / L
    t = _mt_batch(a, d, tri)
    hit = np.isfinite(t) & (t > 1e-7) & (t < L - 1e-7)
    crossed = {}
    for i in np.nonzero(hit)[0]:
        pi = tri_plane[i]
        if pi in skip_planes and (t[i] < 1e-6 or t[i] > L - 1e-6):
            continue
        crossed.setdefault(pi, abs(float(d @ planes[pi].normal)))
    return sorted(crossed.items())


def enumerate_specular_paths(mesh: TriangleMesh, tx, rx, max_bounces: int = 2,
                             table: dict | None = None) -> list[SpecularPath]:
    """All valid specular paths with up to ``max_bounces`` reflections (image method).

    Segments crossing a perfect conductor are occluded and dropped.
    """
    table = DEFAULT_MATERIALS if table is None else table
    if max_bounces < 0 or max_bounces > 3:
        raise ValueError("max_bounces must be in [0, 3]")
    tx = np.asarray(tx, float)
    rx = np.asarray(rx, float)
    planes = _planes(mesh) if len(mesh) else []
    tri = mesh.triangles() if len(mesh) else np.zeros((0, 3, 3))
    tri_plane = np.zeros(len(mesh), int)
    for pi, pl in enumerate(planes):
        tri_plane[pl.tris] = pi
    paths = []
    for k in range(max_bounces + 1):
        for seq in itertools.product(range(len(planes)), repeat=k):
            if any(seq[i] == seq[i + 1] for i in range(k - 1)):
                continue
            p = _build(seq, planes, tri, tx, rx)
            if p is None:
                continue
            pts = p
            ok = True
            crossings = []
            for s in range(len(pts) - 1):
                skip = set()
                if s > 0:
                    skip.add(seq[s - 1])
                if s < k:
                    skip.add(seq[s])
                cr = _segment_crossings(pts[s], pts[s + 1], tri, tri_plane, skip, planes)
                for pi, c in cr:
                    if get_material(planes[pi].material, table).pec:
                        ok = False
                    crossings.append((planes[pi].material, c))
            if not ok:
                continue
            cos_inc = []
            for j, pi in enumerate(seq):
                d_in = pts[j + 1] - pts[j]
                d_in /= np.linalg.norm(d_in)
                cos_inc.append(abs(float(d_in @ planes[pi].normal)))
            paths.append(SpecularPath(np.asarray(pts), list(seq), [planes[i].material for i in seq],
                                      cos_inc, crossings))
    return paths


def _build(seq, planes, tri, tx, rx):
    """Bounce points for plane sequence ``seq`` or None if geometrically invalid."""
    images = [tx]
    for pi in seq:
        images.append(_mirror(images[-1], planes[pi]))
    pts = [rx]
    target = rx
    for j in range(len(seq) - 1, -1, -1):
        pl = planes[seq[j]]
        src = images[j + 1]
        ds = src @ pl.normal - pl.offset
        dt = target @ pl.normal - pl.offset
        if ds * dt >= 0:  # image and target must straddle the plane
            return None
        s = ds / (ds - dt)
        b = src + s * (target - src)
        if not _on_plane_tris(b, pl, tri):
            return None
        pts.append(b)
        target = b
    pts.append(tx)
    pts = pts[::-1]
    # reflection side check: both neighbours on the same side of each bounce plane
    for j, pi in enumerate(seq):
        pl = planes[pi]
        a = pts[j] @ pl.normal - pl.offset
        c = pts[j + 2] @ pl.normal - pl.offset
        if a * c <= 0:
            return None
    return np.asarray(pts)


def path_coefficient(path: SpecularPath, f: float, table: dict | None = None) -> complex:
    """Product of reflection and transmission factors along a path."""
    table = DEFAULT_MATERIALS if table is None else table
    c = 1.0 + 0j
    for m, ci in zip(path.materials, path.cos_incidence):
        c *= complex(reflection_coefficient(get_material(m, table), f, np.array([ci]))[0])
    for m, ci in path.crossings:
        mat = get_material(m, table)
        if mat.pec:
            return 0j
        r = reflection_coefficient(mat, f, np.array([ci]))
        c *= float(transmission_factor(r)[0])
    return c


def efield_sum(paths, f: float, E0: float = 1.0, table: dict | None = None) -> complex:
    """Coherent sum of E0 / s * exp(-j k s) * prod(coefficients), in canonical order."""
    k0 = 2.0 * np.pi * f / C0
    terms = []
    for p in paths:
        s = p.length
        if not s > 0:
            raise ValueError("zero-length path")
        terms.append((s, tuple(np.round(p.points.ravel(), 12)),
                      E0 / s * np.exp(-1j * k0 * s) * path_coefficient(p, f, table)))
    if not terms:
        return 0j
    terms.sort(key=lambda x: (x[0], x[1]))
    vals = np.array([t[2] for t in terms])
    return complex(np.sum(vals.real), np.sum(vals.imag))
