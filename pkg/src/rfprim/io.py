"""Text formats: scene JSON, measurement CSV, triangle meshes, heatmaps.

Units everywhere: meters, Hz, radians, dB.  Floats are written with ``repr``
so every writer round-trips bit-exactly through its reader.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classical import TriangleMesh
from .fit import ChannelMeasurement, MeasurementSet
from .geometry import AnalyticSdf, Box, Plane, Sphere, Union
from .materials import get_material, load_material_table
from .scene import (ISOTROPIC, AnalyticBody, AntennaPattern, PlacedPrimitive, Pose, Radio, Scene,
                    lobe_pattern, load_library, save_library)


class FormatError(ValueError):
    """Malformed input file."""


# --------------------------------------------------------------------------
# scenes


def _shape_to_json(sdf: AnalyticSdf) -> dict:
    if isinstance(sdf, Sphere):
        return {"type": "sphere", "center": list(sdf.center), "radius": sdf.radius}
    if isinstance(sdf, Box):
        return {"type": "box", "center": list(sdf.center), "half_extents": list(sdf.half_extents)}
    if isinstance(sdf, Plane):
        return {"type": "plane", "normal": list(sdf.normal), "offset": sdf.offset}
    if isinstance(sdf, Union):
        return {"type": "union", "parts": [_shape_to_json(p) for p in sdf.parts]}
    raise FormatError(f"cannot serialise shape {type(sdf).__name__}")


def _shape_from_json(d: dict) -> AnalyticSdf:
    kind = d.get("type")
    if kind == "sphere":
        return Sphere(tuple(d["center"]), float(d["radius"]))
    if kind == "box":
        return Box(tuple(d["center"]), tuple(d["half_extents"]))
    if kind == "plane":
        return Plane(tuple(d["normal"]), float(d["offset"]))
    if kind == "union":
        return Union(tuple(_shape_from_json(p) for p in d["parts"]))
    raise FormatError(f"unknown shape type {kind!r}")


def _pattern_to_json(p: AntennaPattern):
    if p.isotropic:
        return "isotropic"
    return {"name": p.name, "gains": p.gains.tolist()}


def _pattern_from_json(d):
    if d is None or d == "isotropic":
        return ISOTROPIC
    if isinstance(d, dict) and d.get("type") == "lobe":
        return lobe_pattern(tuple(d.get("boresight", (0, 0, 1))), float(d.get("peak", 10.0)),
                            float(d.get("floor", 0.1)), float(d.get("exponent", 4.0)),
                            float(d.get("step_deg", 5.0)), d.get("name", "lobe"))
    if isinstance(d, dict) and "gains" in d:
        return AntennaPattern(np.asarray(d["gains"], float), d.get("name", "grid"))
    raise FormatError(f"bad antenna pattern {d!r}")


def scene_to_json(scene: Scene, library: str | None = None) -> dict:
    prims = []
    for p in scene.primitives:
        e = {"id": p.id, "pose": {"quat": list(p.pose.quat), "translation": list(p.pose.translation)},
             "frozen": p.frozen, "dynamic": p.dynamic}
        if p.neural:
            e["neural"] = p.payload.id
        else:
            e["shape"] = _shape_to_json(p.payload.sdf)
            e["material"] = p.payload.material.name
        prims.append(e)
    radios = [{"id": r.id, "role": r.role, "position": list(r.position),
               "amplitude": r.amplitude, "pattern": _pattern_to_json(r.pattern)}
              for r in scene.radios]
    out = {"bounds": [list(scene.bounds[0]), list(scene.bounds[1])],
           "frequencies": list(scene.frequencies), "primitives": prims, "radios": radios}
    if library is not None:
        out["library"] = library
    return out


def scene_from_json(doc: dict, base: Path | None = None, library=None) -> Scene:
    """Build a scene; neural entries name primitives in ``doc["library"]`` (or ``library``)."""
    base = Path(".") if base is None else Path(base)
    try:
        table = load_material_table(base / doc["material_table"] if "material_table" in doc else None,
                                    doc.get("materials"))
        lib = {}
        if library is not None:
            lib = {p.id: p for p in library}
        elif "library" in doc:
            lib = {p.id: p for p in load_library(base / doc["library"])}
        prims = []
        for e in doc.get("primitives", []):
            pose = e.get("pose", {})
            pose = Pose(tuple(pose.get("quat", (1.0, 0.0, 0.0, 0.0))),
                        tuple(pose.get("translation", (0.0, 0.0, 0.0))))
            if "neural" in e:
                if e["neural"] not in lib:
                    raise FormatError(f"library has no primitive {e['neural']!r}")
                payload = lib[e["neural"]]
            else:
                payload = AnalyticBody(_shape_from_json(e["shape"]),
                                       get_material(e.get("material", "concrete"), table))
            prims.append(PlacedPrimitive(e["id"], payload, pose, bool(e.get("frozen", False)),
                                         bool(e.get("dynamic", False))))
        radios = [Radio(r["id"], r["role"], tuple(r["position"]), _pattern_from_json(r.get("pattern")),
                        float(r.get("amplitude", 1.0))) for r in doc.get("radios", [])]
        b = doc.get("bounds", [[-10, -10, -10], [10, 10, 10]])
        return Scene(tuple(prims), tuple(radios), (tuple(b[0]), tuple(b[1])),
                     tuple(float(f) for f in doc.get("frequencies", [2.4e9])))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed scene: {exc}") from exc


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return scene_from_json(doc, path.parent)


def save_scene(scene: Scene, path, library_name: str | None = None) -> None:
    """Write the scene JSON and, when it holds neural primitives, a sibling library file."""
    path = Path(path)
    neural = []
    for p in scene.primitives:
        if p.neural and all(q.id != p.payload.id for q in neural):
            neural.append(p.payload)
    lib = None
    if neural:
        lib = library_name or path.stem + ".rfsc"
        save_library(path.parent / lib, neural)
    path.write_text(json.dumps(scene_to_json(scene, lib), indent=2) + "\n")


# --------------------------------------------------------------------------
# measurement datasets

DATASET_HEADER = ["tx_x", "tx_y", "tx_z", "rx_x", "rx_y", "rx_z", "freq_hz", "kind", "values"]


def write_dataset(data: MeasurementSet, path) -> None:
    """One record per line; ``values`` is a dB scalar or interleaved re,im samples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATASET_HEADER)
        for r in data:
            if r.kind == "power_db":
                vals = [repr(float(r.value))]
            else:
                vals = [repr(float(x)) for c in r.value for x in (c.real, c.imag)]
            w.writerow([repr(float(v)) for v in r.tx + r.rx] + [repr(float(r.freq)), r.kind] + vals)


def read_dataset(path) -> MeasurementSet:
    recs = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != DATASET_HEADER:
        raise FormatError(f"{path}: missing dataset header")
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            nums = [float(v) for v in row[:7]]
            kind = row[7].strip()
            vals = [float(v) for v in row[8:]]
            if kind == "power_db":
                if len(vals) != 1:
                    raise ValueError("power record needs exactly one value")
                value = vals[0]
            else:
                if not vals or len(vals) % 2:
                    raise ValueError("complex record needs re,im pairs")
                value = np.array(vals[0::2]) + 1j * np.array(vals[1::2])
            recs.append(ChannelMeasurement(tuple(nums[:3]), tuple(nums[3:6]), nums[6], kind, value))
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{ln}: {exc}") from exc
    if not recs:
        raise FormatError(f"{path}: no records")
    return MeasurementSet(tuple(recs))


# --------------------------------------------------------------------------
# meshes (OBJ subset: v / f / usemtl)


def write_mesh(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    current = None
    for face, mat in zip(mesh.faces.tolist(), mesh.materials):
        if mat != current:
            lines.append(f"usemtl {mat}")
            current = mat
        lines.append("f " + " ".join(str(i + 1) for i in face))
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path, default_material: str = "concrete") -> TriangleMesh:
    verts, faces, mats = [], [], []
    mat = default_material
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "usemtl":
                mat = parts[1]
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if len(idx) < 3:
                    raise ValueError("face needs three vertices")
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
                    mats.append(mat)
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{ln}: {exc}") from exc
    try:
        return TriangleMesh(np.array(verts, float).reshape(-1, 3), np.array(faces, int).reshape(-1, 3),
                            mats)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# heatmaps


@dataclass
class HeatmapGrid:
    """Power in dB on a horizontal lattice; cell (i, j) sits at origin + (i, j, 0) * cell."""

    origin: tuple
    cell: float
    values: np.ndarray  # (ny, nx)

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError("heatmap needs at least one cell")
        if not self.cell > 0:
            raise ValueError("cell size must be positive")
        self.origin = tuple(float(v) for v in self.origin)

    @property
    def shape(self):
        return self.values.shape

    def points(self) -> np.ndarray:
        ny, nx = self.values.shape
        return lattice(self.origin, self.cell, nx, ny)


def lattice(origin, cell: float, nx: int, ny: int) -> np.ndarray:
    if nx < 1 or ny < 1:
        raise ValueError("grid needs nx, ny >= 1")
    o = np.asarray(origin, float)
    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    return np.stack([o[0] + i * cell, o[1] + j * cell, np.full(i.shape, o[2])], axis=-1)


def write_heatmap_csv(grid: HeatmapGrid, path) -> None:
    ny, nx = grid.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_x", "origin_y", "origin_z", "cell", "nx", "ny"])
        w.writerow([repr(v) for v in grid.origin] + [repr(float(grid.cell)), nx, ny])
        for row in grid.values:
            w.writerow([repr(float(v)) for v in row])


def read_heatmap_csv(path) -> HeatmapGrid:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    try:
        head = rows[1]
        origin = tuple(float(v) for v in head[:3])
        cell = float(head[3])
        nx, ny = int(head[4]), int(head[5])
        vals = np.array([[float(v) for v in r] for r in rows[2:2 + ny]])
        if vals.shape != (ny, nx):
            raise ValueError(f"expected {ny}x{nx} values, got {vals.shape}")
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return HeatmapGrid(origin, cell, vals)


def write_pgm(grid: HeatmapGrid, path, floor_db: float = -100.0) -> None:
    """8-bit binary graymap, linear from ``floor_db`` (black) to the map maximum (white)."""
    v = grid.values
    finite = v[np.isfinite(v)]
    top = float(finite.max()) if finite.size else floor_db + 1.0
    if top <= floor_db:
        top = floor_db + 1.0
    g = np.clip((np.where(np.isfinite(v), v, floor_db) - floor_db) / (top - floor_db), 0.0, 1.0)
    img = np.round(g * 255).astype(np.uint8)[::-1]  # north up
    ny, nx = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    nx, ny = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(ny, nx)
