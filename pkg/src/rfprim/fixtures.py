"""Synthetic scenes shared by tests, scripts and the command line."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classical import TriangleMesh, box_mesh, quad_mesh
from .fit import MeasurementSet, PoseSearch, TrainConfig, generate_measurements
from .geometry import Box, Plane, geometric_init
from .materials import DEFAULT_MATERIALS, init_material
from .scene import AnalyticBody, NeuralPrimitive, PlacedPrimitive, Pose, Radio, Scene
from .tracer import TracerConfig

FREQ = 2.4e9


# --------------------------------------------------------------------------
# neural primitives


def make_primitive(pid: str, seed: int, *, radius: float = 0.6, init_radius: float | None = None,
                   alpha0: float = 0.5, head_scale: float = 1.0, rate_scale: float = 1.5,
                   hidden_layers: int = 4, width: int = 32, feature_dim: int = 16,
                   num_freqs: int = 6) -> NeuralPrimitive:
    """Geometric-init structure network plus a material network.

    ``head_scale`` shrinks the material head weights, which controls how much
    the initial attenuation varies around ``alpha0``.
    """
    rng = np.random.default_rng(seed)
    sdf = geometric_init(rng, radius, init_radius=init_radius, hidden_layers=hidden_layers,
                         width=width, feature_dim=feature_dim, num_freqs=num_freqs)
    mat = init_material(rng, feature_dim, hidden_layers, width, alpha0=alpha0,
                        rate_scale=rate_scale)
    mat.params.weights[-1] *= head_scale
    meta = {"training": {"source": "init", "seed": int(seed)}}
    return NeuralPrimitive(pid, sdf, mat, meta)


def ground_truth_primitive(seed: int = 7) -> NeuralPrimitive:
    """Neural sphere of radius 0.4 m with a spatially varying, moderately lossy material."""
    return make_primitive("obj", seed, radius=0.6, init_radius=0.4, alpha0=0.7, head_scale=1.0)


def initial_primitive(seed: int = 11) -> NeuralPrimitive:
    """Fresh primitive to fit from: default geometric init, neutral material."""
    return make_primitive("obj", seed, radius=0.6, alpha0=0.3, head_scale=0.1)


# --------------------------------------------------------------------------
# round-trip fixture


@dataclass(frozen=True)
class RoundTrip:
    """One object between a transmitter and a receiver region."""

    tx: tuple = (-1.5, 0.0, 0.0)
    rx_lo: tuple = (0.9, -0.45, -0.45)
    rx_hi: tuple = (1.8, 0.45, 0.45)
    bounds: tuple = ((-2.5, -2.0, -2.0), (2.5, 2.0, 2.0))
    freq: float = FREQ

    def scene(self, prim: NeuralPrimitive, pose: Pose = Pose(), dynamic: bool = False) -> Scene:
        tx = Radio("tx", "tx", self.tx)
        placed = PlacedPrimitive(prim.id, prim, pose, dynamic=dynamic)
        return Scene((placed,), (tx,), self.bounds, (self.freq,))

    def receivers(self, n: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.uniform(self.rx_lo, self.rx_hi, size=(n, 3))

    def baseline_mesh(self, half: float = 0.48, material: str = "concrete") -> TriangleMesh:
        """Wrong-geometry classical stand-in: a box 20% larger than the sphere radius."""
        return box_mesh((0.0, 0.0, 0.0), (half, half, half), material)


@dataclass(frozen=True)
class PoseFixture:
    """The round-trip object seen from two transmitters so every translation axis shows."""

    displacement: tuple = (0.5, 0.0, 0.0)
    tx_a: tuple = (0.0, -1.6, 0.0)
    tx_b: tuple = (-1.6, 0.0, 0.0)
    bounds: tuple = ((-2.5, -2.5, -2.0), (2.5, 2.5, 2.0))
    freq: float = FREQ

    def scene(self, prim: NeuralPrimitive, pose: Pose = Pose(), dynamic: bool = False) -> Scene:
        tx = Radio("tx", "tx", self.tx_a)
        placed = PlacedPrimitive(prim.id, prim, pose, frozen=True, dynamic=dynamic)
        return Scene((placed,), (tx,), self.bounds, (self.freq,))

    def true_pose(self) -> Pose:
        return Pose(translation=self.displacement)

    def adaptation_pairs(self) -> list:
        """Five (tx, rx) pairs whose direct paths straddle both silhouettes."""
        a = [(self.tx_a, (x, 1.4, z)) for x, z in ((0.19, 0.15), (0.94, -0.15), (1.6, 0.1))]
        b = [(self.tx_b, (1.9, 0.5, 0.0)), (self.tx_b, (1.9, -0.2, 0.45))]
        return a + b

    def held_out_pairs(self, n: int, seed: int) -> list:
        rng = np.random.default_rng(seed)
        na = n // 2
        ra = rng.uniform((-0.4, 1.2, -0.45), (1.6, 1.6, 0.45), size=(na, 3))
        rb = rng.uniform((1.5, -0.6, -0.6), (2.0, 0.6, 0.6), size=(n - na, 3))
        return [(self.tx_a, tuple(r)) for r in ra] + [(self.tx_b, tuple(r)) for r in rb]


def measure_pairs(scene: Scene, pairs, cfg: TracerConfig, kind: str = "power_db"):
    """Synthetic measurements for arbitrary (tx, rx) pairs, in pair order."""
    recs = []
    for tx, rx in pairs:
        recs.extend(generate_measurements(scene, tx, [rx], cfg, kind=kind).records)
    return MeasurementSet(tuple(recs))


def data_tracer(seed: int = 0) -> TracerConfig:
    """Ray budget used to synthesise ground-truth measurements."""
    return TracerConfig(n_rays=4096, guide_rays=96, max_depth=2, capture_radius=0.1,
                        branching="split", seed=seed, launch_seed=seed)


def train_tracer() -> TracerConfig:
    """Per-step tracer settings during fitting (ray count and seed come from the fit config)."""
    return TracerConfig(n_rays=0, guide_rays=24, max_depth=2, capture_radius=0.1,
                        branching="split", interior_step=0.04)


def round_trip_config(iters: int = 200, lambda_eik: float = 3.0, seed: int = 0) -> TrainConfig:
    """Desk-scale fitting schedule for the round-trip fixture.

    Geometry weights learn 30x slower than material weights and stay frozen
    for the first 60 steps, so early material errors cannot deform the shape.
    """
    return TrainConfig(batch=16, iters=iters, lr_start=3e-3, lr_end=3e-4,
                       lambda_eik=lambda_eik, lambda_lap=0.0, seed=seed, rays=0,
                       reg_samples=128, geometry_lr_scale=0.03, geometry_warmup=60,
                       tracer=train_tracer())


def pose_config() -> tuple:
    """Adam refinement schedule and grid search for the pose fixture."""
    cfg = TrainConfig(batch=5, iters=30, lr_start=0.02, lr_end=0.002, rays=0,
                      tracer=train_tracer())
    return cfg, PoseSearch()


# --------------------------------------------------------------------------
# analytic fixtures


def box_room(half=(2.5, 2.0, 1.5), material: str = "concrete"):
    """Closed room as six half-space planes and the matching inward mesh."""
    half = np.asarray(half, float)
    mat = DEFAULT_MATERIALS[material]
    walls = []
    for ax in range(3):
        for sgn in (1, -1):
            n = np.zeros(3)
            n[ax] = -sgn
            walls.append(PlacedPrimitive(f"wall{ax}{'p' if sgn > 0 else 'm'}",
                                         AnalyticBody(Plane(tuple(n), -half[ax]), mat)))
    bounds = (tuple(-half - 0.5), tuple(half + 0.5))
    mesh = box_mesh((0.0, 0.0, 0.0), half, material, inward=True)
    return walls, bounds, mesh


def floor_plane(height: float = 0.0, extent: float = 50.0, material: str = "metal"):
    """Ground plane as a half-space and as two large triangles."""
    mat = DEFAULT_MATERIALS[material]
    placed = PlacedPrimitive("floor", AnalyticBody(Plane((0.0, 0.0, 1.0), height), mat))
    mesh = quad_mesh(((-extent, -extent, height), (extent, -extent, height),
                      (extent, extent, height), (-extent, extent, height)), material)
    return placed, mesh


def shadow_wall(center=(0.0, 0.0, 0.0), half=(0.05, 1.0, 1.0), material: str = "metal"):
    return PlacedPrimitive("wall", AnalyticBody(Box(tuple(center), tuple(half)),
                                                DEFAULT_MATERIALS[material]))
