"""Classical material electromagnetics and the neural directional-attenuation model.

Complex quantities on the tape are carried as (re, im) pairs of real arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable

import numpy as np

from .autodiff import F, MlpConfig, MlpParams, init_mlp, mlp_forward

EPS0 = 8.8541878128e-12
ETA0 = 376.730
C0 = 299792458.0
F_REF = 1e9


@dataclass(frozen=True)
class ClassicalMaterial:
    """Non-magnetic medium; ``pec`` marks a perfect conductor (R = -1, no transmission)."""

    eps_r: float
    sigma: float = 0.0
    name: str = ""
    pec: bool = False

    def __post_init__(self):
        if not self.pec and (self.eps_r < 1.0 or self.sigma < 0.0):
            raise ValueError(f"invalid material {self.name!r}: need eps_r >= 1, sigma >= 0")


# ITU-style defaults at low GHz; override with load_material_table
DEFAULT_MATERIALS = {
    "concrete": ClassicalMaterial(5.31, 0.066, "concrete"),
    "wood": ClassicalMaterial(1.99, 0.012, "wood"),
    "glass": ClassicalMaterial(6.27, 0.023, "glass"),
    "metal": ClassicalMaterial(1.0, 0.0, "metal", pec=True),
    "air": ClassicalMaterial(1.0, 0.0, "air"),
}


def load_material_table(path=None, overrides: dict | None = None) -> dict:
    """Built-in table updated from a JSON file ``{name: [eps_r, sigma]}`` and/or a dict."""
    table = dict(DEFAULT_MATERIALS)
    items = {}
    if path is not None:
        items.update(json.loads(Path(path).read_text()))
    if overrides:
        items.update(overrides)
    for name, val in items.items():
        if isinstance(val, ClassicalMaterial):
            table[name] = val
        elif isinstance(val, str) and val == "pec":
            table[name] = ClassicalMaterial(1.0, 0.0, name, pec=True)
        else:
            eps_r, sigma = val
            table[name] = ClassicalMaterial(float(eps_r), float(sigma), name)
    return table


def get_material(name: str, table: dict | None = None) -> ClassicalMaterial:
    table = DEFAULT_MATERIALS if table is None else table
    try:
        return table[name]
    except KeyError:
        raise KeyError(f"unknown material {name!r}") from None


def complex_permittivity(mat: ClassicalMaterial, f: float) -> complex:
    """Relative complex permittivity eps_r - j sigma / (omega eps0)."""
    if f <= 0:
        raise ValueError("frequency must be positive")
    return complex(mat.eps_r, -mat.sigma / (2.0 * np.pi * f * EPS0))


def wave_impedance(eps_c) -> complex:
    eps_c = np.asarray(eps_c, complex)
    if np.any(eps_c == 0):
        raise ValueError("zero permittivity")
    out = ETA0 / np.sqrt(eps_c)
    return complex(out) if out.ndim == 0 else out


def fresnel_r_perp(eta1, eta2, theta_i, n1=1.0, n2=1.0):
    """Perpendicular-polarization reflection coefficient.

    ``theta_t`` follows Snell's law with real indices; beyond the critical angle
    ``cos(theta_t)`` becomes imaginary and |R| = 1.
    """
    theta_i = np.asarray(theta_i, float)
    ci = np.cos(theta_i)
    si = np.sin(theta_i)
    # 1 - (n1/n2)^2 sin^2 written without cancellation near grazing
    ct = np.sqrt(ci * ci + (1.0 - (n1 / n2) ** 2) * si * si + 0j)
    # evanescent branch: choose Im(ct) <= 0 so the transmitted wave decays
    ct = np.where(ct.imag > 0, -ct, ct)
    r = (eta2 * ci - eta1 * ct) / (eta2 * ci + eta1 * ct)
    return complex(r) if np.ndim(r) == 0 else r


def _interface(mat: ClassicalMaterial, f: float):
    eps_c = complex_permittivity(mat, f)
    return ETA0, ETA0 / np.sqrt(eps_c), 1.0, float(np.sqrt(mat.eps_r))


def reflection_coefficient(mat: ClassicalMaterial, f: float, cos_i):
    """Complex R_perp for an air-side incidence cosine (vectorised)."""
    cos_i = np.clip(np.abs(np.asarray(cos_i, float)), 0.0, 1.0)
    if mat.pec:
        return np.full(cos_i.shape, -1.0 + 0j)
    eta1, eta2, n1, n2 = _interface(mat, f)
    ci = cos_i
    r2 = (n1 / n2) ** 2
    ct = np.sqrt(ci * ci + (1.0 - r2) * (1.0 - ci * ci) + 0j)
    return (eta2 * ci - eta1 * ct) / (eta2 * ci + eta1 * ct)


def transmission_factor(r) -> np.ndarray:
    """Amplitude transmission sqrt(1 - |R|^2) (straight-through convention)."""
    return np.sqrt(np.clip(1.0 - np.abs(r) ** 2, 0.0, None))


def reflection_coefficient_taped(mat: ClassicalMaterial, f: float, cos_i):
    """(re, im) of R_perp as a differentiable function of the incidence cosine."""
    if mat.pec:
        n = np.shape(F.value(cos_i))
        return np.full(n, -1.0), np.zeros(n)
    eta1, eta2, n1, n2 = _interface(mat, f)
    k2 = (n1 / n2) ** 2

    def fwd(c):
        c = np.clip(np.abs(c), 0.0, 1.0)
        ct = np.sqrt(1.0 - k2 * (1.0 - c * c) + 0j)
        return (eta2 * c - eta1 * ct) / (eta2 * c + eta1 * ct)

    def deriv(c):
        s = np.sign(c)
        c = np.clip(np.abs(c), 0.0, 1.0)
        ct = np.sqrt(1.0 - k2 * (1.0 - c * c) + 0j)
        dct = k2 * c / ct
        den = eta2 * c + eta1 * ct
        return s * 2.0 * eta1 * eta2 * (ct - c * dct) / (den * den)

    re = F._apply(lambda c: fwd(c).real, lambda g, v, o: (g * deriv(v[0]).real,), cos_i)
    im = F._apply(lambda c: fwd(c).imag, lambda g, v, o: (g * deriv(v[0]).imag,), cos_i)
    return re, im


# --------------------------------------------------------------------------
# neural material

@dataclass
class NeuralMaterial:
    """Material network: (p, n, out_dir, log10(f/1 GHz), features) -> alpha in (0, 1).

    Inside the medium the same output, times ``rate_scale`` (1/m), is read as
    an attenuation rate per meter.
    """

    params: MlpParams
    feature_dim: int
    rate_scale: float = 1.0

    def __post_init__(self):
        if self.params.in_dim != 10 + self.feature_dim:
            raise ValueError(
                f"material network expects {10 + self.feature_dim} inputs, has {self.params.in_dim}")
        if self.params.out_dim != 1 or self.params.out_activation != "sigmoid":
            raise ValueError("material network needs a single sigmoid output")


def init_material(rng: np.random.Generator, feature_dim: int = 16, hidden_layers: int = 4,
                  width: int = 32, skips: tuple = (2,), alpha0: float | None = None,
                  rate_scale: float = 1.0) -> NeuralMaterial:
    """Kaiming-initialised material network; ``alpha0`` sets the initial head bias."""
    cfg = MlpConfig(10 + feature_dim, 1, hidden_layers, width, tuple(skips), "sigmoid")
    params = init_mlp(cfg, rng)
    if alpha0 is not None:
        params.biases[-1][0] = float(np.log(alpha0 / (1.0 - alpha0)))
    return NeuralMaterial(params, feature_dim, rate_scale)


def freq_input(f) -> np.ndarray:
    return np.log10(np.asarray(f, float) / F_REF)


def material_input(p, n, out_dir, f, feats):
    n_rows = np.shape(F.value(p))[0]
    fcol = np.broadcast_to(freq_input(f), (n_rows,)).reshape(n_rows, 1)
    return F.concat([p, n, out_dir, fcol, feats], axis=-1)


def material_response(mat: NeuralMaterial, p, n, out_dir, f, feats, tape=None,
                      key: Hashable = None):
    """Directional attenuation alpha for a batch of interaction queries (object frame)."""
    fdim = np.shape(F.value(feats))[-1]
    if fdim != mat.feature_dim:
        raise ValueError(f"feature dimension {fdim} != material feature dimension {mat.feature_dim}")
    out = mlp_forward(mat.params, material_input(p, n, out_dir, f, feats), tape, key)
    return out[:, 0]


def interior_rates(mat: NeuralMaterial, samples, direction, f, feats, tape=None, key=None):
    """Per-sample attenuation rate (1/m); surface normal input is zero inside the medium."""
    zeros = np.zeros((np.shape(F.value(samples))[0], 3))
    d = F.add(zeros, direction)
    return F.mul(material_response(mat, samples, zeros, d, f, feats, tape, key), mat.rate_scale)


def interior_attenuation(mat: NeuralMaterial, samples, direction, f, step: float, feats,
                         tape=None, key=None):
    """exp(-sum_k rate(p_k) * step) along one chord; 1 when there are no samples."""
    if np.shape(F.value(samples))[0] == 0:
        return 1.0
    rates = interior_rates(mat, samples, direction, f, feats, tape, key)
    return F.exp(F.mul(F.sum(rates), -step))
