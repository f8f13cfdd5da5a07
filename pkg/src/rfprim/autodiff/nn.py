"""Multilayer perceptrons with skip connections and positional encoding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from . import tape as F


@dataclass(frozen=True)
class MlpConfig:
    """Shape of an MLP: ``hidden_layers`` ReLU layers of ``width`` then a head.

    ``skips`` lists hidden-layer indices (1-based, interior) whose input is the
    previous activation concatenated with the network input.
    """

    in_dim: int
    out_dim: int
    hidden_layers: int = 4
    width: int = 32
    skips: tuple[int, ...] = (2,)
    out_activation: str = "linear"

    def __post_init__(self):
        for s in self.skips:
            if not 1 <= s < self.hidden_layers:
                raise ValueError(f"skip index {s} is not an interior layer")
        if self.out_activation not in ("linear", "sigmoid", "relu"):
            raise ValueError(f"unknown activation {self.out_activation!r}")


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # (fan_in, fan_out) each
    biases: list[np.ndarray]
    skips: tuple[int, ...] = ()
    out_activation: str = "linear"
    _checked: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and paired")
        in_dim = self.weights[0].shape[0]
        prev = None
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bad shapes {w.shape} / {b.shape}")
            if prev is not None:
                expect = prev + (in_dim if i in self.skips else 0)
                if w.shape[0] != expect:
                    raise ValueError(
                        f"layer {i}: fan-in {w.shape[0]} does not chain (expected {expect})")
            prev = w.shape[1]
        for s in self.skips:
            if not 1 <= s < len(self.weights) - 1:
                raise ValueError(f"skip index {s} is not an interior layer")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise ValueError("non-finite parameter")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], skips=(), out_activation="linear"):
        n = len([k for k in named if k.startswith("W")])
        return cls([np.asarray(named[f"W{i}"], float) for i in range(n)],
                   [np.asarray(named[f"b{i}"], float) for i in range(n)],
                   tuple(skips), out_activation)

    def replace(self, named: dict[str, np.ndarray]) -> "MlpParams":
        cur = self.named()
        cur.update(named)
        return MlpParams.from_named(cur, self.skips, self.out_activation)

    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays()))


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_mlp(cfg: MlpConfig, rng: np.random.Generator) -> MlpParams:
    """Kaiming-uniform hidden layers, zero biases, small uniform head."""
    ws, bs = [], []
    fan = cfg.in_dim
    for i in range(cfg.hidden_layers):
        fin = fan + (cfg.in_dim if i in cfg.skips else 0)
        ws.append(kaiming_uniform(rng, fin, cfg.width))
        bs.append(np.zeros(cfg.width))
        fan = cfg.width
    bound = np.sqrt(1.0 / fan)
    ws.append(rng.uniform(-bound, bound, size=(fan, cfg.out_dim)))
    bs.append(np.zeros(cfg.out_dim))
    return MlpParams(ws, bs, tuple(cfg.skips), cfg.out_activation)


def pe_encode(x, num_freqs: int):
    """NeRF-style positional encoding, raw coordinates first.

    Output layout: ``x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x),
    cos(2^{L-1} pi x)`` with each block holding all three coordinates, so the
    width is ``3 + 6 * num_freqs``.
    """
    if num_freqs < 0:
        raise ValueError("num_freqs must be >= 0")
    parts = [x]
    for k in range(num_freqs):
        s = (2.0 ** k) * np.pi
        xs = F.mul(x, s)
        parts.append(F.sin(xs))
        parts.append(F.cos(xs))
    if len(parts) == 1:
        return x
    return F.concat(parts, axis=-1)


def _wrap(params: MlpParams, tape: F.Tape | None, key: Hashable | None):
    if tape is None:
        return params.weights, params.biases
    ws = [tape.param((key, f"W{i}"), w) for i, w in enumerate(params.weights)]
    bs = [tape.param((key, f"b{i}"), b) for i, b in enumerate(params.biases)]
    return ws, bs


def mlp_forward(params: MlpParams, x, tape: F.Tape | None = None, key: Hashable = None):
    """Run the MLP on a batch ``x`` of shape (n, in_dim) (or (in_dim,)).

    With a tape, the weights are registered as parameters under
    ``(key, "W{i}")`` / ``(key, "b{i}")`` and every intermediate is recorded.
    """
    shape = np.shape(F.value(x))
    if shape[-1] != params.in_dim:
        raise ValueError(f"input width {shape[-1]} does not match first layer {params.in_dim}")
    if tape is None and F.is_var(x):
        tape = x.tape
    ws, bs = _wrap(params, tape, key)
    h = x
    last = len(ws) - 1
    for i, (w, b) in enumerate(zip(ws, bs)):
        if i in params.skips:
            h = F.concat([h, x], axis=-1)
        h = F.add(F.matmul(h, w), b)
        if i < last:
            h = F.relu(h)
    if params.out_activation == "sigmoid":
        h = F.sigmoid(h)
    elif params.out_activation == "relu":
        h = F.relu(h)
    return h
