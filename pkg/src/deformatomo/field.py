"""Coordinate network f(theta, x1, x2) over tilt angle and sensor position.

Inputs are ``(theta / pi, x1, x2)`` with the angle in radians, so the
standard tilt range maps into ``[-1, 1)`` alongside the sensor coordinates.
Each coordinate is lifted by sin/cos Fourier features before a dense MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = [
    "FieldConfig",
    "FieldWeights",
    "encode",
    "field_init",
    "field_eval",
    "grid_coords",
    "field_grid",
    "field_stack",
]


@dataclass(frozen=True)
class FieldConfig:
    frequencies: int = 8
    hidden_layers: int = 3
    width: int = 128
    activation: str = "relu"
    angle_scale: float = math.pi
    angle_frequencies: int | None = None   # None: same as ``frequencies``
    output_gain: float = 0.05              # scale of the initial output layer

    def __post_init__(self):
        if self.frequencies < 1 or self.hidden_layers < 1 or self.width < 8:
            raise ValueError(f"invalid field configuration {self}")
        if self.angle_frequencies is not None and self.angle_frequencies < 1:
            raise ValueError("angle_frequencies must be positive")
        if self.output_gain < 0:
            raise ValueError("output_gain must be nonnegative")
        if self.activation not in ("relu", "sine"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def per_coordinate(self) -> tuple[int, int, int]:
        la = self.frequencies if self.angle_frequencies is None else self.angle_frequencies
        return (la, self.frequencies, self.frequencies)

    @property
    def encoding_size(self) -> int:
        return 2 * sum(self.per_coordinate)


class FieldWeights:
    """MLP weights as differentiable leaves: ``[(W0, b0), ..., (W_out, b_out)]``."""

    def __init__(self, config: FieldConfig, arrays: list[np.ndarray]):
        self.config = config
        self.leaves = [ad.leaf(a, name=f"{'W' if i % 2 == 0 else 'b'}{i // 2}")
                       for i, a in enumerate(arrays)]

    @property
    def layers(self) -> list[tuple[ad.Expr, ad.Expr]]:
        return list(zip(self.leaves[0::2], self.leaves[1::2]))

    def arrays(self) -> list[np.ndarray]:
        return [leaf.value for leaf in self.leaves]

    def assign(self, arrays: list[np.ndarray]) -> None:
        for leaf, a in zip(self.leaves, arrays, strict=True):
            if leaf.value.shape != a.shape:
                raise ValueError(f"shape {a.shape} does not match {leaf.value.shape}")
            leaf.value = np.ascontiguousarray(a, dtype=np.float64)

    def copy(self) -> FieldWeights:
        return FieldWeights(self.config, [a.copy() for a in self.arrays()])


def _encode_columns(columns, counts) -> ad.Expr:
    feats = []
    for col, count in zip(columns, counts):
        freqs = math.pi * 2.0 ** np.arange(count)
        phase = ad.mul(col, freqs)                       # (B, 1) * (L,) -> (B, L)
        s = ad.reshape(ad.sin(phase), (-1, count, 1))
        c = ad.reshape(ad.cos(phase), (-1, count, 1))
        feats.append(ad.reshape(ad.concat([s, c], axis=2), (-1, 2 * count)))
    return ad.concat(feats, axis=1)


def _columns(coords):
    if isinstance(coords, (tuple, list)):
        return [ad.reshape(c, (-1, 1)) for c in coords]
    if not isinstance(coords, ad.Expr):
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"expected (B, 3) coordinates, got {coords.shape}")
        if not np.isfinite(coords).all():
            raise ValueError("coordinates contain NaN or Inf")
        return [ad.constant(coords[:, i:i + 1]) for i in range(3)]
    return [coords[:, i:i + 1] for i in range(3)]


def encode(coords, frequencies=8) -> ad.Expr:
    """Fourier features ``[sin(2^l pi p), cos(2^l pi p)]_l`` for each coordinate ``p``.

    ``coords`` is a ``(B, 3)`` array or Expr, or a triple of column Exprs.
    ``frequencies`` is an int or a per-coordinate triple.
    """
    counts = (frequencies,) * 3 if np.isscalar(frequencies) else tuple(frequencies)
    return _encode_columns(_columns(coords), counts)


def field_init(config: FieldConfig, seed: int = 0) -> FieldWeights:
    """He-normal weights for ReLU networks, SIREN-style uniform for sine; zero biases.

    The output layer is multiplied by ``config.output_gain`` so the initial
    field is close to zero rather than of unit size.
    """
    rng = np.random.default_rng(seed)
    sizes = [config.encoding_size] + [config.width] * config.hidden_layers + [1]
    arrays = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        if config.activation == "relu":
            w = rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
        else:
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if fan_out == 1:
            w = w * config.output_gain
        arrays += [w, np.zeros(fan_out)]
    return FieldWeights(config, arrays)


def field_eval(weights: FieldWeights, coords) -> ad.Expr:
    """Network output for a batch of coordinates, shape ``(B,)``."""
    cfg = weights.config
    h = _encode_columns(_columns(coords), cfg.per_coordinate)
    act = ad.relu if cfg.activation == "relu" else ad.sin
    layers = weights.layers
    for w, b in layers[:-1]:
        h = act(ad.matmul(h, w) + b)
    w, b = layers[-1]
    return ad.reshape(ad.matmul(h, w) + b, (-1,))


def grid_coords(angles, n: int, angle_scale: float = math.pi) -> np.ndarray:
    """``(M * n * n, 3)`` coordinates of the sensor grid at every tilt (degrees)."""
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    u = (np.arange(n) - (n - 1) / 2.0) * (2.0 / n)
    x1, x2 = np.meshgrid(u, u, indexing="ij")
    m, p = angles.size, n * n
    coords = np.empty((m, p, 3))
    coords[:, :, 0] = (np.radians(angles) / angle_scale)[:, None]
    coords[:, :, 1] = x1.ravel()
    coords[:, :, 2] = x2.ravel()
    return coords.reshape(m * p, 3)


def field_stack(weights: FieldWeights, angles, n: int) -> ad.Expr:
    """Graph node of the field sampled on the grid at every tilt, shape ``(M, n, n)``."""
    m = np.atleast_1d(angles).size
    return ad.reshape(field_eval(weights, grid_coords(angles, n, weights.config.angle_scale)), (m, n, n))


def field_grid(weights: FieldWeights, theta: float, n: int) -> np.ndarray:
    """Field image at one tilt angle (degrees) on the ``n x n`` sensor grid."""
    return ad.evaluate(field_stack(weights, [theta], n))[0].copy()
