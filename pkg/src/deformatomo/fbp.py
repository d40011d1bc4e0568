"""Ramp filtering, backprojection and filtered backprojection.

The backprojector is the exact transpose of :func:`geometry.forward_all`
(same sparse ray-sampling matrix), so every operator here also has an
explicit adjoint for use inside the training graph.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .geometry import (_check_angles, axis1_operator, detector_size, forward_all,
                       plane_operator, voxel_size)

__all__ = [
    "LinearOperator",
    "padded_length",
    "ramlak_kernel",
    "ramp_response",
    "filter_padded",
    "ramp_filter",
    "angular_weight",
    "backproject_unscaled",
    "backproject",
    "fbp_reconstruct",
    "fbp_adjoint",
    "projector",
    "adjoint_check",
]


@dataclass(frozen=True)
class LinearOperator:
    forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]
    domain_shape: tuple
    range_shape: tuple
    descriptor: str = ""


def padded_length(n: int) -> int:
    """Smallest power of two that is at least ``2 n``."""
    return 1 << max(1, (2 * n - 1).bit_length())


def ramlak_kernel(length: int) -> np.ndarray:
    """Spatial Ram-Lak kernel at unit sample spacing in circular (FFT) order.

    ``k[0] = 1/4``, ``k[n] = 0`` for even ``n`` and ``-1/(pi n)^2`` for odd ``n``.
    """
    n = np.fft.fftfreq(length, d=1.0 / length)
    kernel = np.zeros(length)
    kernel[0] = 0.25
    odd = (n.astype(np.int64) % 2) == 1
    kernel[odd] = -1.0 / (math.pi * n[odd]) ** 2
    return kernel


def ramp_response(length: int, spacing: float) -> np.ndarray:
    """Real rfft-domain response of the ramp filter on a padded line.

    Scaled by ``2 / spacing**2`` so that :func:`fbp_reconstruct` inverts
    :func:`geometry.forward_all` with the angular weight of
    :func:`angular_weight`.
    """
    return np.fft.rfft(ramlak_kernel(length)).real * (2.0 / spacing**2)


def filter_padded(lines: np.ndarray, response: np.ndarray) -> np.ndarray:
    """Circular convolution of each padded line (last axis) with a real symmetric response."""
    length = lines.shape[-1]
    return np.fft.irfft(np.fft.rfft(lines, axis=-1) * response, n=length, axis=-1)


def ramp_filter(stack: np.ndarray) -> np.ndarray:
    """Ram-Lak filter along detector axis 2 (perpendicular to the tilt axis).

    Lines are zero-padded to :func:`padded_length`, filtered and cropped.
    The operator is linear and symmetric, hence its own adjoint.
    """
    stack = np.asarray(stack, dtype=np.float64)
    n = stack.shape[-1]
    if stack.shape[-2] != n:
        raise ValueError(f"expected square images, got {stack.shape[-2:]}")
    length = padded_length(n)
    padded = np.zeros(stack.shape[:-1] + (length,))
    padded[..., :n] = stack
    out = filter_padded(padded, ramp_response(length, 2.0 / n))
    return np.ascontiguousarray(out[..., :n])


def angular_weight(angles) -> float:
    """Half the mean angular spacing in radians; ``pi / (2M)`` on a full half-circle."""
    angles = np.asarray(angles, dtype=np.float64)
    m = angles.size
    if m < 2:
        return math.pi / 2.0
    spacing = math.radians(float(angles.max() - angles.min())) / (m - 1)
    return 0.5 * spacing


def _shape(size) -> tuple[int, int, int]:
    return (size, size, size) if np.isscalar(size) else tuple(int(s) for s in size)


def backproject_unscaled(stack: np.ndarray, angles, size, *, nearest: bool = False) -> np.ndarray:
    """Exact transpose of :func:`geometry.forward_all`."""
    stack = np.asarray(stack, dtype=np.float64)
    angles = _check_angles(angles)
    if stack.shape[0] != len(angles):
        raise ValueError(f"{stack.shape[0]} images but {len(angles)} angles")
    n1, n2, n3 = shape = _shape(size)
    n_det = detector_size(shape)
    if stack.shape[1:] != (n_det, n_det):
        raise ValueError(f"images of shape {stack.shape[1:]} do not match a {shape} volume")
    sino = stack.transpose(0, 2, 1).reshape(len(angles) * n_det, n_det)
    lin1 = axis1_operator(n1, n_det)
    if lin1 is not None:
        sino = (lin1.T @ sino.T).T
    plane = plane_operator(n2, n3, n_det, angles, nearest)
    vol = (plane.T @ sino).T.reshape(shape)
    return np.ascontiguousarray(vol) * voxel_size(shape)


def backproject(stack: np.ndarray, angles, size) -> np.ndarray:
    return angular_weight(angles) * backproject_unscaled(stack, angles, size)


def fbp_reconstruct(stack: np.ndarray, angles, size) -> np.ndarray:
    return backproject(ramp_filter(stack), angles, size)


def fbp_adjoint(volume: np.ndarray, angles) -> np.ndarray:
    """Transpose of :func:`fbp_reconstruct`: volume -> stack."""
    return ramp_filter(angular_weight(angles) * forward_all(volume, angles))


def projector(size, angles, *, nearest_forward: bool = False) -> LinearOperator:
    """Projector/backprojector pair. ``nearest_forward`` builds a deliberately mismatched pair."""
    shape = _shape(size)
    n_det = detector_size(shape)
    return LinearOperator(
        forward=lambda v: forward_all(v, angles, nearest=nearest_forward),
        adjoint=lambda s: backproject_unscaled(s, angles, shape),
        domain_shape=shape,
        range_shape=(len(angles), n_det, n_det),
        descriptor=f"parallel-beam tilt projector {shape}, {len(angles)} tilts",
    )


def adjoint_check(op: LinearOperator, seed: int = 0) -> float:
    """``|<A x, y> - <x, A^T y>| / (||A x|| ||y||)`` for random ``x``, ``y``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.domain_shape)
    y = rng.standard_normal(op.range_shape)
    ax = op.forward(x)
    aty = op.adjoint(y)
    lhs = float(np.vdot(ax, y))
    rhs = float(np.vdot(x, aty))
    return abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y))
