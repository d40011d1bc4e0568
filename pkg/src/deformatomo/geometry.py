"""Single-axis tilt geometry, per-projection affine deformations and noise.

Conventions
-----------
A volume is an ``(N1, N2, N3)`` float64 array sampled on a uniform grid of
spacing ``h = 2 / max(N1, N2, N3)`` centred on the origin, so the longest
axis spans ``[-1, 1]``. Axis 1 is the tilt axis and axis 3 is the beam
direction at zero tilt.

The sensor is an ``N x N`` grid with ``N = max(N1, N2, N3)`` and the same
spacing; image index ``[i1, i2]`` has ``i1`` along the tilt axis. At tilt
``theta`` the ray through detector position ``u2`` samples the volume plane
(axis 2, axis 3) at ``(cos(theta) u2 + sin(theta) t, -sin(theta) u2 + cos(theta) t)``
for equispaced ``t`` one voxel apart; values are trilinearly interpolated
with zero outside the grid and the sum is scaled by ``h``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

__all__ = [
    "DeformationParams",
    "TiltSeries",
    "voxel_size",
    "detector_size",
    "tilt_angles",
    "project_volume",
    "forward_all",
    "plane_operator",
    "axis1_operator",
    "transform_point",
    "inverse_transform_point",
    "deform_image",
    "bilinear_sample",
    "add_noise",
    "sample_deformations",
    "simulate",
    "make_phantom",
]


@dataclass
class DeformationParams:
    """Affine deformation parameters for ``M`` projections.

    ``shift`` is ``(M, 2)`` in sensor pixels, ``shear`` is ``(M,)`` as a
    dimensionless fraction and ``rotation`` is ``(M,)`` in degrees. Indexing
    with an integer returns the parameters of one projection.
    """

    shift: np.ndarray
    shear: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=np.float64)
        self.shear = np.asarray(self.shear, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)

    @classmethod
    def zeros(cls, m: int) -> DeformationParams:
        return cls(np.zeros((m, 2)), np.zeros(m), np.zeros(m))

    @classmethod
    def single(cls, shift=(0.0, 0.0), shear=0.0, rotation=0.0) -> DeformationParams:
        return cls(np.array([shift], dtype=np.float64), np.array([shear]), np.array([rotation]))

    def __len__(self):
        return self.shear.shape[0]

    def __getitem__(self, m: int) -> DeformationParams:
        return DeformationParams(self.shift[[m]], self.shear[[m]], self.rotation[[m]])

    def copy(self) -> DeformationParams:
        return DeformationParams(self.shift.copy(), self.shear.copy(), self.rotation.copy())

    def clip(self, shift_px: float, shear: float, rot_deg: float) -> DeformationParams:
        return DeformationParams(np.clip(self.shift, -shift_px, shift_px),
                                 np.clip(self.shear, -shear, shear),
                                 np.clip(self.rotation, -rot_deg, rot_deg))

    def __eq__(self, other):
        if not isinstance(other, DeformationParams):
            return NotImplemented
        return (np.array_equal(self.shift, other.shift) and np.array_equal(self.shear, other.shear)
                and np.array_equal(self.rotation, other.rotation))


@dataclass
class TiltSeries:
    images: np.ndarray              # (M, N, N)
    angles: np.ndarray              # (M,) degrees, strictly increasing
    deformations: DeformationParams | None = None
    seed: int | None = None
    snr_db: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise ValueError(f"expected an (M, N, N) stack, got {self.images.shape}")
        if self.images.shape[0] != self.angles.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.angles.shape[0]} angles")
        if not np.isfinite(self.images).all():
            raise ValueError("tilt-series contains non-finite pixels")

    @property
    def n(self) -> int:
        return self.images.shape[1]

    def __len__(self):
        return self.images.shape[0]


def voxel_size(shape) -> float:
    return 2.0 / max(shape)


def detector_size(shape) -> int:
    return int(max(shape))


def tilt_angles(m: int, lo: float = -70.0, hi: float = 70.0) -> np.ndarray:
    """``m`` equispaced tilts in degrees from ``lo`` to ``hi`` inclusive."""
    if m == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, m)


def _check_angles(angles) -> tuple[float, ...]:
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    if np.any(np.abs(angles) > 90.0):
        raise ValueError(f"tilt angles must lie in [-90, 90] degrees, got {angles.min()}..{angles.max()}")
    return tuple(float(a) for a in angles)


def _linear_weights(f: np.ndarray, n: int, nearest: bool):
    """Index/weight pairs for 1-D linear (or nearest) interpolation, zero outside."""
    if nearest:
        i = np.floor(f + 0.5).astype(np.int64)
        return [(i, np.ones_like(f))]
    i0 = np.floor(f).astype(np.int64)
    w1 = f - i0
    return [(i0, 1.0 - w1), (i0 + 1, w1)]


@functools.lru_cache(maxsize=16)
def plane_operator(n2: int, n3: int, n_det: int, angles: tuple[float, ...],
                   nearest: bool = False) -> sp.csr_matrix:
    """Ray-sampling matrix of one slice perpendicular to the tilt axis.

    Rows index ``(tilt, detector u2)``, columns index the flattened
    ``(axis 2, axis 3)`` plane. Entries are interpolation weights (voxel
    units, not yet scaled by the step length).
    """
    radius = math.hypot((n2 + 1) / 2.0, (n3 + 1) / 2.0) + 1.0
    pad = max(0, math.ceil(radius - (n3 - 1) / 2.0))
    n_samples = n3 + 2 * pad
    t = np.arange(n_samples) - (n_samples - 1) / 2.0
    u2 = np.arange(n_det) - (n_det - 1) / 2.0
    rows, cols, vals = [], [], []
    for m, theta in enumerate(angles):
        c, s = math.cos(math.radians(theta)), math.sin(math.radians(theta))
        a2 = c * u2[:, None] + s * t[None, :]
        a3 = -s * u2[:, None] + c * t[None, :]
        f2 = a2 + (n2 - 1) / 2.0
        f3 = a3 + (n3 - 1) / 2.0
        row = np.broadcast_to((m * n_det + np.arange(n_det))[:, None], a2.shape)
        for j2, w2 in _linear_weights(f2, n2, nearest):
            for j3, w3 in _linear_weights(f3, n3, nearest):
                w = w2 * w3
                ok = (j2 >= 0) & (j2 < n2) & (j3 >= 0) & (j3 < n3) & (w != 0.0)
                rows.append(row[ok])
                cols.append(j2[ok] * n3 + j3[ok])
                vals.append(w[ok])
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(len(angles) * n_det, n2 * n3))
    return mat.tocsr()


@functools.lru_cache(maxsize=16)
def axis1_operator(n1: int, n_det: int) -> sp.csr_matrix | None:
    """Linear interpolation from volume axis 1 onto the detector rows (None if identity)."""
    if n1 == n_det:
        return None
    f = np.arange(n_det) - (n_det - 1) / 2.0 + (n1 - 1) / 2.0
    rows, cols, vals = [], [], []
    for j, w in _linear_weights(f, n1, nearest=False):
        ok = (j >= 0) & (j < n1) & (w != 0.0)
        rows.append(np.arange(n_det)[ok])
        cols.append(j[ok])
        vals.append(w[ok])
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n_det, n1)).tocsr()


def forward_all(volume: np.ndarray, angles, *, nearest: bool = False) -> np.ndarray:
    """Project ``volume`` at every tilt; returns an ``(M, N, N)`` stack."""
    volume = np.asarray(volume, dtype=np.float64)
    angles = _check_angles(angles)
    n1, n2, n3 = volume.shape
    n_det = detector_size(volume.shape)
    plane = plane_operator(n2, n3, n_det, angles, nearest)
    tmp = plane @ volume.reshape(n1, n2 * n3).T          # (M*n_det, n1)
    lin1 = axis1_operator(n1, n_det)
    if lin1 is not None:
        tmp = (lin1 @ tmp.T).T
    stack = tmp.reshape(len(angles), n_det, n_det).transpose(0, 2, 1)
    return np.ascontiguousarray(stack) * voxel_size(volume.shape)


def project_volume(volume: np.ndarray, theta: float) -> np.ndarray:
    """Line integrals of ``volume`` at a single tilt (degrees)."""
    return forward_all(volume, [theta])[0]


def _affine(shear: float, rotation_deg: float) -> np.ndarray:
    a = math.radians(rotation_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return rot @ np.array([[1.0, shear], [0.0, 1.0]])


def _single(params: DeformationParams) -> tuple[np.ndarray, float, float]:
    if len(params) != 1:
        raise ValueError("expected parameters of a single projection")
    return params.shift[0], float(params.shear[0]), float(params.rotation[0])


def transform_point(params: DeformationParams, x, n: int) -> np.ndarray:
    """``Rot(alpha) @ Shear(k) @ x + 2 s / n`` for normalized sensor points ``x[..., 2]``."""
    shift, k, alpha = _single(params)
    x = np.asarray(x, dtype=np.float64)
    return x @ _affine(k, alpha).T + 2.0 * shift / n


def inverse_transform_point(params: DeformationParams, y, n: int) -> np.ndarray:
    shift, k, alpha = _single(params)
    y = np.asarray(y, dtype=np.float64) - 2.0 * shift / n
    a = math.radians(alpha)
    unrot = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    unshear = np.array([[1.0, -k], [0.0, 1.0]])
    return y @ (unshear @ unrot).T


def bilinear_sample(img: np.ndarray, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``img`` at fractional indices, zero outside the grid."""
    n1, n2 = img.shape
    out = np.zeros(np.broadcast(f1, f2).shape)
    for j1, w1 in _linear_weights(f1, n1, nearest=False):
        for j2, w2 in _linear_weights(f2, n2, nearest=False):
            ok = (j1 >= 0) & (j1 < n1) & (j2 >= 0) & (j2 < n2)
            vals = img[np.where(ok, j1, 0), np.where(ok, j2, 0)]
            out += np.where(ok, w1 * w2 * vals, 0.0)
    return out


def deform_image(img: np.ndarray, params: DeformationParams) -> np.ndarray:
    """Pull-back ``out(x) = img(T(x))`` on the pixel grid with bilinear interpolation.

    Computed in centred pixel units, where ``T(u) = A u + shift`` and ``A`` is
    the rotation-times-shear matrix, so zero parameters reproduce ``img``
    exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    n = img.shape[0]
    if img.shape != (n, n):
        raise ValueError(f"expected a square image, got {img.shape}")
    shift, k, alpha = _single(params)
    a = _affine(k, alpha)
    u = np.arange(n) - (n - 1) / 2.0
    u1, u2 = np.meshgrid(u, u, indexing="ij")
    w1 = a[0, 0] * u1 + a[0, 1] * u2 + shift[0]
    w2 = a[1, 0] * u1 + a[1, 1] * u2 + shift[1]
    return bilinear_sample(img, w1 + (n - 1) / 2.0, w2 + (n - 1) / 2.0)


def add_noise(stack: np.ndarray, snr_db: float | None, seed: int) -> np.ndarray:
    """Add iid Gaussian noise with variance ``Var(stack) / 10**(snr_db / 10)``.

    ``snr_db`` of ``None`` or ``inf`` disables noise.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if snr_db is None or math.isinf(snr_db) and snr_db > 0:
        return stack.copy()
    signal_var = stack.var()
    if signal_var <= 0.0:
        raise ValueError("cannot set an SNR for a constant stack (zero variance)")
    sigma = math.sqrt(signal_var / 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return stack + sigma * rng.standard_normal(stack.shape)


def sample_deformations(m: int, bounds: tuple[float, float, float], seed) -> DeformationParams:
    """Independent uniform draws in ``+-(shift_px, shear_frac, rot_deg)``."""
    shift_b, shear_b, rot_b = (float(b) for b in bounds)
    if min(shift_b, shear_b, rot_b) < 0:
        raise ValueError(f"deformation bounds must be nonnegative, got {bounds}")
    rng = np.random.default_rng(seed)
    shift = rng.uniform(-shift_b, shift_b, size=(m, 2))
    shear = rng.uniform(-shear_b, shear_b, size=m)
    rotation = rng.uniform(-rot_b, rot_b, size=m)
    return DeformationParams(shift + 0.0, shear + 0.0, rotation + 0.0)


def simulate(volume: np.ndarray, angles, deformations: DeformationParams | None,
             snr_db: float | None, seed: int) -> TiltSeries:
    """Project, deform each tilt, then add noise at the requested SNR."""
    angles = np.asarray(angles, dtype=np.float64)
    if deformations is None:
        deformations = DeformationParams.zeros(len(angles))
    if len(deformations) != len(angles):
        raise ValueError(f"{len(deformations)} deformations for {len(angles)} tilts")
    clean = forward_all(volume, angles)
    deformed = np.stack([deform_image(img, deformations[m]) for m, img in enumerate(clean)])
    noisy = add_noise(deformed, snr_db, seed)
    return TiltSeries(noisy, angles, deformations.copy(), seed, snr_db)


def _grid(shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h = voxel_size(shape)
    axes = [(np.arange(n) - (n - 1) / 2.0) * h for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def _random_in_ball(rng: np.random.Generator, radius: float) -> np.ndarray:
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    return direction * radius * rng.uniform() ** (1.0 / 3.0)


def make_phantom(kind: str, n, seed: int = 0) -> np.ndarray:
    """Procedural test volumes: ``ball``, ``ellipsoids`` or ``blobs``.

    ``n`` is a side length or an explicit ``(N1, N2, N3)`` shape.
    """
    shape = (n, n, n) if np.isscalar(n) else tuple(int(s) for s in n)
    if min(shape) < 8:
        raise ValueError(f"phantom size must be at least 8, got {shape}")
    x, y, z = _grid(shape)
    pts = np.stack([x, y, z], axis=-1)
    rng = np.random.default_rng(seed)
    vol = np.zeros(shape)
    if kind == "ball":
        vol[x * x + y * y + z * z <= 0.25] = 1.0
    elif kind == "ellipsoids":
        for _ in range(8):
            centre = _random_in_ball(rng, 0.35)
            axes = rng.uniform(0.08, 0.3, size=3)
            rot = Rotation.random(random_state=rng).as_matrix()
            density = rng.uniform(0.2, 1.0)
            local = (pts - centre) @ rot
            vol[((local / axes) ** 2).sum(axis=-1) <= 1.0] += density
    elif kind == "blobs":
        for _ in range(20):
            centre = _random_in_ball(rng, 0.45)
            sigma = rng.uniform(0.04, 0.12, size=3)
            rot = Rotation.random(random_state=rng).as_matrix()
            amplitude = rng.uniform(0.2, 1.0)
            local = (pts - centre) @ rot
            vol += amplitude * np.exp(-0.5 * ((local / sigma) ** 2).sum(axis=-1))
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    return vol
