"""SNR, Fourier shell correlation and deformation-error summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import DeformationParams, voxel_size

__all__ = [
    "FscCurve",
    "DeformationErrorSummary",
    "snr_db",
    "fsc",
    "fsc_resolution",
    "deformation_error",
]


@dataclass
class FscCurve:
    frequency: np.ndarray     # shell centres, cycles per unit length
    correlation: np.ndarray
    empty: np.ndarray         # True where a shell had no power
    nyquist: float

    def __len__(self):
        return self.frequency.size


@dataclass(frozen=True)
class DeformationErrorSummary:
    shift_px: float
    shear_pct: float
    rotation_deg: float

    def as_row(self) -> tuple[float, float, float]:
        return (self.shift_px, self.shear_pct, self.rotation_deg)


def snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    """``10 log10(Var(signal) / Var(noise))`` over all elements."""
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if signal.shape != noise.shape:
        raise ValueError(f"shape mismatch {signal.shape} vs {noise.shape}")
    noise_var = noise.var()
    if noise_var <= 0.0:
        raise ValueError("noise has zero variance")
    return 10.0 * math.log10(signal.var() / noise_var)


def fsc(v1: np.ndarray, v2: np.ndarray, shells: int | None = None) -> FscCurve:
    """Fourier shell correlation in equal-width radial shells up to Nyquist.

    Frequencies are in cycles per unit length of the ``[-1, 1]`` grid; the
    DC term falls in shell 0 and corners beyond Nyquist are dropped.
    """
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape:
        raise ValueError(f"shape mismatch {v1.shape} vs {v2.shape}")
    h = voxel_size(v1.shape)
    if shells is None:
        shells = max(v1.shape) // 2
    nyquist = 0.5 / h
    f1 = np.fft.fftn(v1)
    f2 = np.fft.fftn(v2)
    freqs = np.meshgrid(*[np.fft.fftfreq(n, d=h) for n in v1.shape], indexing="ij")
    radius = np.sqrt(sum(f * f for f in freqs))
    index = np.floor(radius / nyquist * shells).astype(np.int64).ravel()
    inside = index < shells
    index = index[inside]
    cross = np.bincount(index, (f1 * np.conj(f2)).real.ravel()[inside], minlength=shells)
    p1 = np.bincount(index, (np.abs(f1) ** 2).ravel()[inside], minlength=shells)
    p2 = np.bincount(index, (np.abs(f2) ** 2).ravel()[inside], minlength=shells)
    denom = np.sqrt(p1 * p2)
    empty = denom <= 0.0
    corr = np.where(empty, 0.0, cross / np.where(empty, 1.0, denom))
    edges = np.linspace(0.0, nyquist, shells + 1)
    return FscCurve(0.5 * (edges[:-1] + edges[1:]), corr, empty, nyquist)


def fsc_resolution(curve: FscCurve, threshold: float = 0.5) -> float:
    """First frequency at which the curve drops below ``threshold``.

    Linearly interpolated between shell centres; Nyquist if it never drops.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    c, f = curve.correlation, curve.frequency
    below = np.flatnonzero(c < threshold)
    if below.size == 0:
        return float(curve.nyquist)
    i = int(below[0])
    if i == 0:
        return float(f[0])
    frac = (c[i - 1] - threshold) / (c[i - 1] - c[i])
    return float(f[i - 1] + frac * (f[i] - f[i - 1]))


def deformation_error(est: DeformationParams, truth: DeformationParams,
                      remove_global_shift: bool = False) -> DeformationErrorSummary:
    """Mean Euclidean shift error (px), mean |shear| error (%), mean |rotation| error (deg).

    ``remove_global_shift`` subtracts the mean shift residual first, which
    discounts a common translation of all projections.
    """
    if len(est) != len(truth):
        raise ValueError(f"{len(est)} estimates for {len(truth)} true deformations")
    ds = est.shift - truth.shift
    if remove_global_shift:
        ds = ds - ds.mean(axis=0)
    return DeformationErrorSummary(
        float(np.linalg.norm(ds, axis=1).mean()),
        float(100.0 * np.abs(est.shear - truth.shear).mean()),
        float(np.abs(est.rotation - truth.rotation).mean()),
    )
