"""Defocus point-spread-function model of a widefield microscope objective.

The PSF follows the scalar Born & Wolf pupil integral: intensity at lateral
radius r and defocus distance dD is the squared magnitude of

    int_0^1  J0(k * (NA/n) * r * rho) * exp(-1/2 i k rho^2 dD (NA/n)^2) * rho  d rho,

evaluated here by fixed-node Gauss-Legendre quadrature.  Kernels are sampled
on a centred pixel grid and normalised to unit sum, so convolution with a
kernel preserves image flux regardless of truncation radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = ["OpticalConfig", "PsfKernel", "bessel_j0", "psf_value", "build_kernel"]


@dataclass(frozen=True)
class OpticalConfig:
    """Physical and numerical parameters of the defocus PSF model."""

    numerical_aperture: float = 0.75
    refractive_index: float = 1.0
    wavelength_um: float = 0.55
    pixel_pitch_um: float = 0.3
    kernel_radius_px: int = 15
    quadrature_nodes: int = 128

    def __post_init__(self):
        if not (0.0 < self.numerical_aperture < self.refractive_index):
            raise ValueError("require 0 < NA < refractive index")
        if self.wavelength_um <= 0.0:
            raise ValueError("wavelength must be positive")
        if self.pixel_pitch_um <= 0.0:
            raise ValueError("pixel pitch must be positive")
        if self.kernel_radius_px < 1:
            raise ValueError("kernel radius must be >= 1 px")
        if self.quadrature_nodes < 16:
            raise ValueError("need at least 16 quadrature nodes")

    @property
    def wavenumber(self) -> float:
        """Angular wavenumber k = 2*pi/lambda in rad/um."""
        return 2.0 * math.pi / self.wavelength_um


@dataclass(frozen=True)
class PsfKernel:
    """A discretised, unit-sum PSF sampled for one defocus distance."""

    defocus_um: float
    samples: np.ndarray  # square, side 2*kernel_radius_px + 1, sum == 1

    @property
    def radius_px(self) -> int:
        return self.samples.shape[0] // 2


# Series/asymptotic split for J0.  Below the split a plain power series
# keeps cancellation error ~1e-12; above it the Hankel expansion's smallest
# term is already below 1e-10.  A split at 8 (the textbook choice) leaves the
# asymptotic branch at ~3e-8 absolute error, which misses the 1e-10 budget.
_J0_SPLIT = 12.0


def _j0_series(x: np.ndarray) -> np.ndarray:
    q = 0.25 * x * x
    term = np.ones_like(x)
    acc = np.ones_like(x)
    for k in range(1, 60):
        term = term * (-q) / (k * k)
        acc += term
    return acc


def _j0_asymptotic(x: np.ndarray) -> np.ndarray:
    # J0(x) ~ sqrt(2/(pi x)) * (P cos(x - pi/4) - Q sin(x - pi/4))
    # with P, Q the even/odd Hankel series; 20 terms suffice for x >= 12.
    inv8x = 1.0 / (8.0 * x)
    p = np.ones_like(x)
    q = np.zeros_like(x)
    term = np.ones_like(x)
    for m in range(1, 21):
        term = term * ((2 * m - 1) ** 2 / m) * inv8x
        sign = -1.0 if ((m + 1) // 2) % 2 == 1 else 1.0
        if m % 2 == 1:  # odd terms feed Q: -T1 + T3 - T5 ...
            q += sign * term
        else:  # even terms feed P: 1 - T2 + T4 ...
            p += sign * term
    chi = x - 0.25 * math.pi
    return np.sqrt(2.0 / (math.pi * x)) * (p * np.cos(chi) - q * np.sin(chi))


def bessel_j0(x):
    """Zero-order Bessel function of the first kind.

    Accepts scalars or arrays; absolute error <= 1e-10 for |x| <= 100.
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("bessel_j0 requires finite input")
    ax = np.abs(arr)
    scalar = arr.ndim == 0
    ax = np.atleast_1d(ax)
    out = np.empty_like(ax)
    small = ax < _J0_SPLIT
    if np.any(small):
        out[small] = _j0_series(ax[small])
    if np.any(~small):
        out[~small] = _j0_asymptotic(ax[~small])
    return float(out[0]) if scalar else out.reshape(arr.shape)


@lru_cache(maxsize=8)
def _unit_legendre_rule(n: int):
    """Gauss-Legendre nodes/weights mapped from [-1, 1] to [0, 1]."""
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def _psf_values(r_um: np.ndarray, defocus_um: float, cfg: OpticalConfig) -> np.ndarray:
    """Vectorised un-normalised PSF over an array of radii."""
    rho, w = _unit_legendre_rule(cfg.quadrature_nodes)
    na_ratio = cfg.numerical_aperture / cfg.refractive_index
    k = cfg.wavenumber
    # (nodes, radii) Bessel matrix; the defocus phase depends on rho only.
    arg = np.multiply.outer(k * na_ratio * rho, r_um)
    j0 = bessel_j0(arg.ravel()).reshape(arg.shape)
    phase = np.exp(-0.5j * k * defocus_um * na_ratio**2 * rho**2)
    integral = (w * rho * phase) @ j0
    return np.abs(integral) ** 2


def psf_value(r_um: float, defocus_um: float, cfg: OpticalConfig) -> float:
    """Un-normalised PSF intensity at lateral radius r_um and defocus defocus_um."""
    if not (r_um >= 0.0):
        raise ValueError("radius must be nonnegative")
    return float(_psf_values(np.asarray([r_um], dtype=float), defocus_um, cfg)[0])


def build_kernel(defocus_um: float, cfg: OpticalConfig) -> PsfKernel:
    """Sample the PSF on a centred pixel grid and normalise it to unit sum."""
    c = cfg.kernel_radius_px
    side = 2 * c + 1
    idx = np.arange(side) - c
    r = cfg.pixel_pitch_um * np.hypot(idx[:, None], idx[None, :])
    # The grid is radially redundant; evaluate each unique radius once.
    flat = r.ravel()
    uniq, inverse = np.unique(flat, return_inverse=True)
    vals = _psf_values(uniq, defocus_um, cfg)[inverse].reshape(side, side)
    total = vals.sum()
    if total <= 0.0 or not np.isfinite(total):
        raise ArithmeticError("PSF kernel evaluated to a non-positive sum")
    samples = vals / total
    samples.flags.writeable = False
    return PsfKernel(defocus_um=float(defocus_um), samples=samples)


@lru_cache(maxsize=512)
def _cached_kernel(defocus_um: float, cfg: OpticalConfig) -> PsfKernel:
    # Kernel samples are frozen read-only, so sharing across callers is safe.
    return build_kernel(defocus_um, cfg)


def cached_kernel(defocus_um: float, cfg: OpticalConfig) -> PsfKernel:
    """Memoised build_kernel; rendering sweeps reuse per-depth kernels heavily."""
    return _cached_kernel(round(float(defocus_um), 9), cfg)
