"""Independent reference implementations used only by tests.

These deliberately avoid the library's fast paths: a truncated power series
and bisection for Bessel values, composite Simpson quadrature for the pupil
integral, and nested-loop convolution.
"""

import numpy as np


def j0_power_series(x: float, terms: int = 40) -> float:
    total = 0.0
    term = 1.0
    q = 0.25 * x * x
    for k in range(terms):
        if k > 0:
            term *= -q / (k * k)
        total += term
    return total


def j0_first_zero(lo: float = 2.0, hi: float = 3.0, iters: int = 200) -> float:
    f_lo = j0_power_series(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if j0_power_series(mid) * f_lo > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def simpson_psf(r_um: float, defocus_um: float, cfg, intervals: int = 4096) -> float:
    """High-resolution composite-Simpson evaluation of the pupil integral."""
    from vafocus.optics import bessel_j0

    rho = np.linspace(0.0, 1.0, intervals + 1)
    k = cfg.wavenumber
    na = cfg.numerical_aperture / cfg.refractive_index
    f = bessel_j0(k * na * r_um * rho) * np.exp(-0.5j * k * defocus_um * na**2 * rho**2) * rho
    w = np.ones(intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return abs(np.sum(w * f) / (3.0 * intervals)) ** 2


def conv2d_loop(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Quadruple-loop same-shape convolution with symmetric padding."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    pad = np.pad(image, ((ph, ph), (pw, pw)), mode="symmetric")
    out = np.zeros_like(image, dtype=float)
    h, w = image.shape
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(kh):
                for b in range(kw):
                    acc += kernel[a, b] * pad[i + ph - (a - ph), j + pw - (b - pw)]
            out[i, j] = acc
    return out


def conv_nchw_loop(x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: int) -> np.ndarray:
    """Direct NCHW cross-correlation (zero padding), matching conv2d_forward."""
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = h + 2 * padding - kh + 1
    ow = wd + 2 * padding - kw + 1
    out = np.zeros((n, c_out, oh, ow))
    for ni in range(n):
        for co in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    out[ni, co, i, j] = b[co] + np.sum(w[co] * xp[ni, :, i : i + kh, j : j + kw])
    return out
