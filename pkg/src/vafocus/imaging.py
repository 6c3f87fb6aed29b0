"""Rendering of in-focus and defocused captures from depth-layered samples.

A specimen is modelled as discrete depth layers x_m on a common pixel grid.
A capture at axial shift s (in layer units) is

    Y = sum_m  x_{m+s} (*) h_m,

where h_m is the unit-sum PSF kernel for defocus m * layer_spacing_um.
Two-shot pairs are rendered symmetrically around the current focal plane and
ordered so y1 is the Brenner-sharper capture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import focus as focusmod
from .optics import OpticalConfig, PsfKernel, cached_kernel

__all__ = [
    "DepthLayeredSample",
    "CapturePair",
    "convolve2d",
    "render",
    "capture_pair",
    "generate_zstack",
    "add_sensor_noise",
]

_GRID_EPS = 1e-9


@dataclass
class DepthLayeredSample:
    """Depth-decomposed specimen: layers[(m, x_m)] on one pixel grid."""

    layers: list  # list of (depth_index: int, image: 2-D float array in [0, 1])
    layer_spacing_um: float = 0.5
    in_focus_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("sample needs at least one layer")
        if self.layer_spacing_um <= 0.0:
            raise ValueError("layer spacing must be positive")
        indices = [m for m, _ in self.layers]
        if len(set(indices)) != len(indices):
            raise ValueError("layer depth indices must be unique")
        shapes = {np.shape(img) for _, img in self.layers}
        if len(shapes) != 1:
            raise ValueError("all layers must share one shape")
        for _, img in self.layers:
            arr = np.asarray(img)
            if arr.min() < -_GRID_EPS or arr.max() > 1.0 + _GRID_EPS:
                raise ValueError("layer pixel values must lie in [0, 1]")

    @property
    def shape(self):
        return np.shape(self.layers[0][1])


@dataclass
class CapturePair:
    """Two defocused captures around the focal plane plus the in-focus truth."""

    y1: np.ndarray
    y2: np.ndarray
    ground_truth: np.ndarray
    delta_d_um: float
    absolute_offset_um: float
    y1_is_minus_side: bool


def convolve2d(image: np.ndarray, kernel: np.ndarray, boundary: str = "reflect") -> np.ndarray:
    """Same-shape 2-D convolution with edge-inclusive reflection padding."""
    img = np.asarray(image, dtype=float)
    ker = np.asarray(kernel, dtype=float)
    if img.ndim != 2 or ker.ndim != 2:
        raise ValueError("convolve2d expects 2-D arrays")
    kh, kw = ker.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel sides must be odd")
    if kh > img.shape[0] or kw > img.shape[1]:
        raise ValueError("kernel must not exceed the image")
    if boundary != "reflect":
        raise ValueError(f"unsupported boundary mode: {boundary!r}")
    pad = np.pad(img, ((kh // 2, kh // 2), (kw // 2, kw // 2)), mode="symmetric")
    windows = sliding_window_view(pad, (kh, kw))
    # True convolution: flip the kernel so a centred impulse reproduces it.
    return np.tensordot(windows, ker[::-1, ::-1], axes=([2, 3], [0, 1]))


def render(sample: DepthLayeredSample, shift_layers: int, cfg: OpticalConfig) -> np.ndarray:
    """Capture of the sample with the focal plane shifted by whole layers.

    Layer p contributes x_p convolved with the kernel at defocus
    (p - shift - in_focus_index) * layer_spacing_um.  Output is not clamped.
    """
    out = np.zeros(sample.shape, dtype=float)
    # Fixed summation order (stored layer order) keeps renders deterministic.
    for p, img in sample.layers:
        defocus = (p - shift_layers - sample.in_focus_index) * sample.layer_spacing_um
        kern = cached_kernel(defocus, cfg)
        out += convolve2d(np.asarray(img, dtype=float), kern.samples)
    return out


def _layer_shift(offset_um: float, spacing_um: float, what: str) -> int:
    ratio = offset_um / spacing_um
    shift = round(ratio)
    if abs(ratio - shift) > 1e-6:
        raise ValueError(f"{what} must be an integer multiple of the layer spacing")
    return int(shift)


def capture_pair(
    sample: DepthLayeredSample,
    absolute_offset_um: float,
    delta_d_um: float,
    cfg: OpticalConfig,
) -> CapturePair:
    """Render the two-shot pair at absolute_offset -/+ delta_d around focus.

    y1 is the Brenner-sharper capture; ties within 1e-12 give the minus-side
    capture, so datasets are reproducible.
    """
    if delta_d_um <= 0.0:
        raise ValueError("delta_d_um must be positive")
    spacing = sample.layer_spacing_um
    shift_minus = _layer_shift(absolute_offset_um - delta_d_um, spacing, "capture offset")
    shift_plus = _layer_shift(absolute_offset_um + delta_d_um, spacing, "capture offset")
    minus = render(sample, shift_minus, cfg)
    plus = render(sample, shift_plus, cfg)
    gt = render(sample, 0, cfg)
    score_minus = focusmod.brenner_value(minus)
    score_plus = focusmod.brenner_value(plus)
    minus_first = score_plus <= score_minus + 1e-12
    y1, y2 = (minus, plus) if minus_first else (plus, minus)
    return CapturePair(
        y1=y1,
        y2=y2,
        ground_truth=gt,
        delta_d_um=float(delta_d_um),
        absolute_offset_um=float(absolute_offset_um),
        y1_is_minus_side=minus_first,
    )


def generate_zstack(
    sample: DepthLayeredSample,
    min_um: float = -10.0,
    max_um: float = 10.0,
    step_um: float = 0.5,
    cfg: OpticalConfig = None,
):
    """Render one capture per focal offset from min_um to max_um inclusive."""
    if cfg is None:
        cfg = OpticalConfig()
    if step_um <= 0.0:
        raise ValueError("step must be positive")
    span = max_um - min_um
    count = round(span / step_um)
    if abs(span - count * step_um) > 1e-9:
        raise ValueError("step must divide the offset range")
    stack = []
    for i in range(count + 1):
        offset = min_um + i * step_um
        shift = _layer_shift(offset, sample.layer_spacing_um, "z-stack offset")
        stack.append((offset, render(sample, shift, cfg)))
    return stack


def add_sensor_noise(image: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Additive zero-mean Gaussian noise, clamped to [0, 1]; deterministic per seed."""
    if sigma < 0.0:
        raise ValueError("sigma must be nonnegative")
    img = np.asarray(image, dtype=float)
    if sigma == 0.0:
        return img.copy()
    rng = np.random.default_rng(seed)
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)
