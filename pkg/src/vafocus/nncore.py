"""Minimal dense-tensor layer set with hand-written reverse-mode gradients.

Everything operates on NCHW float64 arrays ("Tensor4").  Each op comes as a
forward function returning (output, cache) and a matching backward taking
(grad_output, cache).  Callers own the graph: they call backwards in reverse
order and accumulate parameter gradients with +=, which makes weight sharing
(the same conv applied to several inputs) work without any bookkeeping here.

Convolutions use im2col + GEMM, which is where essentially all training time
goes; keep these paths allocation-lean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Parameter",
    "ParamStore",
    "AdamState",
    "adam_step",
    "conv2d_forward",
    "conv2d_backward",
    "relu_forward",
    "relu_backward",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "upconv2x2_forward",
    "upconv2x2_backward",
    "concat_forward",
    "concat_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "mse_loss",
    "grad_check",
]


class Parameter:
    """A learnable array with a same-shape gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)


class ParamStore:
    """Named parameters with deterministic (sorted-by-name) iteration."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        p = Parameter(value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grads(self):
        for p in self._params.values():
            p.grad[...] = 0.0

    def total_count(self) -> int:
        return sum(p.value.size for p in self._params.values())


@dataclass
class AdamState:
    """Bias-corrected Adam optimizer state."""

    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> None:
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.value -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, out_h: int, out_w: int) -> np.ndarray:
    # xp: padded (N, C, Hp, Wp) -> (N*out_h*out_w, C*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, :out_h, :out_w]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        xp.shape[0] * out_h * out_w, -1
    )


def _correlate(x: np.ndarray, w: np.ndarray, padding: int, bias: np.ndarray = None):
    """im2col + GEMM cross-correlation.

    Returns (out, cols) where out is an NCHW *view* of the NHWC GEMM result;
    the next elementwise op materialises it, so no extra copy is spent here.
    """
    n = x.shape[0]
    c_out, _, kh, kw = w.shape
    out_h = x.shape[2] + 2 * padding - kh + 1
    out_w = x.shape[3] + 2 * padding - kw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, out_h, out_w)
    out = cols @ w.reshape(c_out, -1).T
    if bias is not None:
        out += bias  # broadcast over the contiguous channel-last layout
    return out.reshape(n, out_h, out_w, c_out).transpose(0, 3, 1, 2), cols


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: int):
    """Cross-correlation with square kernel; weight (C_out, C_in, kh, kw)."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, weight expects {w.shape[1]}")
    out, cols = _correlate(x, w, padding, bias=b)
    cache = (cols, w, x.shape, padding)
    return out, cache


def conv2d_backward(dout: np.ndarray, cache):
    cols, w, x_shape, padding = cache
    c_out, _, kh, kw = w.shape
    g = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, c_out)
    dw = (g.T @ cols).reshape(w.shape)
    db = g.sum(axis=0)
    # Input gradient is the full correlation of dout with the spatially
    # flipped, channel-swapped weights; this keeps everything in GEMMs.
    w_flip = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    dx, _ = _correlate(dout, w_flip, kh - 1 - padding)
    return dx, dw, db


def conv3x3_forward(x, w, b):
    return conv2d_forward(x, w, b, padding=1)


conv3x3_backward = conv2d_backward


# ---------------------------------------------------------------------------
# pointwise / pooling


def relu_forward(x: np.ndarray):
    mask = x > 0.0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask):
    return dout * mask


def maxpool2x2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("maxpool2x2 requires even spatial dimensions")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    # argmax is first-occurrence, which pins the tie rule for backward.
    arg = win.argmax(axis=4)
    out = np.take_along_axis(win, arg[..., None], axis=4)[..., 0]
    return out, (arg, x.shape)


def maxpool2x2_backward(dout: np.ndarray, cache):
    arg, (n, c, h, w) = cache
    dwin = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=4)
    return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def upconv2x2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Transposed 2x2 convolution with stride 2; weight (C_in, C_out, 2, 2).

    Stride equals kernel size, so output pixels never overlap.
    """
    n, c_in, h, wd = x.shape
    if w.shape[0] != c_in:
        raise ValueError(f"channel mismatch: input {c_in}, weight expects {w.shape[0]}")
    c_out = w.shape[1]
    out = np.empty((n, c_out, 2 * h, 2 * wd))
    for a in range(2):
        for bb in range(2):
            piece = np.tensordot(x, w[:, :, a, bb], axes=([1], [0]))  # (N, H, W, C_out)
            out[:, :, a::2, bb::2] = piece.transpose(0, 3, 1, 2)
    out += b[None, :, None, None]
    return out, (x, w)


def upconv2x2_backward(dout: np.ndarray, cache):
    x, w = cache
    n, c_in, h, wd = x.shape
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for a in range(2):
        for bb in range(2):
            d = dout[:, :, a::2, bb::2]  # (N, C_out, H, W)
            dx += np.tensordot(d, w[:, :, a, bb], axes=([1], [1])).transpose(0, 3, 1, 2)
            dw[:, :, a, bb] = np.tensordot(x, d, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def concat_forward(parts):
    parts = list(parts)
    base = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ValueError("concat parts must agree on batch and spatial dims")
    sizes = [p.shape[1] for p in parts]
    return np.concatenate(parts, axis=1), sizes


def concat_backward(dout: np.ndarray, sizes):
    grads = []
    start = 0
    for s in sizes:
        grads.append(dout[:, start : start + s])
        start += s
    return grads


# ---------------------------------------------------------------------------
# batch normalization

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool, update_stats: bool = True):
    """Per-channel normalization over (N, H, W).

    In train mode statistics come from the batch (biased variance) and the
    running buffers are updated in place with momentum 0.1 unless
    update_stats is False; eval mode normalizes with the running buffers.
    """
    if train:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ValueError("train-mode batchnorm needs at least 2 samples per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            running_mean *= 1.0 - BN_MOMENTUM
            running_mean += BN_MOMENTUM * mean
            running_var *= 1.0 - BN_MOMENTUM
            running_var += BN_MOMENTUM * var
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, invstd, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, invstd, gamma, train = cache
    axes = (0, 2, 3)
    dgamma = np.sum(dout * xhat, axis=axes)
    dbeta = np.sum(dout, axis=axes)
    if train:
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        dx = (gamma * invstd)[None, :, None, None] / m * (
            m * dout
            - dbeta[None, :, None, None]
            - xhat * dgamma[None, :, None, None]
        )
    else:
        dx = dout * (gamma * invstd)[None, :, None, None]
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# loss and gradient checking


def mse_loss(prediction: np.ndarray, target: np.ndarray):
    """Per-image sum of squared pixel errors, averaged over the batch.

    Returns (loss, dloss/dprediction).
    """
    if prediction.shape != target.shape:
        raise ValueError("prediction and target shapes must match")
    n = prediction.shape[0]
    diff = prediction - target
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n


def grad_check(loss_fn, arrays: dict, analytic: dict, step: float = 1e-5, floor: float = 1e-4,
               limit: int = None, seed: int = 0):
    """Compare analytic gradients against central finite differences.

    loss_fn re-evaluates the scalar loss reading `arrays` in place; `analytic`
    maps the same names to precomputed gradients.  Relative error uses a
    small absolute floor so near-zero gradients do not dominate the report.
    With `limit`, at most that many coordinates per array are probed (a seeded
    sample without replacement); otherwise every coordinate is checked.
    Returns {name: max_relative_error} plus "__max__".
    """
    rng = np.random.default_rng(seed)
    report = {}
    worst = 0.0
    for name, arr in arrays.items():
        grad = analytic[name]
        max_rel = 0.0
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        if limit is not None and flat.size > limit:
            indices = rng.choice(flat.size, size=limit, replace=False)
        else:
            indices = range(flat.size)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            a = gflat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), floor)
            max_rel = max(max_rel, rel)
        report[name] = max_rel
        worst = max(worst, max_rel)
    report["__max__"] = worst
    return report
