"""Two-shot fusion network: shared dual encoder, dual-skip decoder, residual add.

The network takes the Brenner-sharper capture y1 and the other capture y2.
Both run through ONE set of encoder weights (two contracting paths, shared
parameters).  The deepest features of the two paths are channel-concatenated
into the bottleneck; each decoder stage upsamples, concatenates the matching
skip features of BOTH paths, and applies two conv blocks.  A final 1x1
projection produces a correction that is added to y1, so a zeroed projection
makes the network the identity on y1.

Conv blocks are conv3x3 -> batchnorm -> ReLU.  All math is float64.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .focus import select_sharper

__all__ = [
    "TsvaConfig",
    "TsvaModel",
    "Checkpoint",
    "CheckpointError",
    "build",
    "forward",
    "backward",
    "train",
    "infer",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"VAFC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TsvaConfig:
    depth_levels: int = 3
    base_channels: int = 16
    input_channels: int = 1

    def __post_init__(self):
        if self.depth_levels < 2:
            raise ValueError("need at least 2 downsampling levels")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")

    def level_channels(self, level: int) -> int:
        return self.base_channels * (2**level)


@dataclass
class TsvaModel:
    config: TsvaConfig
    store: nn.ParamStore
    stats: dict  # bn name -> {"mean": (C,), "var": (C,)}


class CheckpointError(RuntimeError):
    """Raised for corrupt, truncated, or version-mismatched checkpoint files."""


@dataclass
class Checkpoint:
    version: int
    config: TsvaConfig
    params: dict
    stats: dict
    optimizer: dict | None = None
    metadata: dict = field(default_factory=dict)

    def to_model(self) -> TsvaModel:
        model = build(self.config, seed=0)
        for name, p in model.store.items():
            p.value[...] = self.params[name]
        for name, st in model.stats.items():
            st["mean"][...] = self.stats[name]["mean"]
            st["var"][...] = self.stats[name]["var"]
        return model


def _conv_init(rng, c_out, c_in, k):
    fan_in = c_in * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))


def build(config: TsvaConfig, seed: int) -> TsvaModel:
    """Deterministically initialised model.

    Hidden convolutions get Kaiming fan-in weights with zero biases; the final
    projection starts at zero so a fresh model reproduces y1 exactly and
    training begins from the residual identity.
    """
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    stats = {}

    def add_conv(name, c_out, c_in, k):
        store.add(f"{name}.w", _conv_init(rng, c_out, c_in, k))
        store.add(f"{name}.b", np.zeros(c_out))

    def add_bn(name, c):
        store.add(f"{name}.gamma", np.ones(c))
        store.add(f"{name}.beta", np.zeros(c))
        stats[name] = {"mean": np.zeros(c), "var": np.ones(c)}

    prev = config.input_channels
    for l in range(config.depth_levels):
        c = config.level_channels(l)
        add_conv(f"enc{l}.conv1", c, prev, 3)
        add_bn(f"enc{l}.bn1", c)
        add_conv(f"enc{l}.conv2", c, c, 3)
        add_bn(f"enc{l}.bn2", c)
        prev = c

    c_bott = config.level_channels(config.depth_levels)
    add_conv("bott.conv1", c_bott, 2 * prev, 3)
    add_bn("bott.bn1", c_bott)
    add_conv("bott.conv2", c_bott, c_bott, 3)
    add_bn("bott.bn2", c_bott)

    prev = c_bott
    for l in range(config.depth_levels - 1, -1, -1):
        c = config.level_channels(l)
        store.add(f"dec{l}.up.w", rng.normal(0.0, np.sqrt(2.0 / (prev * 4)), size=(prev, c, 2, 2)))
        store.add(f"dec{l}.up.b", np.zeros(c))
        add_conv(f"dec{l}.conv1", c, 3 * c, 3)
        add_bn(f"dec{l}.bn1", c)
        add_conv(f"dec{l}.conv2", c, c, 3)
        add_bn(f"dec{l}.bn2", c)
        prev = c

    store.add("head.w", np.zeros((config.input_channels, config.base_channels, 1, 1)))
    store.add("head.b", np.zeros(config.input_channels))
    return TsvaModel(config=config, store=store, stats=stats)


def parameter_count(config: TsvaConfig) -> int:
    """Closed-form parameter count of the block recipe (one shared encoder)."""

    def conv(c_out, c_in, k):
        return c_out * c_in * k * k + c_out

    def bn(c):
        return 2 * c

    total = 0
    prev = config.input_channels
    for l in range(config.depth_levels):
        c = config.level_channels(l)
        total += conv(c, prev, 3) + bn(c) + conv(c, c, 3) + bn(c)
        prev = c
    c_bott = config.level_channels(config.depth_levels)
    total += conv(c_bott, 2 * prev, 3) + bn(c_bott) + conv(c_bott, c_bott, 3) + bn(c_bott)
    prev = c_bott
    for l in range(config.depth_levels - 1, -1, -1):
        c = config.level_channels(l)
        total += prev * c * 4 + c  # up-convolution
        total += conv(c, 3 * c, 3) + bn(c) + conv(c, c, 3) + bn(c)
        prev = c
    total += conv(config.input_channels, config.base_channels, 1)
    return total


# ---------------------------------------------------------------------------
# forward / backward


def _cbr_forward(model, conv, bn, x, train, upd, padding=1):
    st = model.store
    out, c_conv = nn.conv2d_forward(x, st[f"{conv}.w"].value, st[f"{conv}.b"].value, padding)
    s = model.stats[bn]
    out, c_bn = nn.batchnorm_forward(
        out, st[f"{bn}.gamma"].value, st[f"{bn}.beta"].value, s["mean"], s["var"], train, upd
    )
    out, mask = nn.relu_forward(out)
    return out, (conv, bn, c_conv, c_bn, mask)


def _cbr_backward(model, cache, dout):
    conv, bn, c_conv, c_bn, mask = cache
    st = model.store
    dout = nn.relu_backward(dout, mask)
    dout, dgamma, dbeta = nn.batchnorm_backward(dout, c_bn)
    st[f"{bn}.gamma"].grad += dgamma
    st[f"{bn}.beta"].grad += dbeta
    dx, dw, db = nn.conv2d_backward(dout, c_conv)
    st[f"{conv}.w"].grad += dw
    st[f"{conv}.b"].grad += db
    return dx


def _encode(model, x, train, upd):
    skips, caches = [], []
    h = x
    for l in range(model.config.depth_levels):
        h, c1 = _cbr_forward(model, f"enc{l}.conv1", f"enc{l}.bn1", h, train, upd)
        h, c2 = _cbr_forward(model, f"enc{l}.conv2", f"enc{l}.bn2", h, train, upd)
        skips.append(h)
        h, cp = nn.maxpool2x2_forward(h)
        caches.append((c1, c2, cp))
    return h, skips, caches


def _encode_backward(model, caches, dskips, ddeep):
    g = ddeep
    for l in range(model.config.depth_levels - 1, -1, -1):
        c1, c2, cp = caches[l]
        g = nn.maxpool2x2_backward(g, cp)
        g = g + dskips[l]
        g = _cbr_backward(model, c2, g)
        g = _cbr_backward(model, c1, g)
    return g


def forward(model: TsvaModel, y1: np.ndarray, y2: np.ndarray, train: bool = False,
            update_stats: bool = None, want_tape: bool = False):
    """Run the network on NCHW batches; output = correction(y1, y2) + y1."""
    if y1.shape != y2.shape:
        raise ValueError("y1 and y2 must share a shape")
    n, c, h, w = y1.shape
    div = 2**model.config.depth_levels
    if h % div or w % div:
        raise ValueError(f"spatial dims must be divisible by {div}")
    if c != model.config.input_channels:
        raise ValueError("channel count does not match the model config")
    upd = train if update_stats is None else update_stats

    # Left path first, then right; both use the same encoder parameters.
    deep_l, skips_l, enc_l = _encode(model, y1, train, upd)
    deep_r, skips_r, enc_r = _encode(model, y2, train, upd)

    hfeat, c_merge = nn.concat_forward([deep_l, deep_r])
    hfeat, cb1 = _cbr_forward(model, "bott.conv1", "bott.bn1", hfeat, train, upd)
    hfeat, cb2 = _cbr_forward(model, "bott.conv2", "bott.bn2", hfeat, train, upd)

    dec_caches = []
    for l in range(model.config.depth_levels - 1, -1, -1):
        st = model.store
        hfeat, cu = nn.upconv2x2_forward(hfeat, st[f"dec{l}.up.w"].value, st[f"dec{l}.up.b"].value)
        hfeat, cc = nn.concat_forward([hfeat, skips_l[l], skips_r[l]])
        hfeat, cd1 = _cbr_forward(model, f"dec{l}.conv1", f"dec{l}.bn1", hfeat, train, upd)
        hfeat, cd2 = _cbr_forward(model, f"dec{l}.conv2", f"dec{l}.bn2", hfeat, train, upd)
        dec_caches.append((l, cu, cc, cd1, cd2))

    st = model.store
    correction, c_head = nn.conv2d_forward(hfeat, st["head.w"].value, st["head.b"].value, 0)
    out = correction + y1
    if not want_tape:
        return out
    tape = {
        "enc_l": enc_l,
        "enc_r": enc_r,
        "merge": c_merge,
        "bott": (cb1, cb2),
        "dec": dec_caches,
        "head": c_head,
        "levels": model.config.depth_levels,
    }
    return out, tape


def backward(model: TsvaModel, tape, dout: np.ndarray):
    """Accumulate parameter gradients; returns (dy1, dy2)."""
    st = model.store
    g, dw, db = nn.conv2d_backward(dout, tape["head"])
    st["head.w"].grad += dw
    st["head.b"].grad += db

    levels = tape["levels"]
    dskips_l = [None] * levels
    dskips_r = [None] * levels
    for l, cu, cc, cd1, cd2 in reversed(tape["dec"]):
        g = _cbr_backward(model, cd2, g)
        g = _cbr_backward(model, cd1, g)
        gup, gskl, gskr = nn.concat_backward(g, cc)
        dskips_l[l] = gskl
        dskips_r[l] = gskr
        g, dwu, dbu = nn.upconv2x2_backward(gup, cu)
        st[f"dec{l}.up.w"].grad += dwu
        st[f"dec{l}.up.b"].grad += dbu

    cb1, cb2 = tape["bott"]
    g = _cbr_backward(model, cb2, g)
    g = _cbr_backward(model, cb1, g)
    ddeep_l, ddeep_r = nn.concat_backward(g, tape["merge"])

    dy2 = _encode_backward(model, tape["enc_r"], dskips_r, ddeep_r)
    dy1 = _encode_backward(model, tape["enc_l"], dskips_l, ddeep_l)
    dy1 = dy1 + dout  # residual connection
    return dy1, dy2


# ---------------------------------------------------------------------------
# training / inference


@dataclass
class TrainReport:
    train_losses: list
    val_losses: list
    best_epoch: int
    best_val_loss: float


def _stack(records, ablation: bool):
    y1 = np.stack([r.y1 for r in records])[:, None, :, :]
    y2 = np.stack([r.y1 if ablation else r.y2 for r in records])[:, None, :, :]
    gt = np.stack([r.ground_truth for r in records])[:, None, :, :]
    return y1, y2, gt


def _eval_loss(model, y1, y2, gt, batch_size):
    total = 0.0
    n = y1.shape[0]
    for s in range(0, n, batch_size):
        sl = slice(s, s + batch_size)
        out = forward(model, y1[sl], y2[sl], train=False)
        diff = out - gt[sl]
        total += float(np.sum(diff * diff))
    return total / n


def train(model: TsvaModel, dataset, epochs: int, batch_size: int, seed: int,
          learning_rate: float = 5e-4, ablation: bool = False,
          progress=None) -> TrainReport:
    """Seeded mini-batch training; model ends at the best-validation epoch.

    With ablation=True, y1 is fed to both contracting paths (single-input
    control with identical architecture and budget).
    """
    if not dataset.train:
        raise ValueError("empty training set")
    if batch_size > len(dataset.train):
        raise ValueError("batch size exceeds the training set")
    y1, y2, gt = _stack(dataset.train, ablation)
    vy1, vy2, vgt = _stack(dataset.validation, ablation) if dataset.validation else (None, None, None)

    state = nn.AdamState(learning_rate=learning_rate)
    rng = np.random.default_rng(seed)
    n = y1.shape[0]
    train_losses, val_losses = [], []
    best = None  # (val_loss, epoch, params, stats)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(0, n, batch_size):
            idx = perm[s : s + batch_size]
            out, tape = forward(model, y1[idx], y2[idx], train=True, want_tape=True)
            loss, dpred = nn.mse_loss(out, gt[idx])
            epoch_loss += loss * len(idx)
            model.store.zero_grads()
            backward(model, tape, dpred)
            nn.adam_step(model.store, state)
        train_losses.append(epoch_loss / n)
        if vy1 is not None:
            vloss = _eval_loss(model, vy1, vy2, vgt, batch_size)
        else:
            vloss = train_losses[-1]
        val_losses.append(vloss)
        if best is None or vloss < best[0]:
            best = (
                vloss,
                epoch,
                {name: p.value.copy() for name, p in model.store.items()},
                copy.deepcopy(model.stats),
            )
        if progress is not None:
            progress(epoch, train_losses[-1], vloss)

    for name, p in model.store.items():
        p.value[...] = best[2][name]
    for name, s in model.stats.items():
        s["mean"][...] = best[3][name]["mean"]
        s["var"][...] = best[3][name]["var"]
    return TrainReport(
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=best[1],
        best_val_loss=best[0],
    )


def _pad_to_multiple(img: np.ndarray, div: int):
    h, w = img.shape
    ph = (-h) % div
    pw = (-w) % div
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="symmetric")
    return img, (h, w)


def infer(model_or_checkpoint, y1: np.ndarray, y2: np.ndarray, ablation: bool = False) -> np.ndarray:
    """Eval-mode recovery of the in-focus image from a two-shot pair.

    Inputs are ordered by Brenner score first; non-divisible sizes are
    reflection-padded and cropped back.  Output is clamped to [0, 1].
    """
    model = model_or_checkpoint
    if isinstance(model, Checkpoint):
        model = model.to_model()
    a, b = select_sharper(np.asarray(y1, dtype=float), np.asarray(y2, dtype=float))
    if ablation:
        b = a
    div = 2**model.config.depth_levels
    a, orig = _pad_to_multiple(a, div)
    b, _ = _pad_to_multiple(b, div)
    out = forward(model, a[None, None], b[None, None], train=False)[0, 0]
    return np.clip(out[: orig[0], : orig[1]], 0.0, 1.0)


# ---------------------------------------------------------------------------
# checkpoint serialization: JSON header + little-endian float64 blobs


def save_checkpoint(path, model: TsvaModel, optimizer: nn.AdamState = None, metadata: dict = None) -> None:
    entries = []
    blobs = []
    offset = 0

    def push(name, kind, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.store.items():
        push(name, "param", p.value)
    for name in sorted(model.stats):
        push(name, "stat_mean", model.stats[name]["mean"])
        push(name, "stat_var", model.stats[name]["var"])
    opt = None
    if optimizer is not None:
        opt = {
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "epsilon": optimizer.epsilon,
            "step": optimizer.step,
        }
        for name in sorted(optimizer.m):
            push(name, "opt_m", optimizer.m[name])
            push(name, "opt_v", optimizer.v[name])
    header = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "depth_levels": model.config.depth_levels,
            "base_channels": model.config.base_channels,
            "input_channels": model.config.input_channels,
        },
        "entries": entries,
        "optimizer": opt,
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(hbytes).to_bytes(8, "little"))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    hlen = int.from_bytes(data[4:12], "little")
    if len(data) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {header['version']} unsupported (expected {CHECKPOINT_VERSION})"
        )
    base = 12 + hlen
    params, stats = {}, {}
    opt_m, opt_v = {}, {}
    for e in header["entries"]:
        start = base + e["offset"]
        end = start + e["nbytes"]
        if end > len(data):
            raise CheckpointError(f"{path}: truncated blob for {e['name']}")
        arr = np.frombuffer(data[start:end], dtype="<f8").reshape(e["shape"]).astype(float)
        if e["kind"] == "param":
            params[e["name"]] = arr
        elif e["kind"] == "stat_mean":
            stats.setdefault(e["name"], {})["mean"] = arr
        elif e["kind"] == "stat_var":
            stats.setdefault(e["name"], {})["var"] = arr
        elif e["kind"] == "opt_m":
            opt_m[e["name"]] = arr
        elif e["kind"] == "opt_v":
            opt_v[e["name"]] = arr
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = dict(header["optimizer"], m=opt_m, v=opt_v)
    return Checkpoint(
        version=header["version"],
        config=TsvaConfig(**header["config"]),
        params=params,
        stats=stats,
        optimizer=optimizer,
        metadata=header["metadata"],
    )
