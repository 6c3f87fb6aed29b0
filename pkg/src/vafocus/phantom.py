"""Synthetic tissue phantoms and dataset assembly.

Phantoms are grayscale fields of elliptical "cells" (darker than background,
with a darker nucleus) distributed over a few depth layers around the focal
plane.  Datasets are built by drawing a Gaussian absolute focal offset per
phantom, rendering a two-shot capture pair, tiling into square patches,
adding the four rotations of each patch, and splitting 85/15 by patch
identity (all rotations of a patch land in the same split).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import imio
from .focus import select_sharper
from .imaging import DepthLayeredSample, add_sensor_noise, capture_pair
from .optics import OpticalConfig

__all__ = [
    "PhantomSpec",
    "PatchRecord",
    "DatasetSplit",
    "synth_phantom",
    "sample_absolute_offset",
    "build_dataset",
    "save_dataset",
    "load_dataset",
]

OFFSET_GRID_UM = 0.5
OFFSET_CLAMP_UM = 3.0
TRAIN_FRACTION = 0.85


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    width: int = 128
    height: int = 128
    cell_count_range: tuple = (10, 18)
    cell_radius_px_range: tuple = (4.0, 7.0)
    depth_relief_layers: int = 5
    background_level: float = 0.85
    cell_contrast_range: tuple = (0.25, 0.55)

    def __post_init__(self):
        if self.width < 64 or self.height < 64:
            raise ValueError("phantom must be at least 64x64")
        if self.depth_relief_layers < 1 or self.depth_relief_layers % 2 == 0:
            raise ValueError("depth_relief_layers must be a positive odd number")
        if not (0.0 <= self.background_level <= 1.0):
            raise ValueError("background_level must lie in [0, 1]")


@dataclass
class PatchRecord:
    y1: np.ndarray
    y2: np.ndarray
    ground_truth: np.ndarray
    delta_d_um: float
    absolute_offset_um: float
    source_phantom: str
    rotation: int  # degrees, one of 0/90/180/270
    patch_index: int = 0
    cell_count: int = 0


@dataclass
class DatasetSplit:
    train: list
    validation: list
    split_seed: int


def synth_phantom(spec: PhantomSpec, layer_spacing_um: float = 0.5) -> DepthLayeredSample:
    """Deterministic phantom with elliptical cells spread over depth layers.

    The true cell count and placements are recorded in the sample's meta dict.
    """
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.cell_count_range
    count = int(rng.integers(lo, hi + 1))
    half = (spec.depth_relief_layers - 1) // 2
    depth_offsets = np.arange(-half, half + 1)
    # Binomial weights centred on the focal layer.
    weights = np.array(
        [math.comb(spec.depth_relief_layers - 1, j + half) for j in depth_offsets], dtype=float
    )
    weights /= weights.sum()

    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    scene = np.full((spec.height, spec.width), spec.background_level)
    depth_map = np.zeros((spec.height, spec.width), dtype=int)

    r_lo, r_hi = spec.cell_radius_px_range
    centers = []
    placed = 0
    while placed < count:
        rx = rng.uniform(r_lo, r_hi)
        ry = rng.uniform(r_lo, r_hi)
        margin = max(rx, ry) + 2.0
        for attempt in range(200):
            cx = rng.uniform(margin, spec.width - margin)
            cy = rng.uniform(margin, spec.height - margin)
            if all((cx - px) ** 2 + (cy - py) ** 2 > (2.6 * max(rx, ry)) ** 2 for px, py in centers):
                break
        angle = rng.uniform(0.0, math.pi)
        level = rng.uniform(*spec.cell_contrast_range)
        depth = int(rng.choice(depth_offsets, p=weights))
        ca, sa = math.cos(angle), math.sin(angle)
        dx, dy = xx - cx, yy - cy
        u = (dx * ca + dy * sa) / rx
        v = (-dx * sa + dy * ca) / ry
        body = u * u + v * v <= 1.0
        nucleus = u * u + v * v <= 0.4**2
        scene[body] = level
        scene[nucleus] = 0.4 * level
        depth_map[body] = depth
        centers.append((cx, cy))
        placed += 1

    layers = []
    for m in depth_offsets:
        img = np.where(depth_map == m, scene, 0.0)
        layers.append((int(m), img))
    return DepthLayeredSample(
        layers=layers,
        layer_spacing_um=layer_spacing_um,
        in_focus_index=0,
        meta={"cell_count": count, "seed": spec.seed, "centers": centers},
    )


def sample_absolute_offset(rng) -> float:
    """Gaussian N(0, 1) focal offset in um, snapped to the 0.5 um grid, clamped to +/-3 um."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    z = rng.normal(0.0, 1.0)
    snapped = round(z / OFFSET_GRID_UM) * OFFSET_GRID_UM
    return float(min(max(snapped, -OFFSET_CLAMP_UM), OFFSET_CLAMP_UM))


def _tile(image: np.ndarray, patch_px: int):
    h, w = image.shape
    if h % patch_px or w % patch_px:
        raise ValueError("patch size must divide the phantom dimensions")
    for i in range(0, h, patch_px):
        for j in range(0, w, patch_px):
            yield image[i : i + patch_px, j : j + patch_px]


def build_dataset(
    specs,
    delta_d_um: float,
    patch_px: int,
    cfg: OpticalConfig,
    dataset_seed: int = 0,
    split_seed: int = 0,
    noise_sigma: float = 0.0,
) -> DatasetSplit:
    """Render capture pairs for each phantom and assemble the 85/15 split.

    Record order is fixed by (phantom index, patch index, rotation); the
    split shuffles patch identities only, so rotations never straddle splits.
    With noise_sigma > 0 the two captures (not the ground truth) get seeded
    sensor noise; each record is then re-ordered so y1 stays the
    Brenner-sharper patch.
    """
    offset_rng = np.random.default_rng(dataset_seed)
    records = []  # (identity, record) in fixed (phantom, patch, rotation) order
    identities = []
    for pi, spec in enumerate(specs):
        sample = synth_phantom(spec)
        offset = sample_absolute_offset(offset_rng)
        pair = capture_pair(sample, offset, delta_d_um, cfg)
        cap1, cap2 = pair.y1, pair.y2
        if noise_sigma > 0.0:
            cap1 = add_sensor_noise(cap1, noise_sigma, seed=dataset_seed + 2 * pi)
            cap2 = add_sensor_noise(cap2, noise_sigma, seed=dataset_seed + 2 * pi + 1)
        tiles = zip(_tile(cap1, patch_px), _tile(cap2, patch_px), _tile(pair.ground_truth, patch_px))
        for ti, (t1, t2, tg) in enumerate(tiles):
            identities.append((pi, ti))
            for k in range(4):
                # Re-order per record: Brenner is orientation-sensitive, so
                # the sharper-first contract is enforced after rotation.
                r1, r2 = select_sharper(np.rot90(t1, k).copy(), np.rot90(t2, k).copy())
                records.append(
                    (
                        (pi, ti),
                        PatchRecord(
                        y1=r1,
                        y2=r2,
                        ground_truth=np.rot90(tg, k).copy(),
                        delta_d_um=float(delta_d_um),
                        absolute_offset_um=offset,
                        source_phantom=f"phantom-{spec.seed}",
                        rotation=90 * k,
                            patch_index=ti,
                            cell_count=sample.meta["cell_count"],
                        ),
                    )
                )
    split_rng = np.random.default_rng(split_seed)
    order = split_rng.permutation(len(identities))
    n_train = round(TRAIN_FRACTION * len(identities))
    train_ids = {identities[i] for i in order[:n_train]}
    train, validation = [], []
    for key, rec in records:
        (train if key in train_ids else validation).append(rec)
    return DatasetSplit(train=train, validation=validation, split_seed=split_seed)


def save_dataset(split: DatasetSplit, root) -> None:
    """Write the on-disk layout: per-record directories plus a manifest."""
    os.makedirs(root, exist_ok=True)
    manifest = {"split_seed": split.split_seed, "train": [], "validation": []}
    for part, recs in (("train", split.train), ("validation", split.validation)):
        for i, rec in enumerate(recs):
            rel = f"{part}/{i:06d}"
            rdir = os.path.join(root, rel)
            os.makedirs(rdir, exist_ok=True)
            imio.write_pgm(os.path.join(rdir, "y1.pgm"), rec.y1)
            imio.write_pgm(os.path.join(rdir, "y2.pgm"), rec.y2)
            imio.write_pgm(os.path.join(rdir, "gt.pgm"), rec.ground_truth)
            meta = {
                "delta_d_um": rec.delta_d_um,
                "absolute_offset_um": rec.absolute_offset_um,
                "rotation": rec.rotation,
                "source_phantom": rec.source_phantom,
                "patch_index": rec.patch_index,
                "cell_count": rec.cell_count,
            }
            with open(os.path.join(rdir, "meta.json"), "w") as fh:
                json.dump(meta, fh, indent=1, sort_keys=True)
            manifest[part].append(rel)
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_dataset(root) -> DatasetSplit:
    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    parts = {}
    for part in ("train", "validation"):
        recs = []
        for rel in manifest[part]:
            rdir = os.path.join(root, rel)
            with open(os.path.join(rdir, "meta.json")) as fh:
                meta = json.load(fh)
            recs.append(
                PatchRecord(
                    y1=imio.read_pgm(os.path.join(rdir, "y1.pgm")),
                    y2=imio.read_pgm(os.path.join(rdir, "y2.pgm")),
                    ground_truth=imio.read_pgm(os.path.join(rdir, "gt.pgm")),
                    delta_d_um=meta["delta_d_um"],
                    absolute_offset_um=meta["absolute_offset_um"],
                    source_phantom=meta["source_phantom"],
                    rotation=meta["rotation"],
                    patch_index=meta["patch_index"],
                    cell_count=meta["cell_count"],
                )
            )
        parts[part] = recs
    return DatasetSplit(train=parts["train"], validation=parts["validation"], split_seed=manifest["split_seed"])
