import numpy as np
import pytest

from vafocus.focus import brenner_value
from vafocus.phantom import (
    DatasetSplit,
    PhantomSpec,
    build_dataset,
    load_dataset,
    sample_absolute_offset,
    save_dataset,
    synth_phantom,
)
from vafocus.pipeline import psnr


def small_specs(n, seed0=50, size=64):
    return [
        PhantomSpec(seed=seed0 + i, width=size, height=size, cell_count_range=(4, 6),
                    cell_radius_px_range=(3.0, 5.0))
        for i in range(n)
    ]


class TestSynthPhantom:
    def test_deterministic(self):
        spec = PhantomSpec(seed=123)
        a = synth_phantom(spec)
        b = synth_phantom(spec)
        for (ma, xa), (mb, xb) in zip(a.layers, b.layers):
            assert ma == mb
            assert np.array_equal(xa, xb)

    def test_forced_cell_count(self):
        spec = PhantomSpec(seed=1, cell_count_range=(20, 20))
        assert synth_phantom(spec).meta["cell_count"] == 20

    def test_single_layer_degenerate(self):
        spec = PhantomSpec(seed=2, depth_relief_layers=1)
        sample = synth_phantom(spec)
        assert [m for m, _ in sample.layers] == [0]

    def test_layers_partition_scene(self):
        sample = synth_phantom(PhantomSpec(seed=3))
        total = sum(img for _, img in sample.layers)
        assert total.min() > 0.0  # background everywhere
        assert total.max() <= 1.0

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            PhantomSpec(seed=0, width=32)
        with pytest.raises(ValueError):
            PhantomSpec(seed=0, depth_relief_layers=4)


class TestAbsoluteOffset:
    def test_grid_and_clamp(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            off = sample_absolute_offset(rng)
            assert -3.0 <= off <= 3.0
            assert off == round(off / 0.5) * 0.5

    def test_moments_and_mass(self):
        rng = np.random.default_rng(1)
        draws = np.array([sample_absolute_offset(rng) for _ in range(100_000)])
        assert abs(draws.mean()) < 0.02
        near = np.mean(np.abs(draws) <= 0.5)
        far = np.mean(np.abs(draws) >= 2.0)
        assert near > far

    def test_distribution_matches_discretized_gaussian(self):
        from math import erf, sqrt

        rng = np.random.default_rng(2)
        draws = np.array([sample_absolute_offset(rng) for _ in range(20_000)])
        grid = np.arange(-3.0, 3.01, 0.5)

        def cdf(x):
            return 0.5 * (1.0 + erf(x / sqrt(2.0)))

        tv = 0.0
        for g in grid:
            if g <= -3.0:
                p = cdf(-2.75)
            elif g >= 3.0:
                p = 1.0 - cdf(2.75)
            else:
                p = cdf(g + 0.25) - cdf(g - 0.25)
            tv += abs(np.mean(draws == g) - p)
        assert tv / 2.0 < 0.02


class TestBuildDataset:
    def test_counts_and_rotations(self, small_cfg):
        split = build_dataset(small_specs(1, size=128), 0.5, 64, small_cfg)
        total = len(split.train) + len(split.validation)
        assert total == 16  # 4 patches x 4 rotations
        rotations = sorted({r.rotation for r in split.train + split.validation})
        assert rotations == [0, 90, 180, 270]

    def test_split_fraction_and_hygiene(self, small_cfg):
        split = build_dataset(small_specs(5), 0.5, 32, small_cfg)
        total = len(split.train) + len(split.validation)
        assert abs(len(split.train) - 0.85 * total) <= 4  # one patch = 4 records
        train_ids = {(r.source_phantom, r.patch_index) for r in split.train}
        val_ids = {(r.source_phantom, r.patch_index) for r in split.validation}
        assert not train_ids & val_ids

    def test_brenner_ordering_per_record(self, small_cfg):
        split = build_dataset(small_specs(2), 0.5, 32, small_cfg, noise_sigma=0.002)
        for rec in split.train + split.validation:
            assert brenner_value(rec.y1) >= brenner_value(rec.y2) - 1e-12

    def test_rotation_preserves_psnr(self, small_cfg):
        split = build_dataset(small_specs(1, size=64), 0.5, 64, small_cfg)
        recs = {r.rotation: r for r in split.train + split.validation if r.patch_index == 0}
        base = psnr(np.clip(recs[0].y1, 0, 1), np.clip(recs[0].ground_truth, 0, 1))
        # joint rotation is a pixel permutation: PSNR(y, gt) is unchanged,
        # modulo the per-record re-ordering possibly swapping y1 and y2
        rot = recs[90]
        rot_psnrs = {
            psnr(np.clip(rot.y1, 0, 1), np.clip(rot.ground_truth, 0, 1)),
            psnr(np.clip(rot.y2, 0, 1), np.clip(rot.ground_truth, 0, 1)),
        }
        assert any(abs(p - base) < 1e-9 for p in rot_psnrs)

    def test_deterministic(self, small_cfg):
        a = build_dataset(small_specs(2), 0.5, 32, small_cfg, dataset_seed=9, split_seed=9,
                          noise_sigma=0.005)
        b = build_dataset(small_specs(2), 0.5, 32, small_cfg, dataset_seed=9, split_seed=9,
                          noise_sigma=0.005)
        assert len(a.train) == len(b.train)
        for ra, rb in zip(a.train, b.train):
            assert np.array_equal(ra.y1, rb.y1)
            assert np.array_equal(ra.y2, rb.y2)
            assert np.array_equal(ra.ground_truth, rb.ground_truth)

    def test_bad_patch_size(self, small_cfg):
        with pytest.raises(ValueError):
            build_dataset(small_specs(1), 0.5, 48, small_cfg)


class TestDatasetIO:
    def test_roundtrip(self, tmp_path, small_cfg):
        split = build_dataset(small_specs(1), 0.5, 32, small_cfg, noise_sigma=0.003)
        save_dataset(split, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert isinstance(loaded, DatasetSplit)
        assert len(loaded.train) == len(split.train)
        assert len(loaded.validation) == len(split.validation)
        for ra, rb in zip(split.train, loaded.train):
            assert ra.delta_d_um == rb.delta_d_um
            assert ra.absolute_offset_um == rb.absolute_offset_um
            assert ra.rotation == rb.rotation
            # 16-bit quantisation on disk
            assert np.max(np.abs(ra.y1 - rb.y1)) < 1.0 / 65535
            assert np.max(np.abs(ra.ground_truth - rb.ground_truth)) < 1.0 / 65535

    def test_byte_identical_saves(self, tmp_path, small_cfg):
        split = build_dataset(small_specs(1), 0.5, 32, small_cfg)
        save_dataset(split, tmp_path / "a")
        save_dataset(split, tmp_path / "b")
        for rel in ("manifest.json", "train/000000/y1.pgm", "train/000000/meta.json"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
