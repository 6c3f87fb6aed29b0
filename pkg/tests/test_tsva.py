import dataclasses

import numpy as np
import pytest

from vafocus import nncore as nn
from vafocus import phantom, tsva
from vafocus.optics import OpticalConfig

TOY = tsva.TsvaConfig(depth_levels=2, base_channels=4, input_channels=1)


def toy_batch(n=2, size=16, seed=0):
    rng = np.random.default_rng(seed)
    y1 = rng.uniform(0, 1, size=(n, 1, size, size))
    y2 = rng.uniform(0, 1, size=(n, 1, size, size))
    gt = rng.uniform(0, 1, size=(n, 1, size, size))
    return y1, y2, gt


@pytest.fixture(scope="module")
def tiny_dataset():
    specs = [phantom.PhantomSpec(seed=s, height=64, width=64, cell_count_range=(4, 6)) for s in (1, 2, 3)]
    cfg = OpticalConfig(kernel_radius_px=7)
    return phantom.build_dataset(specs, delta_d_um=0.5, patch_px=32, cfg=cfg, noise_sigma=0.005)


class TestBuild:
    def test_parameter_count_matches_formula(self):
        for cfg in (TOY, tsva.TsvaConfig(3, 16, 1), tsva.TsvaConfig(2, 8, 1)):
            model = tsva.build(cfg, seed=0)
            assert model.store.total_count() == tsva.parameter_count(cfg)

    def test_seed_determinism(self):
        a = tsva.build(TOY, seed=5)
        b = tsva.build(TOY, seed=5)
        for (na, pa), (nb, pb) in zip(a.store.items(), b.store.items()):
            assert na == nb
            assert np.array_equal(pa.value, pb.value)

    def test_single_shared_encoder(self):
        # one parameter set per encoder level; no per-path duplicates
        names = [n for n, _ in tsva.build(TOY, 0).store.items()]
        enc_names = [n for n in names if n.startswith("enc")]
        assert len(enc_names) == len(set(enc_names))
        assert sorted({n.split(".")[0] for n in enc_names}) == ["enc0", "enc1"]

    def test_head_starts_at_zero(self):
        model = tsva.build(TOY, seed=3)
        assert np.all(model.store["head.w"].value == 0.0)
        assert np.all(model.store["head.b"].value == 0.0)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            tsva.TsvaConfig(depth_levels=1)
        with pytest.raises(ValueError):
            tsva.TsvaConfig(base_channels=2)


class TestForward:
    def test_residual_identity_bit_for_bit(self):
        model = tsva.build(TOY, seed=1)  # zero head -> identity on y1
        rng = np.random.default_rng(2)
        for _ in range(10):
            y1 = rng.uniform(0, 1, size=(1, 1, 16, 16))
            y2 = rng.uniform(0, 1, size=(1, 1, 16, 16))
            out = tsva.forward(model, y1, y2)
            assert np.array_equal(out, y1)

    def test_shape_law(self):
        model = tsva.build(TOY, seed=1)
        model.store["head.w"].value[...] = 0.01
        for size in (16, 32, 64):
            y1, y2, _ = toy_batch(1, size)
            assert tsva.forward(model, y1, y2).shape == (1, 1, size, size)

    def test_bad_divisibility(self):
        model = tsva.build(TOY, seed=1)
        with pytest.raises(ValueError):
            tsva.forward(model, np.zeros((1, 1, 18, 16)), np.zeros((1, 1, 18, 16)))

    def test_shape_mismatch(self):
        model = tsva.build(TOY, seed=1)
        with pytest.raises(ValueError):
            tsva.forward(model, np.zeros((1, 1, 16, 16)), np.zeros((1, 1, 16, 32)))

    def test_second_input_matters(self):
        model = tsva.build(TOY, seed=4)
        model.store["head.w"].value[...] = np.random.default_rng(5).normal(0, 0.1, size=(1, 4, 1, 1))
        y1, y2, _ = toy_batch()
        out_a = tsva.forward(model, y1, y2)
        out_b = tsva.forward(model, y1, y2 + 0.1)
        assert not np.allclose(out_a, out_b)


class TestGradients:
    # Seeds chosen so every ReLU pre-activation is >1e-4 from zero: the FD
    # probe at step 1e-5 must not push any activation across its kink.
    def test_full_network_gradcheck(self):
        model = tsva.build(TOY, seed=40)
        rng = np.random.default_rng(1040)
        model.store["head.w"].value[...] = rng.normal(0, 0.3, size=(1, 4, 1, 1))
        y1, y2, gt = toy_batch(1, 16, seed=9)

        def loss_fn():
            out = tsva.forward(model, y1, y2, train=True, update_stats=False)
            return nn.mse_loss(out, gt)[0]

        out, tape = tsva.forward(model, y1, y2, train=True, update_stats=False, want_tape=True)
        _, dpred = nn.mse_loss(out, gt)
        model.store.zero_grads()
        tsva.backward(model, tape, dpred)

        arrays = {name: p.value for name, p in model.store.items()}
        analytic = {name: p.grad for name, p in model.store.items()}
        rep = nn.grad_check(loss_fn, arrays, analytic)
        worst = max((v, k) for k, v in rep.items() if k != "__max__")
        assert rep["__max__"] < 1e-4, worst

    def test_input_gradients(self):
        model = tsva.build(TOY, seed=40)
        rng = np.random.default_rng(1040)
        model.store["head.w"].value[...] = rng.normal(0, 0.3, size=(1, 4, 1, 1))
        y1, y2, gt = toy_batch(1, 16, seed=9)

        def loss_fn():
            out = tsva.forward(model, y1, y2, train=True, update_stats=False)
            return nn.mse_loss(out, gt)[0]

        out, tape = tsva.forward(model, y1, y2, train=True, update_stats=False, want_tape=True)
        _, dpred = nn.mse_loss(out, gt)
        model.store.zero_grads()
        dy1, dy2 = tsva.backward(model, tape, dpred)
        rep = nn.grad_check(loss_fn, {"y1": y1, "y2": y2}, {"y1": dy1, "y2": dy2})
        assert rep["__max__"] < 1e-4, rep


class TestTrain:
    def test_loss_decreases(self, tiny_dataset):
        model = tsva.build(TOY, seed=13)
        report = tsva.train(model, tiny_dataset, epochs=4, batch_size=8, seed=14)
        assert len(report.train_losses) == 4
        assert report.val_losses[-1] <= report.val_losses[0]
        assert report.best_val_loss == min(report.val_losses)

    def test_deterministic(self, tiny_dataset):
        def run():
            model = tsva.build(TOY, seed=15)
            tsva.train(model, tiny_dataset, epochs=2, batch_size=8, seed=16)
            return b"".join(p.value.tobytes() for _, p in model.store.items())

        assert run() == run()

    def test_degenerate_target_keeps_identity(self, tiny_dataset):
        # gt == y1 and a zero head: loss is exactly 0 forever (zero gradients)
        records = [dataclasses.replace(r, ground_truth=r.y1) for r in tiny_dataset.train[:16]]
        ds = phantom.DatasetSplit(train=records, validation=[], split_seed=0)
        model = tsva.build(TOY, seed=17)
        report = tsva.train(model, ds, epochs=2, batch_size=8, seed=18)
        assert report.train_losses == [0.0, 0.0]
        assert np.all(model.store["head.w"].value == 0.0)

    def test_empty_or_oversized_batch(self, tiny_dataset):
        model = tsva.build(TOY, seed=19)
        with pytest.raises(ValueError):
            tsva.train(model, phantom.DatasetSplit([], [], 0), epochs=1, batch_size=1, seed=0)
        with pytest.raises(ValueError):
            tsva.train(model, tiny_dataset, epochs=1, batch_size=10**6, seed=0)


class TestInfer:
    def test_fresh_model_is_identity_after_ordering(self):
        model = tsva.build(TOY, seed=20)
        rng = np.random.default_rng(21)
        sharp = rng.uniform(0.2, 0.8, size=(20, 20))
        sharp[5:15, 5:15] = 0.0  # strong edges
        blurry = np.full((20, 20), 0.5)
        out = tsva.infer(model, blurry, sharp)  # ordering picks sharp as y1
        assert out.shape == (20, 20)
        assert np.array_equal(out, sharp)

    def test_non_divisible_padding(self):
        model = tsva.build(TOY, seed=22)
        model.store["head.w"].value[...] = 0.05
        y1 = np.random.default_rng(23).uniform(0, 1, size=(50, 37))
        out = tsva.infer(model, y1, y1 * 0.9)
        assert out.shape == (50, 37)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_accepts_checkpoint(self, tmp_path):
        model = tsva.build(TOY, seed=24)
        path = tmp_path / "m.ckpt"
        tsva.save_checkpoint(path, model)
        ckpt = tsva.load_checkpoint(path)
        y1 = np.random.default_rng(25).uniform(0, 1, size=(16, 16))
        assert np.array_equal(tsva.infer(ckpt, y1, y1), tsva.infer(model, y1, y1))


class TestCheckpoint:
    def make_model(self):
        model = tsva.build(TOY, seed=26)
        rng = np.random.default_rng(27)
        for _, p in model.store.items():
            p.value += rng.normal(0, 0.01, size=p.value.shape)
        for s in model.stats.values():
            s["mean"] += rng.normal(0, 0.1, size=s["mean"].shape)
        return model

    def test_roundtrip_values(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "m.ckpt"
        tsva.save_checkpoint(path, model, metadata={"note": "x"})
        ckpt = tsva.load_checkpoint(path)
        assert ckpt.metadata["note"] == "x"
        re = ckpt.to_model()
        for (na, pa), (nb, pb) in zip(model.store.items(), re.store.items()):
            assert na == nb
            assert np.array_equal(pa.value, pb.value)
        for name in model.stats:
            assert np.array_equal(model.stats[name]["var"], re.stats[name]["var"])

    def test_save_is_byte_deterministic(self, tmp_path):
        model = self.make_model()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        tsva.save_checkpoint(p1, model)
        tsva.save_checkpoint(p2, model)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_resave_identical(self, tmp_path):
        model = self.make_model()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        tsva.save_checkpoint(p1, model)
        tsva.save_checkpoint(p2, tsva.load_checkpoint(p1).to_model())
        assert p1.read_bytes() == p2.read_bytes()

    def test_optimizer_state_roundtrip(self, tmp_path):
        model = self.make_model()
        state = nn.AdamState(learning_rate=1e-3)
        for _, p in model.store.items():
            p.grad[...] = 0.5
        nn.adam_step(model.store, state)
        path = tmp_path / "m.ckpt"
        tsva.save_checkpoint(path, model, optimizer=state)
        ckpt = tsva.load_checkpoint(path)
        assert ckpt.optimizer is not None
        assert ckpt.optimizer["step"] == 1

    def test_truncated_file(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "m.ckpt"
        tsva.save_checkpoint(path, model)
        raw = path.read_bytes()
        for cut in (2, 8, len(raw) // 2, len(raw) - 1):
            bad = tmp_path / "bad.ckpt"
            bad.write_bytes(raw[:cut])
            with pytest.raises(tsva.CheckpointError):
                tsva.load_checkpoint(bad)

    def test_bad_magic(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "m.ckpt"
        tsva.save_checkpoint(path, model)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(tsva.CheckpointError):
            tsva.load_checkpoint(path)
