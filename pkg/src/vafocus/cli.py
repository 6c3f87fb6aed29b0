"""Command-line interface: PSF dumps, capture rendering, focus tools,
training, inference, evaluation, and scan simulation."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import imio, phantom, pipeline, tsva
from .focus import brenner, find_focus
from .imaging import DepthLayeredSample, add_sensor_noise, capture_pair, generate_zstack
from .optics import OpticalConfig, build_kernel
from .phantom import PhantomSpec, synth_phantom


def _optical_config(args) -> OpticalConfig:
    return OpticalConfig(
        numerical_aperture=args.na,
        refractive_index=args.n,
        wavelength_um=args.lambda_um,
        pixel_pitch_um=args.pitch_um,
        kernel_radius_px=args.radius,
    )


def _add_optics_args(p):
    p.add_argument("--na", type=float, default=0.75)
    p.add_argument("--n", type=float, default=1.0)
    p.add_argument("--lambda-um", type=float, default=0.55)
    p.add_argument("--pitch-um", type=float, default=0.3)
    p.add_argument("--radius", type=int, default=15)


def save_sample(sample: DepthLayeredSample, root) -> None:
    os.makedirs(root, exist_ok=True)
    meta = {
        "layer_spacing_um": sample.layer_spacing_um,
        "in_focus_index": sample.in_focus_index,
        "layers": [int(m) for m, _ in sample.layers],
        "meta": {k: v for k, v in sample.meta.items() if k != "centers"},
    }
    with open(os.path.join(root, "sample.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    for m, img in sample.layers:
        imio.write_pgm(os.path.join(root, f"layer_{m:+03d}.pgm"), img)


def load_sample(root) -> DepthLayeredSample:
    with open(os.path.join(root, "sample.json")) as fh:
        meta = json.load(fh)
    layers = [
        (m, imio.read_pgm(os.path.join(root, f"layer_{m:+03d}.pgm"))) for m in meta["layers"]
    ]
    return DepthLayeredSample(
        layers=layers,
        layer_spacing_um=meta["layer_spacing_um"],
        in_focus_index=meta["in_focus_index"],
        meta=meta.get("meta", {}),
    )


def _load_image(path) -> np.ndarray:
    if str(path).endswith(".pgm"):
        return imio.read_pgm(path)
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("L"), dtype=float)
    return arr / 255.0


def cmd_psf_dump(args) -> int:
    cfg = _optical_config(args)
    kern = build_kernel(args.defocus_um, cfg)
    np.savetxt(args.out + ".txt", kern.samples, fmt="%.12e")
    peak = kern.samples.max()
    imio.write_pgm(args.out + ".pgm", kern.samples / peak if peak > 0 else kern.samples, maxval=65535)
    c = kern.radius_px
    print(f"defocus_um={kern.defocus_um} center={kern.samples[c, c]:.9e} sum={kern.samples.sum():.9f}")
    return 0


def cmd_capture(args) -> int:
    cfg = _optical_config(args)
    sample = load_sample(args.sample)
    pair = capture_pair(sample, args.offset_um, args.dd_um, cfg)
    os.makedirs(args.out, exist_ok=True)
    y1, y2 = pair.y1, pair.y2
    if args.noise > 0:
        y1 = add_sensor_noise(y1, args.noise, args.seed)
        y2 = add_sensor_noise(y2, args.noise, args.seed + 1)
    imio.write_pgm(os.path.join(args.out, "y1.pgm"), y1, maxval=255)
    imio.write_pgm(os.path.join(args.out, "y2.pgm"), y2, maxval=255)
    imio.write_pgm(os.path.join(args.out, "gt.pgm"), pair.ground_truth, maxval=255)
    sidecar = {
        "absolute_offset_um": pair.absolute_offset_um,
        "delta_d_um": pair.delta_d_um,
        "y1_is_minus_side": pair.y1_is_minus_side,
        "brenner_y1": brenner(pair.y1).value,
        "brenner_y2": brenner(pair.y2).value,
        "noise_sigma": args.noise,
        "seed": args.seed,
    }
    with open(os.path.join(args.out, "capture.json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
    print(json.dumps(sidecar, sort_keys=True))
    return 0


def cmd_focus_score(args) -> int:
    for path in args.images:
        print(f"{path}\t{brenner(_load_image(path)).value:.10g}")
    return 0


def cmd_find_focus(args) -> int:
    entries = []
    for name in sorted(os.listdir(args.stack)):
        if not name.endswith(".pgm"):
            continue
        # stack files are named offset_<um>.pgm
        offset = float(name[len("offset_") : -len(".pgm")].replace("m", "-"))
        entries.append((offset, imio.read_pgm(os.path.join(args.stack, name))))
    print(find_focus(entries))
    return 0


def cmd_zstack(args) -> int:
    cfg = _optical_config(args)
    sample = load_sample(args.sample)
    stack = generate_zstack(sample, args.min_um, args.max_um, args.step_um, cfg)
    os.makedirs(args.out, exist_ok=True)
    for offset, img in stack:
        if args.noise > 0:
            img = add_sensor_noise(img, args.noise, args.seed + round(offset / args.step_um))
        name = f"offset_{str(offset).replace('-', 'm')}.pgm"
        imio.write_pgm(os.path.join(args.out, name), img)
    print(f"{len(stack)} captures -> {args.out}")
    return 0


def cmd_make_phantom(args) -> int:
    spec = PhantomSpec(seed=args.seed, width=args.size, height=args.size)
    sample = synth_phantom(spec)
    save_sample(sample, args.out)
    print(f"phantom seed={args.seed} cells={sample.meta['cell_count']} -> {args.out}")
    return 0


def cmd_make_dataset(args) -> int:
    cfg = _optical_config(args)
    specs = [
        PhantomSpec(seed=args.seed + i, width=args.phantom_size, height=args.phantom_size)
        for i in range(args.phantoms)
    ]
    split = phantom.build_dataset(
        specs, args.dd_um, args.patch, cfg, dataset_seed=args.seed, split_seed=args.seed
    )
    phantom.save_dataset(split, args.out)
    print(f"train={len(split.train)} validation={len(split.validation)} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    split = phantom.load_dataset(args.dataset)
    config = tsva.TsvaConfig(
        depth_levels=args.depth, base_channels=args.base_channels, input_channels=1
    )
    model = tsva.build(config, seed=args.seed)
    report = tsva.train(
        model,
        split,
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        learning_rate=args.lr,
        ablation=args.ablation,
        progress=lambda e, tr, va: print(f"epoch {e + 1}/{args.epochs} train={tr:.6f} val={va:.6f}"),
    )
    tsva.save_checkpoint(
        args.out,
        model,
        metadata={
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
            "seed": args.seed,
            "ablation": args.ablation,
            "train_losses": report.train_losses,
            "val_losses": report.val_losses,
        },
    )
    print(f"best epoch {report.best_epoch} val loss {report.best_val_loss:.6f} -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    ckpt = tsva.load_checkpoint(args.ckpt)
    out = tsva.infer(ckpt, _load_image(args.y1), _load_image(args.y2))
    if args.out.endswith(".png"):
        imio.write_png(args.out, out)
    else:
        imio.write_pgm(args.out, out, maxval=255)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    split = phantom.load_dataset(args.dataset)
    ckpt = tsva.load_checkpoint(args.ckpt)
    ab = tsva.load_checkpoint(args.ablation_ckpt) if args.ablation_ckpt else None
    report = pipeline.evaluate(split.validation, ckpt, ablation_checkpoint=ab, out_dir=args.out)
    print(json.dumps(report.summary(), indent=1, sort_keys=True))
    if args.assert_thresholds:
        for dd, cols in report.aggregates.items():
            gain = cols["psnr_out_db"][0] - cols["psnr_y1_db"][0]
            if gain < args.min_gain_db:
                print(
                    f"FAIL: dd={dd} fusion gain {gain:.2f} dB below {args.min_gain_db} dB",
                    file=sys.stderr,
                )
                return 1
    return 0


def cmd_scan_sim(args) -> int:
    cfg = _optical_config(args)
    rng = np.random.default_rng(args.seed)
    tiles = []
    for i in range(args.tiles):
        spec = PhantomSpec(seed=args.seed + i)
        sample = synth_phantom(spec)
        tiles.append((sample, phantom.sample_absolute_offset(rng)))
    plan = pipeline.ScanPlan(tiles=tiles)
    ckpt = tsva.load_checkpoint(args.ckpt)
    report = pipeline.scan_simulate(plan, args.dd_um, cfg, ckpt)
    payload = report.summary()
    payload["rows"] = report.rows
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
    print(json.dumps(payload["shot_counts"], indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vafocus", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("psf-dump", help="write a PSF kernel as text + 16-bit PGM")
    p.add_argument("--defocus-um", type=float, required=True)
    p.add_argument("--out", default="psf_kernel")
    _add_optics_args(p)
    p.set_defaults(fn=cmd_psf_dump)

    p = sub.add_parser("capture", help="render a two-shot pair from a sample directory")
    p.add_argument("--sample", required=True)
    p.add_argument("--offset-um", type=float, required=True)
    p.add_argument("--dd-um", type=float, required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_optics_args(p)
    p.set_defaults(fn=cmd_capture)

    p = sub.add_parser("focus-score", help="print Brenner scores of image files")
    p.add_argument("images", nargs="+")
    p.set_defaults(fn=cmd_focus_score)

    p = sub.add_parser("zstack", help="render a z-stack from a sample directory")
    p.add_argument("--sample", required=True)
    p.add_argument("--min-um", type=float, default=-10.0)
    p.add_argument("--max-um", type=float, default=10.0)
    p.add_argument("--step-um", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_optics_args(p)
    p.set_defaults(fn=cmd_zstack)

    p = sub.add_parser("find-focus", help="pick the sharpest offset from a stack directory")
    p.add_argument("--stack", required=True)
    p.set_defaults(fn=cmd_find_focus)

    p = sub.add_parser("make-phantom", help="synthesise a phantom sample directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_phantom)

    p = sub.add_parser("make-dataset", help="build and save a patch dataset")
    p.add_argument("--phantoms", type=int, default=8)
    p.add_argument("--phantom-size", type=int, default=128)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--dd-um", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_optics_args(p)
    p.set_defaults(fn=cmd_make_dataset)

    p = sub.add_parser("train", help="train a fusion network on a saved dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--ablation", action="store_true", help="feed y1 to both paths")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="recover the in-focus image from a pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--y1", required=True)
    p.add_argument("--y2", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="PSNR evaluation of a checkpoint on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ablation-ckpt", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--assert", dest="assert_thresholds", action="store_true")
    p.add_argument("--min-gain-db", type=float, default=3.0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("scan-sim", help="simulate the two-shot scanning workflow")
    p.add_argument("--tiles", type=int, required=True)
    p.add_argument("--dd-um", type=float, default=0.5)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_optics_args(p)
    p.set_defaults(fn=cmd_scan_sim)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
