"""Command-line interface: data generation, training, evaluation, inference.

Every run writes its artifacts under one directory: the exact config used
(config.snapshot), checkpoints (ckpt/), CSV metrics (metrics/), and
overlay images (overlays/), so results are reproducible from the artifacts
alone. Exit codes: 0 success, 1 configuration problems, 2 I/O problems.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError
from .evaluator import draw_overlay, evaluate, iou_box, map50, multi_object_infer, \
    predict_mask, threshold_search
from .inpainter import Inpainter
from .proposal import Detector, SingleBoxDetector, select_argmax
from .segmenter import SegAutoencoder
from .synth import generate_dataset, hwc_to_chw, load_dataset, save_dataset
from .trainer import TRAIN_MODES, load_checkpoint, predicted_boxes, split_state, \
    train_detector, train_inpainter

ABLATION_MODES = ("uniform-q", "no-routing", "bg-only", "direct-regression")


class _Fail(Exception):
    """Command failure with a chosen exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_values(args) -> dict:
    values = cfgmod.load_config(args.config) if args.config else {}
    values = cfgmod.apply_overrides(values, args.set or [])
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return values


def _run_dir(path, values) -> Path:
    run = Path(path)
    for sub in ("ckpt", "metrics", "overlays"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    (run / "config.snapshot").write_text(cfgmod.format_snapshot(values))
    return run


def _load_samples(directory):
    try:
        return load_dataset(directory)
    except (FileNotFoundError, ValueError) as exc:
        raise _Fail(2, f"cannot load dataset from {directory}: {exc}") from None


def _load_inpainter(path) -> Inpainter:
    state = _load_ckpt(path)
    net = Inpainter(np.random.default_rng(0))
    try:
        net.load_state_dict(split_state(state, "inp"))
    except (KeyError, ValueError) as exc:
        raise _Fail(2, f"{path}: {exc}") from None
    return net


def _load_ckpt(path) -> dict:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise _Fail(2, f"checkpoint not found: {path}") from None
    except ValueError as exc:
        raise _Fail(2, f"cannot read checkpoint {path}: {exc}") from None


def _load_detector_and_seg(path, values, mode="default"):
    state = _load_ckpt(path)
    merged = cfgmod.effective(values)
    rng = np.random.default_rng(0)
    if mode == "direct-regression":
        det = SingleBoxDetector(rng, grid_size=merged["grid_size"])
    else:
        det = Detector(rng, grid_size=merged["grid_size"])
    seg = SegAutoencoder(rng, patch=merged["crop_res"])
    try:
        det.load_state_dict(split_state(state, "det"))
        seg.load_state_dict(split_state(state, "seg"))
    except (KeyError, ValueError) as exc:
        raise _Fail(2, f"{path}: {exc}") from None
    return det, seg, merged


def _load_image(path, expected_size) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise _Fail(2, f"image not found: {path}") from None
    except OSError as exc:
        raise _Fail(2, f"cannot read image {path}: {exc}") from None
    if rgb.shape[0] != expected_size or rgb.shape[1] != expected_size:
        raise _Fail(1, f"image {path} is {rgb.shape[1]}x{rgb.shape[0]}, "
                       f"expected {expected_size}x{expected_size}")
    return rgb


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    values = _read_values(args)
    spec = cfgmod.scene_spec(values)
    merged = cfgmod.effective(values)
    samples = generate_dataset(spec, merged["sequences"],
                               merged["frames_per_sequence"])
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples "
          f"({merged['sequences']} sequences x {merged['frames_per_sequence']} frames) "
          f"to {args.out}")
    return 0


def cmd_train_inpainter(args) -> int:
    values = _read_values(args)
    config = cfgmod.train_config(values)
    data = _load_samples(args.data)
    run = _run_dir(args.run, values)
    net, curve = train_inpainter(config, data,
                                 metrics_path=run / "metrics" / "inpainter.csv",
                                 ckpt_path=run / "ckpt" / "inpainter.ckpt")
    print(f"inpainter: {config.inpainter_steps} steps, "
          f"final loss {curve[-1]:.6f}; artifacts in {run}")
    return 0


def cmd_train(args) -> int:
    values = _read_values(args)
    config = cfgmod.train_config(values)
    data = _load_samples(args.data)
    eval_data = _load_samples(args.eval_data) if args.eval_data else None
    run = _run_dir(args.run, values)

    if args.inpainter_ckpt:
        inp = _load_inpainter(args.inpainter_ckpt)
    else:
        inp, curve = train_inpainter(config, data,
                                     metrics_path=run / "metrics" / "inpainter.csv",
                                     ckpt_path=run / "ckpt" / "inpainter.ckpt")
        print(f"pretrained inpainter: final loss {curve[-1]:.6f}")

    result = train_detector(config, data, inp, mode=args.mode,
                            eval_dataset=eval_data,
                            metrics_path=run / "metrics" / "train.csv",
                            ckpt_dir=run / "ckpt")
    last = result.history[-1] if result.history else {}
    held = (f", held-out IoU {last['iou_snapshot']:.4f}"
            if last.get("iou_snapshot") is not None else "")
    print(f"detector ({args.mode}): {config.detector_steps} steps, "
          f"final loss {last.get('loss_total', float('nan')):.4f}{held}; "
          f"skipped {result.skipped_steps}; artifacts in {run}")
    return 0


def cmd_eval(args) -> int:
    values = _read_values(args)
    det, seg, merged = _load_detector_and_seg(args.ckpt, values)
    data = _load_samples(args.data)
    report = evaluate(data, det, seg, crop_res=merged["crop_res"])
    print(report.summary(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "report.csv")
        (out / "summary.txt").write_text(report.summary())
        overlays = out / "overlays"
        overlays.mkdir(exist_ok=True)
        n = min(merged["n_overlays"], len(data))
        from .autodiff.tensor import constant, no_grad
        with no_grad():
            for i in range(n):
                sample = data[i]
                image = hwc_to_chw(sample.image)
                grid = det(constant(image[None]))[0]
                box, _ = select_argmax(grid)
                mask = predict_mask(image, box, seg, crop_res=merged["crop_res"])
                draw_overlay(sample.image, grid, box,
                             overlays / f"eval{i:03d}.png", mask=mask)
        print(f"report and {n} overlays in {out}")
    return 0


def cmd_infer(args) -> int:
    values = _read_values(args)
    det, seg, merged = _load_detector_and_seg(args.ckpt, values)
    image_hwc = _load_image(args.image, merged["image_size"])
    image = hwc_to_chw(image_hwc)
    k = args.k if args.k is not None else merged["k_draws"]
    detections = multi_object_infer(image, det, seg, k=k,
                                    rng=np.random.default_rng(merged["seed"]),
                                    crop_res=merged["crop_res"])
    for box, _, prob in detections:
        print(f"box cx={box.cx:.4f} cy={box.cy:.4f} w={box.w:.4f} h={box.h:.4f} "
              f"p={prob:.4f}")
    if args.out:
        from .autodiff.tensor import constant, no_grad
        with no_grad():
            grid = det(constant(image[None]))[0]
        union = None
        for _, mask, _ in detections:
            union = mask if union is None else np.maximum(union, mask)
        draw_overlay(image_hwc, grid, [b for b, _, _ in detections],
                     args.out, mask=union)
        print(f"overlay written to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    values = _read_values(args)
    config = cfgmod.train_config(values)
    data = _load_samples(args.data)
    if args.eval_data:
        eval_data = _load_samples(args.eval_data)
    else:
        # hold out the last quarter of sequences when no split is given
        seqs = sorted({s.sequence for s in data})
        held = set(seqs[-max(1, len(seqs) // 4):])
        eval_data = [s for s in data if s.sequence in held]
        data = [s for s in data if s.sequence not in held]
        if not data:
            raise _Fail(1, "dataset too small to split; pass --eval-data")
    run = _run_dir(args.run, values)

    chosen = [m for m in ABLATION_MODES if getattr(args, m.replace("-", "_"))]
    modes = ["default"] + (chosen or list(ABLATION_MODES))

    if args.inpainter_ckpt:
        inp = _load_inpainter(args.inpainter_ckpt)
    else:
        inp, _ = train_inpainter(config, data,
                                 ckpt_path=run / "ckpt" / "inpainter.ckpt")

    sprite_areas = [s.gt_box.area() for s in eval_data]
    rows = []
    for mode in modes:
        result = train_detector(config, data, inp, mode=mode,
                                metrics_path=run / "metrics" / f"train_{mode}.csv",
                                ckpt_dir=run / "ckpt" / mode)
        boxes = predicted_boxes(result.detector, eval_data, mode)
        ious = [iou_box(b, s.gt_box) for b, s in zip(boxes, eval_data)]
        score = map50([(b, 1.0) for b in boxes], [s.gt_box for s in eval_data])
        masks = [predict_mask(hwc_to_chw(s.image), b, result.seg,
                              crop_res=config.crop_res)
                 for s, b in zip(eval_data, boxes)]
        _, table = threshold_search(masks, [s.gt_mask for s in eval_data])
        best_j = max(r["j_measure"] for r in table)
        rows.append({
            "mode": mode,
            "mean_iou": f"{np.mean(ious):.6f}",
            "map50": f"{score:.6f}",
            "best_j": f"{best_j:.6f}",
            "median_box_area": f"{np.median([b.area() for b in boxes]):.6f}",
            "median_sprite_area": f"{np.median(sprite_areas):.6f}",
        })
        print(f"{mode}: IoU {rows[-1]['mean_iou']}, mAP@0.5 {rows[-1]['map50']}, "
              f"box area {rows[-1]['median_box_area']}")

    table_path = run / "metrics" / "ablation.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"comparison table in {table_path}")
    return 0


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfsupdet",
        description="Self-supervised salient-object detection on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, help="override the training seed")
        if run:
            p.add_argument("--run", required=True,
                           help="run directory for artifacts")

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-inpainter", help="pretrain the background inpainter")
    common(p, run=True)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.set_defaults(func=cmd_train_inpainter)

    p = sub.add_parser("train", help="train the detector and segmenter")
    common(p, run=True)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--eval-data", help="held-out dataset for IoU snapshots")
    p.add_argument("--inpainter-ckpt",
                   help="pretrained inpainter checkpoint (else pretrain now)")
    p.add_argument("--mode", default="default", choices=TRAIN_MODES,
                   help="objective assembly variant")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled dataset")
    common(p)
    p.add_argument("--ckpt", required=True, help="detector checkpoint")
    p.add_argument("--data", required=True, help="evaluation dataset directory")
    p.add_argument("--out", help="directory for report CSV and overlays")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="multi-object inference on one image")
    common(p)
    p.add_argument("--ckpt", required=True, help="detector checkpoint")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--k", type=int, help="number of candidate draws")
    p.add_argument("--out", help="overlay PNG path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train and compare objective variants")
    common(p, run=True)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--eval-data", help="held-out dataset (else split by sequence)")
    p.add_argument("--inpainter-ckpt",
                   help="pretrained inpainter checkpoint (else pretrain now)")
    for mode in ABLATION_MODES:
        p.add_argument(f"--{mode}", action="store_true",
                       help=f"include the {mode} variant")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
