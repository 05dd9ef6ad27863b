"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 data/checkpoint error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import plotting
from .config import load_run_config
from .data import load_dataset, read_gray_png, save_dataset, split, synthetic_dataset, write_gray_png
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .metrics import MetricsReport
from .model import CLASS_NAMES, MAGNet, ModelConfig, count_parameters, separable_conv_parameters, \
    standard_conv_parameters
from .training import evaluate, predict, train

log = logging.getLogger("magnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def write_report(report: MetricsReport, out: Path, parameters=None) -> None:
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "metrics.csv").write_text(report.to_csv())
    seg = report.segmentation
    with open(out / "segmentation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["aggregation", "dice", "iou", "pixel_accuracy", "bce_loss", "parameters"])
        for mode in ("mean", "global"):
            writer.writerow([mode, f"{seg[f'dice_{mode}']:.4f}", f"{seg[f'iou_{mode}']:.4f}",
                             f"{seg['pixel_accuracy']:.4f}", f"{report.losses['bce']:.4f}",
                             parameters if parameters is not None else ""])
    plotting.plot_confusion(report.confusion, report.class_names, out / "confusion_matrix.png")


# ----------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    h, w = args.size
    ds = synthetic_dataset(args.n, h, w, args.seed)
    save_dataset(ds, _prepare_out(out))
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.data is not None:
        cfg.data_dir = args.data
    if args.out is not None:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        if args.epochs < 1:
            raise ConfigError("--epochs must be >= 1")
        cfg.train.epochs = args.epochs
    if cfg.out_dir is None:
        raise UsageError("an output directory is required (--out or out_dir in the config)")
    if cfg.data_dir is not None and not Path(cfg.data_dir).is_dir():
        raise UsageError(f"data directory {cfg.data_dir} does not exist")
    out = _prepare_out(cfg.out_dir)
    (out / "effective_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")

    mc = cfg.model
    if cfg.data_dir is not None:
        ds = load_dataset(cfg.data_dir)
        if ds.image_size != (mc.input_height, mc.input_width):
            raise ConfigError(f"dataset images are {ds.image_size[0]}x{ds.image_size[1]}, "
                              f"model expects {mc.input_height}x{mc.input_width}")
    else:
        ds = synthetic_dataset(cfg.synthetic_n, mc.input_height, mc.input_width, cfg.train.seed)
    train_ds, val_ds = split(ds, cfg.train_ratio, cfg.train.seed)
    log.info("training on %d samples, validating on %d", len(train_ds), len(val_ds))

    model, history, _ = train(mc, cfg.train, train_ds, val_ds, out_dir=out)
    report = evaluate(model, val_ds, loss_weight=cfg.train.loss_weight)
    write_report(report, out, count_parameters(model).total)
    plotting.plot_history(history, out / "training_curves.png")
    print(f"best epoch {history.best_epoch}: val_loss {history.records[history.best_epoch - 1]['val_loss']:.4f}, "
          f"dice {report.segmentation['dice_mean']:.4f}, accuracy {report.accuracy:.4f}")
    return EXIT_OK


def _model_config_from(path) -> ModelConfig:
    return load_run_config(path).model


def cmd_eval(args) -> int:
    config = _model_config_from(args.config) if args.config else None
    model, config = ckpt.load(args.checkpoint, config=config)
    ds = load_dataset(args.data)
    if ds.image_size != (config.input_height, config.input_width):
        raise DataError(f"dataset images are {ds.image_size[0]}x{ds.image_size[1]}, "
                        f"checkpoint expects {config.input_height}x{config.input_width}")
    out = _prepare_out(args.out)
    report = evaluate(model, ds)
    write_report(report, out, count_parameters(model).total)
    seg = report.segmentation
    print(f"dice {seg['dice_mean']:.4f} (global {seg['dice_global']:.4f}), "
          f"iou {seg['iou_mean']:.4f} (global {seg['iou_global']:.4f}), accuracy {report.accuracy:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, config = ckpt.load(args.checkpoint, dtype=np.float64)
    pixels = read_gray_png(Path(args.image))
    expected = (config.input_height, config.input_width)
    if pixels.shape != expected:
        raise UsageError(f"image is {pixels.shape[0]}x{pixels.shape[1]}, model expects {expected[0]}x{expected[1]}")
    image = (pixels / 255.0)[None, :, :, None]
    mask_prob, class_prob = predict(model, image)
    mask = (mask_prob[0, :, :, 0] >= config.seg_threshold).astype(np.uint8)
    probs = class_prob[0]
    names = CLASS_NAMES if config.num_classes == len(CLASS_NAMES) else [f"class{i}" for i in range(len(probs))]
    label = int(np.argmax(probs))

    out = _prepare_out(args.out)
    write_gray_png(out / "mask.png", mask * 255)
    plotting.plot_overlay(image[0], mask, out / "overlay.png", title=f"{names[label]} ({probs[label]:.2f})")
    payload = {"image": str(args.image), "probabilities": {n: float(p) for n, p in zip(names, probs)},
               "label": names[label], "label_index": label, "tumor_pixels": int(mask.sum())}
    (out / "prediction.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(f"{names[label]} ({probs[label]:.4f}); {int(mask.sum())} tumour pixels")
    return EXIT_OK


def cmd_count_params(args) -> int:
    config = _model_config_from(args.config) if args.config else ModelConfig()
    model = MAGNet(config, dtype=np.float32)
    counts = count_parameters(model)
    print(f"{'block':<14}{'parameters':>12}")
    for block, n in counts.blocks.items():
        print(f"{block:<14}{n:>12}")
    print(f"{'total':<14}{counts.total:>12}")
    if args.compare_standard:
        print()
        print(f"{'layer':<26}{'f':>3}{'cin':>6}{'cout':>6}{'separable':>11}{'standard':>11}"
              f"{'measured':>11}{'1/r+1/f^2':>11}")
        sep_total = std_total = 0
        for name, layer in model.separable_layers():
            f, cin, cout = layer.kernel_size, layer.cin, layer.cout
            sep = separable_conv_parameters(f, cin, cout)
            std = standard_conv_parameters(f, cin, cout)
            sep_total += sep
            std_total += std
            print(f"{name:<26}{f:>3}{cin:>6}{cout:>6}{sep:>11}{std:>11}{sep / std:>11.6f}{1 / cout + 1 / f ** 2:>11.6f}")
        equivalent = counts.total - sep_total + std_total
        print(f"separable layers total {sep_total}, standard-convolution equivalent {std_total}")
        print(f"model total {counts.total} vs {equivalent} with standard convolutions "
              f"(ratio {counts.total / equivalent:.4f})")
    return EXIT_OK


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magnet", description="MAG-Net segmentation + classification")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic shapes dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train a model and write checkpoint, history and report")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config whose model section overrides the checkpoint sidecar")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment and classify one PNG slice")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("count-params", help="print trainable parameter counts")
    p.add_argument("--config")
    p.add_argument("--compare-standard", action="store_true")
    p.set_defaults(func=cmd_count_params)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.captureWarnings(True)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
