"""Command-line entry point: ``fxpcnn <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cycles import CycleConstants, total_cycles
from .fixedpoint import QFormat, RoundingStrategy
from .frames import FrameError, image_to_digit, read_pnm, write_pnm
from .io import (
    BundleError,
    IdxError,
    ModelBundle,
    default_mnist_dir,
    export_packed,
    load_bundle,
    load_labeled,
    load_mnist,
    read_idx,
    save_bundle,
)
from .nn import ShapeError, build_lwdd, infer_float, init_weights

log = logging.getLogger("fxpcnn")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers ---------------------------------------------------------------

def _mnist_dir(args) -> Path:
    d = Path(args.mnist) if getattr(args, "mnist", None) else default_mnist_dir()
    if d is None:
        raise DataError("MNIST directory not found; pass --mnist DIR or set FXPCNN_MNIST_DIR")
    return d


def _dataset(args, split: str, images_flag: str, labels_flag: str):
    images = getattr(args, images_flag, None)
    labels = getattr(args, labels_flag, None)
    if images:
        if labels:
            data = load_labeled(images, labels)
        else:
            from .training import LabeledDataset

            arr = read_idx(images)
            data = LabeledDataset(arr, np.zeros(len(arr), dtype=np.int64), name=Path(images).name)
    else:
        data = load_mnist(_mnist_dir(args), split)
    if getattr(args, "limit", None):
        data = data.subset(slice(0, args.limit))
    return data


def _maybe_augment(data, args):
    if getattr(args, "augment", False):
        from .training import AugmentationConfig, augmented_copy

        return augmented_copy(data, AugmentationConfig(), args.augment_seed)
    return data


def _float_bundle(path):
    bundle = load_bundle(path)
    if bundle.kind != "float":
        raise DataError(f"{path} is a quantized bundle; this command needs float weights")
    return bundle


def _quantized_model(bundle: ModelBundle):
    from .quantization import QuantizedModel, ReductionProfile

    if bundle.profile is None:
        raise DataError("quantized bundle carries no reduction profile")
    return QuantizedModel(bundle.config, bundle.weights, ReductionProfile.from_dict(bundle.profile),
                          QFormat(bundle.frac_bits))


# -- subcommands -----------------------------------------------------------

def cmd_train(args) -> int:
    from .training import AugmentationConfig, TrainConfig, augmented_copy, train, write_trace_csv

    train_data = _dataset(args, "train", "train_images", "train_labels")
    test_data = _dataset(args, "test", "test_images", "test_labels") if not args.no_test else None
    aug = AugmentationConfig() if not args.no_augment else AugmentationConfig.identity()
    if test_data is not None and args.test_limit:
        test_data = test_data.subset(slice(0, args.test_limit))
    if test_data is not None and not args.no_augment:
        test_data = augmented_copy(test_data, aug, args.seed + 1)
    model = build_lwdd(args.classes)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      momentum=args.momentum, seed=args.seed, lr_decay=args.lr_decay)

    def progress(row):
        print(f"epoch {row['epoch']}: loss {row['loss']:.4f} train_acc {row['train_acc']:.4f} "
              f"test_acc {row['test_acc']:.4f}", flush=True)

    weights, trace = train(model, train_data, aug, cfg, test_data=test_data, progress=progress)
    provenance = {"seed": args.seed, "train": cfg.__dict__, "augment": aug.__dict__,
                  "train_set": train_data.name, "samples": len(train_data),
                  "final_test_acc": trace[-1]["test_acc"] if trace else None}
    save_bundle(ModelBundle(model, weights, provenance=provenance), args.out)
    if args.csv:
        write_trace_csv(trace, args.csv)
    print(f"saved {args.out}")
    return 0


def _profile(args, model, weights):
    from .quantization import make_profile, parse_margin

    method, _ = parse_margin(args.profile)
    calib = None
    if method != "worst-case":
        if args.calib:
            calib = read_idx(args.calib)
        else:
            calib = load_mnist(_mnist_dir(args), "train").images
        if args.calib_limit:
            calib = calib[:args.calib_limit]
        if args.augment:
            from .training import AugmentationConfig, LabeledDataset, augmented_copy

            calib = augmented_copy(LabeledDataset(calib, np.zeros(len(calib))), AugmentationConfig(),
                                   args.augment_seed).images
    return make_profile(model, weights, args.profile, calib)


def cmd_quantize(args) -> int:
    from .quantization import quantize

    bundle = _float_bundle(args.bundle)
    profile = _profile(args, bundle.config, bundle.weights)
    qm = quantize(bundle.config, bundle.weights, profile, QFormat(args.bits))
    prov = dict(bundle.provenance, source=str(args.bundle), weight_saturations=qm.weight_saturations)
    save_bundle(ModelBundle(bundle.config, list(qm.mantissas), args.bits, profile.to_dict(), prov), args.out)
    print(f"saved {args.out} (N={args.bits}, profile {profile.label}, "
          f"M = {', '.join(f'{r.M:.4g}' for r in profile.layers)})")
    return 0


def cmd_sweep(args) -> int:
    from .quantization import sweep_bitwidths

    if args.bits_from > args.bits_to:
        raise UsageError("--bits-from must not exceed --bits-to")
    bundle = _float_bundle(args.bundle)
    data = _maybe_augment(_dataset(args, "test", "test_images", "test_labels"), args)
    profile = _profile(args, bundle.config, bundle.weights)
    strategies = list(RoundingStrategy) if args.strategy == "both" else [RoundingStrategy.parse(args.strategy)]

    def progress(row):
        print(f"N={row.frac_bits:2d} {row.strategy.value:<13} mismatch {100 * row.mismatch_ratio:6.2f}% "
              f"({row.mismatches}/{row.samples}) overflow {row.overflow_events}", file=sys.stderr, flush=True)

    report = sweep_bitwidths(bundle.config, bundle.weights, profile, data,
                             range(args.bits_from, args.bits_to + 1), strategies, progress=progress)
    text = report.to_long_csv() if args.long else report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_infer(args) -> int:
    from .engine import dump_mantissas, infer_fxp

    bundle = load_bundle(args.bundle)
    digit = image_to_digit(read_pnm(args.image))
    if bundle.kind == "float":
        logits, cls = infer_float(bundle.config, bundle.weights, digit / 256.0)
        result = {"class": cls, "logits": [float(v) for v in logits], "overflow": 0, "mode": "float"}
    else:
        qm = _quantized_model(bundle)
        out = infer_fxp(qm, digit, args.strategy)
        result = {"class": out.cls, "logits": [int(v) for v in out.fxp_logits],
                  "overflow": out.overflow_events, "mode": f"fixed N={qm.fmt.frac_bits} {args.strategy}"}
        if args.dump:
            dump_mantissas(qm, digit, args.strategy, args.dump)
    if args.json:
        print(json.dumps(result))
    else:
        print(f"class {result['class']}")
        print("logits " + " ".join(str(v) for v in result["logits"]))
        print(f"overflow {result['overflow']}")
    return 0


def cmd_preprocess(args) -> int:
    digit = image_to_digit(read_pnm(args.image))
    write_pnm(args.out, digit, plain=args.plain)
    print(f"wrote {args.out}")
    return 0


def cmd_cycles(args) -> int:
    model = load_bundle(args.bundle).config if args.bundle else build_lwdd(args.classes)
    report = total_cycles(model, args.conv_blocks, CycleConstants())
    sys.stdout.write(report.to_text(args.clock_mhz))
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def cmd_export_packed(args) -> int:
    bundle = load_bundle(args.bundle)
    if bundle.kind != "quantized":
        raise DataError("export-packed needs a quantized bundle (run `fxpcnn quantize` first)")
    export_packed(bundle.config, bundle.weights, bundle.frac_bits, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .training import grad_check

    rng = np.random.default_rng(args.seed)
    if args.bundle:
        bundle = _float_bundle(args.bundle)
        model, weights = bundle.config, bundle.weights
    else:
        model = build_lwdd(args.classes)
        weights = init_weights(model, rng)
    image = rng.integers(0, 256, size=model.input_shape) / 256.0
    label = int(rng.integers(0, model.num_outputs))
    err = grad_check(model, weights, image, label, args.epsilon, args.n_check, args.seed)
    print(f"max relative error {err:.3e}")
    return 0


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fxpcnn", description="Fixed-point CNN quantization and bit-exact inference.")
    p.add_argument("--version", action="version", version=f"fxpcnn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_flags(sp, split):
        sp.add_argument("--mnist", help="directory with the MNIST IDX files")
        sp.add_argument(f"--{split}-images", help="IDX image file (overrides --mnist)")
        sp.add_argument(f"--{split}-labels", help="IDX label file")
        sp.add_argument("--limit", type=int, help="use only the first N samples")

    def profile_flags(sp):
        sp.add_argument("--profile", default="worst-case",
                        help="worst-case | three-sigma | percent:P, calibrated ones optionally with +fit "
                             "(default worst-case)")
        sp.add_argument("--calib", help="IDX image file for calibrated profiles (default: MNIST train)")
        sp.add_argument("--calib-limit", type=int)

    def augment_flags(sp):
        sp.add_argument("--augment", action="store_true",
                        help="augment evaluation/calibration images deterministically")
        sp.add_argument("--augment-seed", type=int, default=1)

    sp = sub.add_parser("train", help="train LWDD on augmented MNIST")
    data_flags(sp, "train")
    sp.add_argument("--test-images")
    sp.add_argument("--test-labels")
    sp.add_argument("--test-limit", type=int)
    sp.add_argument("--no-test", action="store_true")
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--classes", type=int, default=10, choices=(10, 11))
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=0.02)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--lr-decay", type=float, default=0.8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="bundle directory to write")
    sp.add_argument("--csv", help="per-epoch accuracy trace")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("quantize", help="reduce and quantize a float bundle")
    sp.add_argument("bundle")
    sp.add_argument("--bits", type=int, required=True, help="fractional bits N")
    sp.add_argument("--mnist")
    profile_flags(sp)
    augment_flags(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("sweep", help="mismatch ratio per bit width and rounding strategy")
    sp.add_argument("bundle")
    data_flags(sp, "test")
    profile_flags(sp)
    augment_flags(sp)
    sp.add_argument("--bits-from", type=int, default=10)
    sp.add_argument("--bits-to", type=int, default=18)
    sp.add_argument("--strategy", default="both", choices=("both", "per-operation", "at-end"))
    sp.add_argument("--long", action="store_true", help="one row per (width, strategy) cell")
    sp.add_argument("--out", help="also write the CSV here")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("infer", help="classify a PGM/PPM image")
    sp.add_argument("bundle")
    sp.add_argument("image")
    sp.add_argument("--strategy", default="at-end", choices=("per-operation", "at-end"))
    sp.add_argument("--dump", help="write per-layer mantissas here")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("preprocess", help="camera still -> 28x28 PGM")
    sp.add_argument("image")
    sp.add_argument("out")
    sp.add_argument("--plain", action="store_true", help="write ASCII (P2) instead of binary (P5)")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("cycles", help="clock-cycle report")
    sp.add_argument("--conv-blocks", type=int, default=1)
    sp.add_argument("--bundle", help="take the architecture from a bundle (default LWDD)")
    sp.add_argument("--classes", type=int, default=10, choices=(10, 11))
    sp.add_argument("--clock-mhz", type=float, default=50.0)
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_cycles)

    sp = sub.add_parser("export-packed", help="write the 9-weights-per-word memory image")
    sp.add_argument("bundle")
    sp.add_argument("out")
    sp.set_defaults(func=cmd_export_packed)

    sp = sub.add_parser("gradcheck", help="backprop vs central finite differences")
    sp.add_argument("--bundle")
    sp.add_argument("--classes", type=int, default=10, choices=(10, 11))
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.add_argument("--n-check", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "conv_blocks", 1) < 1:
            raise UsageError("--conv-blocks must be >= 1")
        if getattr(args, "bits", 1) is not None and getattr(args, "bits", 1) < 1:
            raise UsageError("--bits must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (DataError, FileNotFoundError, IsADirectoryError, IdxError, BundleError, FrameError,
            ShapeError, OverflowError, ValueError) as exc:
        print(f"fxpcnn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
