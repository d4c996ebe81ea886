"""Command-line interface: dataset generation, training, counting, evaluation,
cross validation and gradient verification.

Exit codes: 0 success, 1 validation or convergence failure, 2 I/O error.
"""

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, training
from .dataio import FormatError, SynthConfig
from .density import count_from_density, gaussian_kernel, render_density_map
from .model import forward
from .training import TRAIN_LOG_HEADER, TrainConfig

MODEL_FLAGS = {"pricnn-aux": "pricnn_aux", "pricnn": "pricnn_only", "fcrn": "fcrn"}
GRADCHECK_TOL = 1e-2
CONVERGE_FRACTION = 0.01


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; 2 is reserved for I/O here.
    def error(self, message):
        raise _UsageError(message)


def _parse_size(text: str):
    try:
        w, h = text.lower().split("x")
        return int(h), int(w)  # (rows, cols)
    except ValueError:
        raise _UsageError(f"--size expects WIDTHxHEIGHT, got {text!r}") from None


def _parse_range(text: str, cast, flag: str):
    try:
        lo, hi = text.split(":")
        return cast(lo), cast(hi)
    except ValueError:
        raise _UsageError(f"{flag} expects LO:HI, got {text!r}") from None


def _parse_lambdas(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise _UsageError(f"--lambda expects three comma-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise _UsageError(f"--lambda expects numbers, got {text!r}") from None


def _half_width(kernel_size: int) -> int:
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise _UsageError(f"--kernel-size must be an odd integer >= 3, got {kernel_size}")
    return (kernel_size - 1) // 2


def _add_train_flags(p, with_lambda=True):
    p.add_argument("--model", choices=sorted(MODEL_FLAGS), default="pricnn-aux",
                   help="network variant (default: %(default)s)")
    if with_lambda:
        p.add_argument("--lambda", dest="lambdas", metavar="L1,L2,L3", default=None,
                       help="aux supervision strengths in [0,1], pricnn-aux only (default: 1.0,1.0,1.0)")
    p.add_argument("--lr", type=float, default=1e-4, help="SGD learning rate (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=8,
                   help="mini-batch size (default: %(default)s; paper-scale preset: 100)")
    p.add_argument("--epochs", type=int, default=10, help="training epochs (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: %(default)s)")
    p.add_argument("--sigma", type=float, default=3.0,
                   help="ground-truth Gaussian sigma in pixels (default: %(default)s)")
    p.add_argument("--kernel-size", type=int, default=21,
                   help="ground-truth Gaussian kernel size, odd (default: %(default)s)")
    p.add_argument("--density-scale", type=float, default=1.0,
                   help="target scale factor, divided back out when counting (default: %(default)s)")
    p.add_argument("--preset", choices=["paper-scale"], default=None,
                   help="paper-scale switches batch size to 100")


def _train_config(args) -> TrainConfig:
    variant = MODEL_FLAGS[args.model]
    lambdas = (1.0, 1.0, 1.0)
    if getattr(args, "lambdas", None) is not None:
        if variant != "pricnn_aux":
            raise _UsageError("--lambda is only valid for --model pricnn-aux")
        lambdas = _parse_lambdas(args.lambdas)
    batch = 100 if args.preset == "paper-scale" else args.batch_size
    return TrainConfig(
        variant=variant,
        learning_rate=args.lr,
        batch_size=batch,
        epochs=args.epochs,
        lambdas=lambdas,
        sigma=args.sigma,
        kernel_half_width=_half_width(args.kernel_size),
        seed=args.seed,
        density_scale=args.density_scale,
    )


def _build_parser() -> _Parser:
    parser = _Parser(prog="cellcount", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic annotated dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--num-images", type=int, default=8, help="number of images (default: %(default)s)")
    p.add_argument("--size", default="64x64", help="image size WIDTHxHEIGHT (default: %(default)s)")
    p.add_argument("--cells", default="5:30", help="cell count range LO:HI (default: %(default)s)")
    p.add_argument("--blob-sigma", default="1.0:2.5", help="blob sigma range LO:HI (default: %(default)s)")
    p.add_argument("--amplitude", default="0.3:0.9", help="blob amplitude range LO:HI (default: %(default)s)")
    p.add_argument("--noise", type=float, default=0.02, help="Gaussian noise sigma (default: %(default)s)")
    p.add_argument("--background", type=float, default=0.05, help="background level (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: %(default)s)")
    p.add_argument("--preset", choices=["paper-scale"], default=None,
                   help="paper-scale switches to 512x512 images with 202:834 cells")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("density", help="render ground-truth density maps for a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--sigma", type=float, default=3.0, help="Gaussian sigma in pixels (default: %(default)s)")
    p.add_argument("--kernel-size", type=int, default=21, help="kernel size, odd (default: %(default)s)")
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    _add_train_flags(p)
    p.add_argument("--log", default=None, help="write the per-batch loss log CSV here")
    p.add_argument("--assert-converge", action="store_true",
                   help=f"stop once the combined loss falls below {CONVERGE_FRACTION:.0%} of its "
                        "initial value; exit 1 if that never happens")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("count", help="count cells in one image with a trained model")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--image", required=True, help="input PGM image")
    p.add_argument("--dump-density", default=None, metavar="PATH",
                   help="also write the estimated density map as a DMAP file")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("eval", help="evaluate counting MAE/STD on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", default=None, help="checkpoint path (omit with --oracle)")
    p.add_argument("--oracle", action="store_true",
                   help="use stored/rendered ground-truth density maps instead of a model")
    p.add_argument("--sigma", type=float, default=3.0, help="oracle rendering sigma (default: %(default)s)")
    p.add_argument("--kernel-size", type=int, default=21, help="oracle kernel size (default: %(default)s)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("xval", help="k-fold cross validation (trains one model per fold)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--folds", type=int, default=5, help="number of folds (default: %(default)s)")
    _add_train_flags(p)
    p.add_argument("--out-dir", default=None, help="write per-fold checkpoints here")
    p.add_argument("--parallel-folds", action="store_true", help="train folds concurrently")
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--step", type=float, default=1e-2, help="central-difference step (default: %(default)s)")
    p.add_argument("--samples", type=int, default=50,
                   help="sampled parameters per group (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default: %(default)s)")
    p.add_argument("--corrupt-grad", action="store_true",
                   help="(testing) corrupt one analytic gradient so the check must fail")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def cmd_synth(args) -> int:
    rows, cols = (512, 512) if args.preset == "paper-scale" else _parse_size(args.size)
    cells = (202, 834) if args.preset == "paper-scale" else _parse_range(args.cells, int, "--cells")
    config = SynthConfig(
        num_images=args.num_images,
        rows=rows,
        cols=cols,
        cells_min=cells[0],
        cells_max=cells[1],
        blob_sigma_range=_parse_range(args.blob_sigma, float, "--blob-sigma"),
        amplitude_range=_parse_range(args.amplitude, float, "--amplitude"),
        noise_sigma=args.noise,
        background_level=args.background,
        seed=args.seed,
    )
    images = dataio.synth_generate(config)
    dataio.save_dataset(args.out, images)
    counts = [len(img.centroids) for img in images]
    for img, n in zip(images, counts):
        print(f"{img.id} {n}")
    mean = float(np.mean(counts)) if counts else 0.0
    std = float(np.std(counts, ddof=1)) if len(counts) > 1 else 0.0
    print(f"wrote {len(images)} images to {args.out} (cells per image: {mean:.1f} +/- {std:.1f})")
    return 0


def cmd_density(args) -> int:
    kernel = gaussian_kernel(args.sigma, _half_width(args.kernel_size))
    dataset = dataio.load_dataset(args.data)
    out_dir = Path(args.data) / "density"
    out_dir.mkdir(parents=True, exist_ok=True)
    for img in dataset:
        dmap = render_density_map(img.image.shape, img.centroids, kernel)
        dataio.write_dmap(out_dir / f"{img.id}.dmap", dmap)
    print(f"wrote {len(dataset)} density maps to {out_dir}")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    dataset = dataio.load_dataset(args.data)
    records = []
    result = training.train(
        dataset,
        config,
        progress=records.append,
        converge_fraction=CONVERGE_FRACTION if args.assert_converge else None,
    )
    dataio.save_checkpoint(args.out, result.params, config.density_scale)
    if args.log:
        with open(args.log, "w", newline="") as fh:
            fh.write(TRAIN_LOG_HEADER + "\n")
            for rec in records:
                fh.write(rec.csv_line() + "\n")
    print(
        f"trained {config.variant} for {len(records)} steps: "
        f"loss {result.initial_loss:.6g} -> {result.final_loss:.6g}"
    )
    print(f"checkpoint written to {args.out}")
    if args.assert_converge and not result.converged:
        print(
            f"error: loss did not fall below {CONVERGE_FRACTION:.0%} of its initial value",
            file=sys.stderr,
        )
        return 1
    return 0


def cmd_count(args) -> int:
    params, density_scale = dataio.load_checkpoint(args.ckpt)
    raw = dataio.read_pgm(args.image)
    h, w = raw.shape
    if h % 8 or w % 8:
        raise ValueError(
            f"image is {w}x{h}; the network needs both dimensions divisible by 8 "
            "(three 2x poolings must invert exactly)"
        )
    x = (raw.astype(np.float32) / 255.0)[None, None]
    outputs = forward(params, x)
    est_map = outputs.y_hat[0, 0] / np.float32(density_scale)
    print(f"{Path(args.image).stem} {count_from_density(est_map):.2f}")
    if args.dump_density:
        dataio.write_dmap(args.dump_density, est_map)
    return 0


def _oracle_density(args, img) -> np.ndarray:
    stored = Path(args.data) / "density" / f"{img.id}.dmap"
    if stored.exists():
        return dataio.read_dmap(stored)
    kernel = gaussian_kernel(args.sigma, _half_width(args.kernel_size))
    return render_density_map(img.image.shape, img.centroids, kernel)


def cmd_eval(args) -> int:
    dataset = dataio.load_dataset(args.data)
    if args.oracle:
        per_image = []
        for img in dataset:
            est = count_from_density(_oracle_density(args, img))
            true = float(len(img.centroids))
            per_image.append(training.ImageResult(img.id, true, est, abs(est - true)))
        mae, std = training.summarize_errors([r.abs_error for r in per_image])
        report = training.EvalReport(per_image, mae, std)
    else:
        if not args.ckpt:
            raise _UsageError("--ckpt is required unless --oracle is given")
        params, density_scale = dataio.load_checkpoint(args.ckpt)
        report = training.evaluate(params, params.variant, dataset, density_scale)
    print("id,true_count,est_count,abs_error")
    for r in report.per_image:
        print(f"{r.image_id},{r.true_count:.0f},{r.estimated_count:.3f},{r.abs_error:.3f}")
    print(f"MAE,{report.mae:.3f}")
    print(f"STD,{report.std:.3f}")
    return 0


def _run_fold(fold, split, dataset, config, out_dir):
    train_idx, val_idx = split
    fold_config = replace(config, seed=config.seed + fold)
    result = training.train([dataset[i] for i in train_idx], fold_config)
    report = training.evaluate(
        result.params, config.variant, [dataset[i] for i in val_idx], config.density_scale
    )
    if out_dir is not None:
        dataio.save_checkpoint(out_dir / f"fold_{fold}.drmw", result.params, config.density_scale)
    return report


def cmd_xval(args) -> int:
    config = _train_config(args)
    dataset = dataio.load_dataset(args.data)
    if args.folds > len(dataset):
        raise ValueError(f"cannot run {args.folds} folds on {len(dataset)} images")
    splits = training.kfold_split(len(dataset), args.folds, config.seed)
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if args.parallel_folds:
        with ThreadPoolExecutor(max_workers=len(splits)) as pool:
            reports = list(
                pool.map(lambda fs: _run_fold(fs[0], fs[1], dataset, config, out_dir), enumerate(splits))
            )
    else:
        reports = [_run_fold(f, s, dataset, config, out_dir) for f, s in enumerate(splits)]

    print("fold,mae,std")
    pooled = []
    for fold, report in enumerate(reports):
        print(f"{fold},{report.mae:.3f},{report.std:.3f}")
        pooled.extend(r.abs_error for r in report.per_image)
    mae, std = training.summarize_errors(pooled)
    print(f"pooled,{mae:.3f},{std:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.step <= 0 or args.samples < 1:
        raise _UsageError("--step must be positive and --samples at least 1")
    results = training.gradient_check_report(
        seed=args.seed, step=args.step, samples=args.samples, corrupt=args.corrupt_grad
    )
    print(
        f"gradcheck: step={args.step:g} samples={args.samples} seed={args.seed} "
        f"tol={GRADCHECK_TOL:g}"
    )
    worst = 0.0
    for group, res in results.items():
        status = "PASS" if res.max_rel_error <= GRADCHECK_TOL else "FAIL"
        print(
            f"{group} max_rel_err={res.max_rel_error:.3e} "
            f"checked={len(res.checks)} kink_skips={res.skipped} {status}"
        )
        worst = max(worst, res.max_rel_error)
    ok = worst <= GRADCHECK_TOL
    print(f"overall {'PASS' if ok else 'FAIL'} (max {worst:.3e}, tol {GRADCHECK_TOL:g})")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
