"""Command-line interface.

Summaries go to stdout as JSON; bulk artifacts (CSV curves, PNGs,
checkpoints) go to files named by flags. Exit codes: 0 success, 1 usage or
bad configuration, 2 missing or malformed input files, 3 numeric failure.
When a --seed flag is omitted, the CALFLOW_SEED environment variable is
used, then 0.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .dataset import ManifestError, load_manifest, load_pairs, make_synthetic_dataset
from .flow import CheckpointError, ConditionalFlow, FlowConfig, load_checkpoint, save_checkpoint
from .histogram import KernelConfig, make_grid, soft_hist
from .image import Image, PngFormatError, load_png, quantize, save_png
from .losses import LossConfig, alignment_report, cal_loss, per_channel_w1
from .metrics import psnr, ssim
from .optim import (
    NonFiniteGradientError,
    TrainConfig,
    optimize_pixels_cal,
    run_gradchecks,
    train_flow,
    write_loss_curve,
)

_CHANNEL_INDEX = {"r": 0, "g": 1, "b": 2}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage problems to 1
        raise UsageError(message)


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    raw = os.environ.get("CALFLOW_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"CALFLOW_SEED must be an integer, got {raw!r}") from None


def _loss_config(args) -> LossConfig:
    grid = make_grid(args.lower, args.upper, args.bins)
    return LossConfig(
        lam=getattr(args, "lam", 0.01),
        grid=grid,
        kernel=KernelConfig.for_grid(grid),
        channel_reduction=getattr(args, "reduction", "sum"),
    )


def _emit(payload) -> None:
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _guard_outputs(inputs, outputs) -> None:
    """Refuse to write any declared output over a file the command reads."""
    taken = {Path(p).resolve() for p in inputs if p is not None}
    for flag, out in outputs:
        if out is not None and Path(out).resolve() in taken:
            raise UsageError(f"{flag} would overwrite input file: {out}")


# ------------------------------------------------------------------ commands


def _cmd_hist(args) -> int:
    _guard_outputs([args.image], [("--out", args.out)])
    img = load_png(args.image)
    grid = make_grid(args.lower, args.upper, args.bins)
    hist = soft_hist(img.channel(_CHANNEL_INDEX[args.channel]), grid, KernelConfig.for_grid(grid))
    lines = ["node,mass"]
    for node, mass in zip(grid.nodes, hist.mass):
        lines.append(f"{node:.9g},{mass:.9g}")
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
        _emit({"image": str(args.image), "channel": args.channel, "bins": args.bins, "out": str(args.out)})
    return 0


def _cmd_cal(args) -> int:
    restored = load_png(args.restored).data
    reference = load_png(args.reference).data
    report = alignment_report(restored, reference, _loss_config(args))
    _emit(report.to_json_dict())
    return 0


def _cmd_optimize(args) -> int:
    _guard_outputs(
        [args.image, args.reference],
        [("--out", args.out), ("--history", args.history)],
    )
    image = load_png(args.image).data
    reference = load_png(args.reference).data
    cfg = _loss_config(args)
    stop = None
    if args.stop_fraction is not None:
        if not 0.0 < args.stop_fraction < 1.0:
            raise UsageError("--stop-fraction must be in (0, 1)")
        stop = args.stop_fraction * cal_loss(image, reference, cfg)[0]
    result = optimize_pixels_cal(image, reference, cfg, steps=args.steps, lr=args.lr, stop_threshold=stop)
    # The descent is free to park pixels outside [0, 1]; the PNG is not. Report
    # the loss of the bytes actually written next to the continuous optimum.
    stored = quantize(result.image).astype(np.float64) / 255.0
    save_png(Image(stored), args.out)
    if args.history is not None:
        lines = ["step,cal"] + [f"{i},{v!r}" for i, v in enumerate(result.history)]
        with open(args.history, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    history = result.history
    _emit(
        {
            "initial_cal": history[0],
            "final_cal": history[-1],
            "out_cal": cal_loss(stored, reference, cfg)[0],
            "steps_taken": result.steps_taken,
            "monotone": all(b <= a for a, b in zip(history, history[1:])),
            "out": str(args.out),
        }
    )
    return 0


def _load_training_pairs(args, seed: int):
    """Load the training pairs and the list of files the run reads."""
    if args.manifest is not None:
        manifest = load_manifest(args.manifest)
        inputs = [args.manifest]
        for entry in manifest.entries:
            inputs.extend((entry.low, entry.ref))
        return load_pairs(manifest), inputs
    return make_synthetic_dataset(args.synthetic, size=args.synthetic_size, seed=seed), []


def _cmd_train(args) -> int:
    seed = _resolve_seed(args.seed)
    pairs, input_paths = _load_training_pairs(args, seed)
    _guard_outputs(input_paths, [("--out", args.out), ("--loss-curve", args.loss_curve)])
    flow = ConditionalFlow(
        FlowConfig(steps=args.flow_steps, width=args.width, cond_channels=args.cond_channels),
        rng=np.random.default_rng(seed),
    )
    config = TrainConfig(
        patch_size=args.patch_size,
        batch_size=args.batch_size,
        max_steps=args.steps,
        lr=args.lr,
        lam=args.lam,
        seed=seed,
        log_every=args.log_every,
        method=args.method,
    )
    result = train_flow(flow, pairs, config)
    save_checkpoint(flow, args.out)
    if args.loss_curve is not None:
        write_loss_curve(result.records, args.loss_curve)
    _emit(
        {
            "n_pairs": len(pairs),
            "n_params": flow.n_params,
            "steps": config.max_steps,
            "seed": seed,
            "lambda": config.lam,
            "first": dataclasses.asdict(result.records[0]),
            "final": dataclasses.asdict(result.records[-1]),
            "checkpoint": str(args.out),
            "loss_curve": None if args.loss_curve is None else str(args.loss_curve),
        }
    )
    return 0


def _cmd_enhance(args) -> int:
    _guard_outputs([args.checkpoint, args.low], [("--out", args.out)])
    flow = load_checkpoint(args.checkpoint)
    low = load_png(args.low).data
    if args.tau < 0:
        raise UsageError("--tau must be >= 0")
    rng = np.random.default_rng(_resolve_seed(args.seed)) if args.tau > 0 else None
    restored = flow.enhance(low, tau=args.tau, rng=rng)
    save_png(Image(np.clip(restored, 0.0, 1.0)), args.out)
    _emit({"out": str(args.out), "tau": args.tau})
    return 0


def _cmd_eval(args) -> int:
    flow = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    pairs = load_pairs(manifest)
    if not pairs:
        raise ManifestError(f"{args.manifest}: manifest has no entries")
    cfg = _loss_config(args)
    rows = []
    for i, (low, ref) in enumerate(pairs):
        restored = np.clip(flow.enhance(low), 0.0, 1.0)
        w1 = per_channel_w1(restored, ref, cfg)
        cal = float(w1.mean() if cfg.channel_reduction == "mean" else w1.sum())
        p = psnr(restored, ref)
        rows.append(
            {
                "index": i,
                "psnr": "inf" if np.isinf(p) else p,
                "ssim": ssim(restored, ref),
                "cal": cal,
                "w1_r": float(w1[0]),
                "w1_g": float(w1[1]),
                "w1_b": float(w1[2]),
                "_psnr_value": p,
            }
        )
    mean_psnr = float(np.mean([r.pop("_psnr_value") for r in rows]))
    payload = {
        "split": manifest.split,
        "pairs": rows,
        "mean": {
            "psnr": "inf" if np.isinf(mean_psnr) else mean_psnr,
            "ssim": float(np.mean([r["ssim"] for r in rows])),
            "cal": float(np.mean([r["cal"] for r in rows])),
        },
    }
    _emit(payload)
    return 0


def _cmd_gradcheck(args) -> int:
    reports = run_gradchecks(seed=_resolve_seed(args.seed))
    _emit([r.to_json_dict() for r in reports])
    return 0 if all(r.passed for r in reports) else 3


# -------------------------------------------------------------------- parser


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bins", type=int, default=64, help="histogram nodes (default 64)")
    p.add_argument("--lower", type=float, default=0.0, help="grid lower edge (default 0.0)")
    p.add_argument("--upper", type=float, default=1.0, help="grid upper edge (default 1.0)")


def build_parser() -> _Parser:
    parser = _Parser(prog="calflow", description="Color-alignment losses and a toy conditional flow.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("hist", help="soft histogram of one channel, as node,mass CSV")
    p.add_argument("image")
    p.add_argument("--channel", choices=sorted(_CHANNEL_INDEX), required=True)
    _add_grid_flags(p)
    p.add_argument("--out", default=None, help="CSV path (default: print to stdout)")
    p.set_defaults(func=_cmd_hist)

    p = sub.add_parser("cal", help="alignment loss between two images")
    p.add_argument("restored")
    p.add_argument("reference")
    p.add_argument("--lam", type=float, default=0.01)
    p.add_argument("--reduction", choices=("sum", "mean"), default="sum")
    _add_grid_flags(p)
    p.set_defaults(func=_cmd_cal)

    p = sub.add_parser("optimize", help="descend the alignment loss in pixel space")
    p.add_argument("image")
    p.add_argument("reference")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--stop-fraction", type=float, default=None, help="stop once loss falls below this fraction of the start")
    p.add_argument("--history", default=None, help="optional step,cal CSV")
    _add_grid_flags(p)
    p.set_defaults(func=_cmd_optimize, lam=0.01, reduction="sum")

    p = sub.add_parser("train", help="train the conditional flow on paired images")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", default=None)
    src.add_argument("--synthetic", type=int, default=None, metavar="N_PAIRS")
    p.add_argument("--synthetic-size", type=int, default=64)
    p.add_argument("--out", required=True, help="checkpoint JSON path")
    p.add_argument("--loss-curve", default=None, help="optional step,nll,cal,total CSV")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--lam", type=float, default=0.01)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--method", choices=("adam", "sgd"), default="adam")
    p.add_argument("--flow-steps", type=int, default=4)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--cond-channels", type=int, default=8)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("enhance", help="restore a low-light image with a trained flow")
    p.add_argument("checkpoint")
    p.add_argument("low")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_enhance)

    p = sub.add_parser("eval", help="metrics for a checkpoint over a manifest")
    p.add_argument("checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--reduction", choices=("sum", "mean"), default="sum")
    _add_grid_flags(p)
    p.set_defaults(func=_cmd_eval, lam=0.01)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all analytic gradients")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (PngFormatError, ManifestError, CheckpointError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteGradientError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
