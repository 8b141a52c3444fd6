"""Command-line entry point.

Subcommands: synthesize, transfer, animate, train-flow, gram-stats,
grad-check. Exit codes: 0 success, 1 usage error, 2 runtime error.
Every run prints a reproducibility line with the resolved flags before
any work starts.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import flowtrain, gram, media, msoe, optim, synth, vgg
from . import tensor as T


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_shared_synthesis_flags(p):
    p.add_argument("--vgg", help="VGG weight file (default: seeded random weights)")
    p.add_argument("--msoe", help="MSOE weight file (default: seeded random weights)")
    p.add_argument("--frames", type=int, default=12, help="output frame count")
    p.add_argument("--size", type=int, default=256, help="output height and width")
    p.add_argument("--alpha", type=float, default=1.0, help="appearance weight")
    p.add_argument("--beta", type=float, default=1.0, help="dynamics weight")
    p.add_argument("--iters", type=int, default=1000, help="L-BFGS iteration budget")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output frame directory")
    p.add_argument("--incremental", type=int, metavar="N", help="subsequence length")
    p.add_argument("--endless", action="store_true", help="loopable output")
    p.add_argument(
        "--dynamics-layer",
        choices=("concat", "flow-decode"),
        default="concat",
        help="layer whose Gram drives the dynamics loss",
    )
    group = p.add_mutually_exclusive_group()
    group.add_argument("--appearance-only", action="store_true", help="force beta = 0")
    group.add_argument("--dynamics-only", action="store_true", help="force alpha = 0")


def build_parser():
    parser = _Parser(prog="dyntex", description="Two-stream dynamic texture engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="synthesize a texture from one target")
    p.add_argument("--target", required=True, help="target frame directory")
    _add_shared_synthesis_flags(p)

    p = sub.add_parser("transfer", help="appearance from one source, dynamics from another")
    p.add_argument("--appearance-target", required=True, help="frame directory or image")
    p.add_argument("--dynamics-target", required=True, help="frame directory")
    _add_shared_synthesis_flags(p)

    p = sub.add_parser("animate", help="animate a still image")
    p.add_argument("--image", required=True, help="appearance image")
    p.add_argument("--dynamics-target", required=True, help="frame directory")
    _add_shared_synthesis_flags(p)

    p = sub.add_parser("train-flow", help="train the dynamics network on synthetic flow")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--trace", help="aEPE trace CSV path (default: <out>.csv)")

    p = sub.add_parser("gram-stats", help="print per-layer Gram Frobenius norms as CSV")
    p.add_argument("--target", required=True, help="target frame directory")
    p.add_argument("--vgg", help="VGG weight file (default: seeded random)")
    p.add_argument("--msoe", help="MSOE weight file (default: seeded random)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("grad-check", help="finite-difference check of both streams")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--frames", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200, help="coordinates to check")

    return parser


def _print_repro_line(args):
    flags = " ".join(
        f"--{k.replace('_', '-')}={v}"
        for k, v in sorted(vars(args).items())
        if k != "command" and v is not None and v is not False
    )
    print(f"# dyntex {args.command} {flags}")


def _load_vgg(path, seed):
    if path:
        w = media.load_weights(path)
        if not isinstance(w, vgg.VggWeights):
            raise UsageError(f"{path} is not a VGG weight file")
        return w
    print("# no --vgg given: using seeded random VGG weights")
    return vgg.VggWeights.random(seed)


def _load_msoe(path, seed):
    if path:
        w = media.load_weights(path)
        if not isinstance(w, msoe.MsoeWeights):
            raise UsageError(f"{path} is not an MSOE weight file")
        return w
    print("# no --msoe given: using seeded random MSOE weights")
    return msoe.MsoeWeights.random(seed)


def _synthesis_config(args):
    alpha, beta = args.alpha, args.beta
    if args.appearance_only:
        if args.dynamics_layer != "concat":
            raise UsageError("--appearance-only conflicts with --dynamics-layer")
        beta = 0.0
    if args.dynamics_only:
        alpha = 0.0
    if args.incremental is not None and args.endless:
        raise UsageError("--incremental cannot be combined with --endless")
    return synth.SynthesisConfig(
        alpha=alpha,
        beta=beta,
        t_out=args.frames,
        height=args.size,
        width=args.size,
        iters=args.iters,
        seed=args.seed,
        dynamics_layer=args.dynamics_layer,
        endless=args.endless,
    )


def _write_trace(out_dir, trace):
    with open(Path(out_dir) / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "appearance_loss", "dynamics_loss", "total_loss"])
        writer.writerows(trace)


def _run_synthesis(targets, vgg_w, msoe_w, config, args):
    if args.incremental is not None:
        result = synth.synthesize_incremental(
            targets, vgg_w, msoe_w, config, args.incremental
        )
    else:
        result = synth.synthesize(targets, vgg_w, msoe_w, config)
    out = Path(args.out)
    media.save_frames(result.volume, out)
    _write_trace(out, result.trace)
    print(
        f"synthesis done: loss {result.initial_loss:.6g} -> {result.final_loss:.6g} "
        f"({result.status}); frames in {out}"
    )


def _cmd_synthesize(args):
    config = _synthesis_config(args)
    vgg_w = _load_vgg(args.vgg, args.seed) if config.alpha > 0 else None
    msoe_w = _load_msoe(args.msoe, args.seed) if config.beta > 0 else None
    target = media.load_frames(args.target)
    targets = synth.compute_targets(target, target, vgg_w, msoe_w, config.loss_config())
    _run_synthesis(targets, vgg_w, msoe_w, config, args)


def _load_frames_or_image(path):
    p = Path(path)
    return media.load_frames(p) if p.is_dir() else media.load_image(p)


def _cmd_transfer(args):
    config = _synthesis_config(args)
    vgg_w = _load_vgg(args.vgg, args.seed) if config.alpha > 0 else None
    msoe_w = _load_msoe(args.msoe, args.seed) if config.beta > 0 else None
    app_src = _load_frames_or_image(args.appearance_target)
    dyn_src = media.load_frames(args.dynamics_target)
    if dyn_src.shape[0] < 2:
        raise UsageError("dynamics target needs at least 2 frames")
    targets = synth.compute_targets(app_src, dyn_src, vgg_w, msoe_w, config.loss_config())
    _run_synthesis(targets, vgg_w, msoe_w, config, args)


def _cmd_animate(args):
    config = _synthesis_config(args)
    vgg_w = _load_vgg(args.vgg, args.seed) if config.alpha > 0 else None
    msoe_w = _load_msoe(args.msoe, args.seed) if config.beta > 0 else None
    image = media.load_image(args.image)
    dyn_src = media.load_frames(args.dynamics_target)
    if dyn_src.shape[0] < 2:
        raise UsageError("dynamics target needs at least 2 frames")
    targets = synth.compute_targets(image, dyn_src, vgg_w, msoe_w, config.loss_config())
    _run_synthesis(targets, vgg_w, msoe_w, config, args)


def _cmd_train_flow(args):
    trace_path = args.trace or f"{args.out}.csv"
    weights, run = flowtrain.train(
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        seed=args.seed,
        sample_hw=args.size,
        checkpoint_path=args.out,
        trace_path=trace_path,
        log=print,
    )
    final_holdout = run.aepe_trace[-1][2]
    print(f"training {run.status}: final holdout aEPE {final_holdout:.4f} px")
    if run.status != "ok":
        raise RuntimeError(f"training aborted: {run.status}")


def _cmd_gram_stats(args):
    vgg_w = _load_vgg(args.vgg, args.seed)
    msoe_w = _load_msoe(args.msoe, args.seed)
    video = media.load_frames(args.target)
    config = gram.LossConfig(t_out=video.shape[0])
    targets = synth.compute_targets(video, video, vgg_w, msoe_w, config)
    writer = csv.writer(sys.stdout)
    writer.writerow(["stream", "layer", "gram_frobenius_norm"])
    for name in gram.APPEARANCE_LAYERS:
        writer.writerow(
            ["appearance", name, f"{np.linalg.norm(targets.appearance[name].values):.8g}"]
        )
    writer.writerow(
        ["dynamics", "concat", f"{np.linalg.norm(targets.dynamics.values):.8g}"]
    )


def _max_rel_error(analytic, x0, f, samples, seed, step=1e-4):
    """Central-difference spot check against an analytic gradient.

    The graphs under test run in float64, so a small step keeps both
    truncation error and the chance of straddling a relu/argmax kink
    low without hitting roundoff.
    """
    rng = np.random.default_rng(seed)
    idx = rng.choice(x0.size, size=min(samples, x0.size), replace=False)
    worst = 0.0
    for i in idx:
        xp = x0.copy()
        xp[i] += step
        xm = x0.copy()
        xm[i] -= step
        fd = (f(xp) - f(xm)) / (2 * step)
        denom = max(abs(fd), abs(analytic[i]), 1e-8)
        worst = max(worst, abs(fd - analytic[i]) / denom)
    return worst


def _cmd_grad_check(args):
    size, frames = args.size, args.frames
    if size % 16:
        raise UsageError("--size must be divisible by 16")
    vgg_w = vgg.VggWeights.random(args.seed).astype(np.float64)
    msoe_w = msoe.MsoeWeights.random(args.seed + 1).astype(np.float64)
    rng = np.random.default_rng(args.seed + 2)
    vol = rng.normal(127.5, 27.5, size=(frames, size, size, 3))

    target_vol = rng.normal(127.5, 27.5, size=(frames, size, size, 3))
    config = gram.LossConfig(t_out=frames)
    targets = synth.compute_targets(target_vol, target_vol, vgg_w, msoe_w, config)

    def check(alpha, beta, label):
        cfg = synth.SynthesisConfig(
            alpha=alpha, beta=beta, t_out=frames, height=size, width=size
        )

        def loss_of(x):
            video = T.Tensor(x.reshape(vol.shape))
            total, _, _ = synth.build_loss(video, targets, vgg_w, msoe_w, cfg, frames)
            return float(total.data)

        video = T.Tensor(vol.copy())
        total, _, _ = synth.build_loss(video, targets, vgg_w, msoe_w, cfg, frames)
        g = T.backward(total, np.float64(1.0), [video])[0].ravel()
        err = _max_rel_error(
            g, vol.ravel().copy(), loss_of, args.samples, args.seed + 3
        )
        print(f"{label}: max relative gradient error {err:.3e}")
        return err

    worst = max(
        check(1.0, 0.0, "appearance stream"), check(0.0, 1.0, "dynamics stream")
    )
    if worst >= 1e-4:
        raise RuntimeError(f"gradient check failed: max relative error {worst:.3e}")
    print("gradient check passed (< 1e-4)")


_COMMANDS = {
    "synthesize": _cmd_synthesize,
    "transfer": _cmd_transfer,
    "animate": _cmd_animate,
    "train-flow": _cmd_train_flow,
    "gram-stats": _cmd_gram_stats,
    "grad-check": _cmd_grad_check,
}


def run(argv):
    """Parse and dispatch; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        _print_repro_line(args)
        _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (
        media.MediaError,
        synth.SynthesisError,
        optim.NanLossError,
        T.ShapeError,
        ValueError,
        RuntimeError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
