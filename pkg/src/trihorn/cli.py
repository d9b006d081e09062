"""``trihorn`` command-line entry point.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, augment, pixdropout, sample_rng
from .camera import BACKGROUND
from .checkpoint import CheckpointError
from .config import ConfigError, load_train_config
from .data import (DatasetError, dir_is_nonempty, generate_frames, load_dataset, load_synth_spec,
                   split_by_subject, write_dataset)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("trihorn")


class UsageError(Exception):
    pass


def _refuse_nonempty(path, force: bool):
    if dir_is_nonempty(path) and not force:
        raise UsageError(f"output directory {path} is not empty; pass --force to overwrite")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = load_synth_spec(args.spec, rng_seed=args.seed, n_frames=args.n_frames)
    _refuse_nonempty(args.out, args.force)
    manifest = write_dataset(generate_frames(spec), args.out)
    print(f"wrote {spec.n_frames} frames ({spec.n_joints} joints) to {manifest}")
    return EXIT_OK


def _train_config(args):
    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    from .train import LOSS_CSV, train
    cfg = _train_config(args)
    if not args.resume:
        _refuse_nonempty(args.out, args.force)
    frames = load_dataset(args.data)
    res = train(cfg, frames, out_dir=args.out, resume=args.resume, stop_after_epochs=args.stop_after)
    h = res.history
    state = "complete" if res.completed else "stopped early (resumable)"
    print(f"training {state}: {len(h)} epochs logged, first loss {h[0]['loss']:.6f}, "
          f"last loss {h[-1]['loss']:.6f}; checkpoint {res.checkpoint}; "
          f"losses {Path(args.out) / LOSS_CSV}")
    return EXIT_OK


def _thresholds(text: str):
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"--thresholds expects lo:hi:step, got {text!r}") from None
    if step <= 0 or hi < lo:
        raise UsageError("--thresholds needs step > 0 and hi >= lo")
    return tuple(float(v) for v in np.arange(lo, hi + step / 2, step))


def cmd_eval(args) -> int:
    from .train import evaluate, load_trained, prepare_samples
    cfg = load_train_config(args.config) if args.config else None
    model, cfg = load_trained(args.ckpt, cfg)
    samples = prepare_samples(load_dataset(args.data), cfg.cube_mm, cfg.out_size)
    report, _ = evaluate(model, samples, cfg, _thresholds(args.thresholds))
    report.to_csv(args.report)
    print(f"mean error {report.mean_error_mm:.3f} mm over {report.n_frames} frames; report {args.report}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .train import load_trained, predict_xyz, prepare_samples
    cfg = load_train_config(args.config) if args.config else None
    model, cfg = load_trained(args.ckpt, cfg)
    frames = load_dataset(args.data)
    samples = prepare_samples(frames, cfg.cube_mm, cfg.out_size)
    pred = predict_xyz(model, samples)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "joint", "x_mm", "y_mm", "z_mm"])
        for rec, pose in zip(frames.records, pred):
            for j, (x, y, z) in enumerate(pose):
                w.writerow([rec["id"], j, repr(float(x)), repr(float(y)), repr(float(z))])
    print(f"wrote {len(pred)} poses to {args.out}")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    from .train import prepare_samples
    if not 0 <= args.alpha <= 1:
        raise UsageError("--alpha must lie in [0, 1]")
    if args.gamma is not None and not 0 <= args.gamma <= 1:
        raise UsageError("--gamma must lie in [0, 1]")
    _refuse_nonempty(args.out, args.force)
    ds = load_dataset(args.data)
    n = min(args.n, len(ds))
    samples = prepare_samples((ds[i] for i in range(n)), args.cube_mm, args.out_size)
    cfg = AugmentConfig(alpha=args.alpha, rng_seed=args.seed, geometric=args.geometric)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fractions = []
    for i, crop in enumerate(samples.crops):
        rng = sample_rng(args.seed, i)
        if args.gamma is not None:
            aug = pixdropout(crop, args.alpha, rng, gamma=args.gamma)
        else:
            aug = augment(crop, cfg, rng)
        hand = crop.image != BACKGROUND
        if not args.geometric and hand.any():
            fractions.append(float(np.mean(aug.image[hand] == BACKGROUND)))
        crop.image.astype("<f4").tofile(out / f"{i:04d}_raw.f32")
        aug.image.astype("<f4").tofile(out / f"{i:04d}_aug.f32")
    gamma = args.gamma if args.gamma is not None else args.alpha / 2
    if fractions:
        f = np.array(fractions)
        print(f"dropped_fraction mean={f.mean():.6f} std={f.std():.6f} n={len(f)} "
              f"expected={gamma:.6f} size={args.out_size}")
    else:
        print(f"wrote {n} raw/augmented pairs (geometric on; dropped fraction not measured)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    rep = run_gradcheck(args.size, seed=args.seed, tolerance=args.tolerance)
    for line in rep.lines():
        print(line)
    print(f"elapsed {rep.seconds:.1f} s")
    return EXIT_OK if rep.passed else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    from .train import GRIDS, prepare_samples, run_ablation_suite
    cfg = _train_config(args)
    frames = list(load_dataset(args.data))
    if args.eval_data:
        test = list(load_dataset(args.eval_data))
        train_frames = frames
    elif args.held_out:
        train_frames, test = split_by_subject(frames, args.held_out)
        if not train_frames or not test:
            raise UsageError(f"holding out {args.held_out!r} leaves an empty train or test set")
    else:
        raise UsageError("ablate needs --eval-data or --held-out")
    grid = []
    for name in args.grid:
        grid += GRIDS[name]()
    tr = prepare_samples(train_frames, cfg.cube_mm, cfg.out_size)
    te = prepare_samples(test, cfg.cube_mm, cfg.out_size)
    rows = run_ablation_suite(cfg, grid, tr, te, csv_path=args.report)
    for r in rows:
        print(f"{r['name']:36s} loss {r['final_loss']:.5f}  error {r['mean_error_mm']:.2f} mm")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trihorn", description="Depth-image hand pose estimation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--spec", required=True, help="key = value generator spec")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-frames", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="manifest.jsonl or its directory")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--stop-after", type=int, metavar="EPOCHS", help="stop after this many epochs")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--config", help="defaults to config.txt next to the checkpoint")
    e.add_argument("--thresholds", default="0:80:2", help="success-curve thresholds lo:hi:step (mm)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="write predicted 3D poses as CSV")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.set_defaults(func=cmd_predict)

    a = sub.add_parser("augment-preview", help="dump raw and augmented crops")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--n", type=int, default=8)
    a.add_argument("--alpha", type=float, default=0.15)
    a.add_argument("--gamma", type=float, help="fix the drop probability instead of sampling it")
    a.add_argument("--geometric", action="store_true", help="also apply geometric augmentation")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--cube-mm", type=float, default=150.0)
    a.add_argument("--out-size", type=int, default=128)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_augment_preview)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--size", choices=("toy", "small"), default="toy")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("ablate", help="train and compare ablation variants")
    b.add_argument("--config", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--eval-data")
    b.add_argument("--held-out", help="subject label held out for testing")
    b.add_argument("--grid", nargs="+", choices=("fusion", "encoder", "pixdropout"), default=["fusion"])
    b.add_argument("--report", required=True)
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_ablate)
    return p


def _thread_limit():
    raw = os.environ.get("THN_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"THN_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError, FloatingPointError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
