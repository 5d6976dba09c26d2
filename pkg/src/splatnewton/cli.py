"""Command line: ``splatnewton {train,render,synth,check-grad,bench}``.

Failures print a JSON object ``{"error": ..., "message": ...}`` on stderr and
exit with a nonzero status. ``SPLATNEWTON_SEED`` and ``SPLATNEWTON_THREADS``
supply defaults for ``--seed`` and ``--threads``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

EXIT_FAILURE = 1
EXIT_ERROR = 2


def _env_int(name, default):
    value = os.environ.get(name)
    return default if value in (None, "") else int(value)


def _limit_threads(n):
    # must run before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _print_json(obj, stream=None):
    (stream or sys.stdout).write(json.dumps(obj, indent=1) + "\n")


# -- subcommands -----------------------------------------------------------------


def cmd_train(args):
    from .dataset import Dataset
    from .scene import Scene
    from .trainer import TrainConfig, parse_order, run_training

    scene = Scene.load(args.scene)
    dataset = Dataset.load(args.dataset)
    config = TrainConfig(optimizer=args.optimizer, order=parse_order(args.order),
                         epochs=args.epochs, max_steps=args.max_steps, seed=args.seed,
                         lam=args.lam, knn=args.knn, downsample=args.secondary_downsample,
                         log_every=args.log_every, dump_path=args.dump)
    final, reports = run_training(config, scene, dataset, args.log, args.checkpoint_dir)
    if args.out:
        final.save(args.out)
    last = reports[-1]
    _print_json({"steps": last.step, "probe_loss": last.probe_loss, "psnr": last.psnr,
                 "ssim": last.ssim})
    return 0


def cmd_render(args):
    from .dataset import Dataset, write_image
    from .metrics import evaluate_images
    from .raster import DEFAULT, EXACT, render, render_reference
    from .scene import Scene

    scene = Scene.load(args.scene)
    dataset = Dataset.load(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = []
    for i, cam in enumerate(dataset.cameras):
        if args.reference:
            img = render_reference(scene, cam).color
        else:
            img = render(scene, cam, EXACT if args.exact else DEFAULT).color
        write_image(out / f"render_{i:03d}.{args.format}", img)
        images.append(img)
    _print_json(evaluate_images(images, dataset.images).to_dict())
    return 0


def cmd_synth(args):
    from .synth import synth_scene

    truth, init, dataset = synth_scene(args.seed, args.kernels, args.views, args.resolution,
                                       args.perturbation, args.layout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth.save(out / "truth.json")
    init.save(out / "init.json")
    dataset.save(out / "dataset" / "manifest.json", args.format)
    _print_json({"truth": str(out / "truth.json"), "init": str(out / "init.json"),
                 "dataset": str(out / "dataset" / "manifest.json")})
    return 0


def cmd_check_grad(args):
    import numpy as np

    from .dataset import Dataset
    from .gradcheck import DerivativeReport, check_derivatives
    from .scene import Scene
    from .synth import make_cameras, random_scene

    report = DerivativeReport()
    if args.scene:
        scene = Scene.load(args.scene)
        if args.dataset:
            dataset = Dataset.load(args.dataset)
            cam, target = dataset.cameras[args.view], dataset.images[args.view]
        else:
            cam, target = make_cameras(4, args.resolution)[args.view % 4], None
        report = check_derivatives(scene, cam, target, args.tolerance, args.hessian_tolerance,
                                   seed=args.seed)
    else:
        cameras = make_cameras(4, args.resolution)
        for i in range(args.scenes):
            rng = np.random.default_rng([args.seed, i])
            scene = random_scene(rng, args.kernels)
            report = report.merge(check_derivatives(scene, cameras[i % 4], None, args.tolerance,
                                                    args.hessian_tolerance, seed=i))
    _print_json(report.to_dict())
    return 0 if report.passed else EXIT_FAILURE


def cmd_bench(args):
    from .benchmarks import ORDERS, convergence_run, order_run, spike_run

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = range(args.seed, args.seed + args.seeds)
    summary = {}
    if args.which in ("convergence", "all"):
        with open(out / "convergence.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "step", "newton_probe_loss", "gd200_probe_loss",
                        "newton_ms", "gd_ms"])
            for s in seeds:
                r = convergence_run(s, newton_steps=args.newton_steps)
                for step, loss in enumerate(r.newton_curve):
                    w.writerow([s, step, repr(loss), repr(r.gd_target), f"{r.newton_ms:.3f}",
                                f"{r.gd_ms:.3f}"])
                summary[f"convergence_seed{s}"] = {"iterations": r.iterations_to_target,
                                                   "cost_ratio": r.cost_ratio}
    if args.which in ("spike", "all"):
        with open(out / "spike.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "knn", "mean_spike"])
            for s in seeds:
                for k in (0, 3, 8):
                    mean_spike, _ = spike_run(s, k)
                    w.writerow([s, k, repr(mean_spike)])
    if args.which in ("order", "all"):
        with open(out / "order.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "order", "final_probe_loss"])
            for s in seeds:
                for name, order in ORDERS.items():
                    w.writerow([s, name, repr(order_run(s, order))])
    _print_json(summary)
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser():
    seed = _env_int("SPLATNEWTON_SEED", 0)
    threads = _env_int("SPLATNEWTON_THREADS", 1)
    parser = argparse.ArgumentParser(prog="splatnewton")
    parser.add_argument("--threads", type=int, default=threads,
                        help="BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a scene against a dataset")
    p.add_argument("--scene", required=True, help="initial scene JSON")
    p.add_argument("--dataset", required=True, help="dataset manifest JSON")
    p.add_argument("--optimizer", choices=("newton", "gd", "adam"), default="newton")
    p.add_argument("--order", default="pos,rot,scale,opacity,color")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--knn", type=int, default=3)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--log", default=None, help="CSV loss curve")
    p.add_argument("--log-every", type=int, default=1)
    p.add_argument("--secondary-downsample", type=int, default=None)
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--out", default=None, help="final scene JSON")
    p.add_argument("--dump", default=None, help="CSV of the last step's local systems")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a scene from every dataset camera")
    p.add_argument("--scene", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--exact", action="store_true", help="disable cutoffs")
    p.add_argument("--reference", action="store_true", help="brute-force renderer")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", help="write a synthetic scene and dataset")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--kernels", type=int, default=100)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--perturbation", type=float, default=1.0)
    p.add_argument("--layout", choices=("sphere", "ring"), default="sphere")
    p.add_argument("--format", choices=("png", "ppm"), default="ppm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("check-grad", help="finite-difference check of all derivatives")
    p.add_argument("--scene", default=None, help="check this scene instead of random ones")
    p.add_argument("--dataset", default=None)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--kernels", type=int, default=50)
    p.add_argument("--resolution", type=int, default=48)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--hessian-tolerance", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("bench", help="comparative and ablation runs, written as CSV")
    p.add_argument("--which", choices=("convergence", "spike", "order", "all"), default="all")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--newton-steps", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(args.threads)
    if getattr(args, "secondary_downsample", 0) is None:
        from .secondary import DOWNSAMPLE
        args.secondary_downsample = DOWNSAMPLE
    try:
        return args.func(args)
    except (ValueError, ArithmeticError, OSError, KeyError) as exc:
        _print_json({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
