"""Command-line entry point: ``latentflow synth|train|infer|baseline|check``.

Exit codes: 0 success, 1 a verification probe failed, 2 usage or config
error, 3 numerical abort, 4 I/O error.
"""

import argparse
import logging
import os
import sys

import numpy as np

from .config import ConfigError, TrainConfig, help_text

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("latentflow")


class UsageError(ValueError):
    pass


def _size(text):
    parts = text.lower().split("x")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    if h < 2 or w < 2:
        raise argparse.ArgumentTypeError(f"extents must be >= 2, got {text!r}")
    return h, w


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from .data import make_synthetic, save_image, write_manifest
    from .inference import write_field_bin

    H, W = args.size
    scene = make_synthetic(args.kind, H, W, args.steps, args.dt, args.seed, args.displacement)
    os.makedirs(args.out, exist_ok=True)
    save_image(os.path.join(args.out, "x0.png"), scene.x0)
    save_image(os.path.join(args.out, "x1.png"), np.clip(scene.x1, 0.0, 1.0))
    names = []
    for s in range(args.steps):
        name = f"field_{s:03d}.bin"
        write_field_bin(os.path.join(args.out, name), scene.fields[s])
        names.append(name)
    extra = {"kind": args.kind, "steps": args.steps, "dt": args.dt, "seed": args.seed, "field": names}
    write_manifest(os.path.join(args.out, "manifest.txt"), ["x0.png"], ["x1.png"], extra)
    print(f"wrote {len(names) + 3} files to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .data import load_pair, scan_patches
    from .training import train

    cfg = TrainConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    pair = load_pair(args.data)
    hp, wp = cfg.patch
    H, W, C = pair.x0.shape
    if hp > H or wp > W:
        raise ConfigError(f"patch {hp}x{wp} exceeds image {H}x{W}")
    bundle = cfg.bundle(C)
    patches = scan_patches(pair, hp, wp, *cfg.stride)
    os.makedirs(args.out, exist_ok=True)
    print(f"training on {len(patches)} patch pairs for {cfg.iterations} iterations")
    bundle, rows = train(patches, bundle, cfg.optimizer(), cfg.weights(), cfg.iterations, cfg.batch, cfg.seed,
                         cfg.log_every, os.path.join(args.out, "metrics.csv"),
                         os.path.join(args.out, "abort_state.npz"))
    bundle.save(os.path.join(args.out, "model.bin"))
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    if rows:
        print(f"final loss {rows[-1][1]:.6g} (initial {rows[0][1]:.6g})")
    return EXIT_OK


def _load_bundle(path):
    from .networks import ModelBundle

    try:
        return ModelBundle.load(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise OSError(f"cannot load model bundle {path}: {exc}") from exc


def cmd_infer(args):
    from .data import load_pair
    from .inference import export_artifacts, infer_image

    bundle = _load_bundle(args.model)
    pair = load_pair(args.data)
    result = infer_image(pair, bundle, args.patch)
    files = export_artifacts(result, args.out, args.quiver_every)
    print(f"wrote {len(files)} files to {args.out}")
    for key, value in result.endpoint_errors().items():
        print(f"{key} {value:.6g}")
    return EXIT_OK


def cmd_baseline(args):
    from .data import load_pair
    from .inference import ImageInference, export_artifacts

    pair = load_pair(args.data)
    if args.method == "ot":
        from .baselines import ot_interpolate

        res = ot_interpolate(pair, args.steps, args.epsilon, args.max_iter, args.tol, args.floor)
        tp = res.transport
        result = ImageInference(res.frames, None, None, 1.0 / args.steps, pair.x0.shape[:2], x0=pair.x0,
                                x1=pair.x1, method=res.method)
        extra = {"epsilon": args.epsilon, "sinkhorn_iterations": tp.n_iter, "converged": tp.converged,
                 "marginal_error": tp.marginal_error, "transport_cost": tp.cost}
        files = export_artifacts(result, args.out, prefix="baseline_ot", extra_metrics=extra)
        if not tp.converged:
            print(f"warning: Sinkhorn stopped after {tp.n_iter} iterations, marginal error {tp.marginal_error:.3g}")
    else:
        from .baselines import direct_pde_fit

        if args.config is None:
            raise UsageError("baseline --method direct needs --config")
        cfg = TrainConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        target = os.path.join(args.out, "baseline_direct")
        os.makedirs(target, exist_ok=True)
        fit = direct_pde_fit(pair, cfg.patch, cfg.stride, cfg.n_evolution, cfg.dt, cfg.weights(), cfg.optimizer(),
                             cfg.iterations, cfg.batch, cfg.seed, cfg.field_cfg(1),
                             os.path.join(target, "metrics.csv"), cfg.log_every)
        fit.bundle.save(os.path.join(target, "model.bin"))
        files = export_artifacts(fit.result, args.out, args.quiver_every, prefix="baseline_direct")
    print(f"wrote {len(files)} files under {args.out}")
    return EXIT_OK


def cmd_check(args):
    from . import checks

    suite = {"grad": checks.grad_suite, "advect": checks.advect_suite, "ot": checks.ot_suite}[args.suite]
    results = suite(seed=args.seed) if args.suite != "ot" else suite()
    print(checks.report(results))
    worst = max((r.value for r in results if r.limit > 0), default=0.0)
    print(f"{args.suite}: {sum(r.passed for r in results)}/{len(results)} passed, max measured error {worst:.3e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="latentflow", description="Latent-space advection dynamics between two images.",
                                epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene with known fields")
    s.add_argument("--kind", required=True, choices=["translation", "rotation", "source-sink"])
    s.add_argument("--size", type=_size, default=(64, 64), help="HxW (default 64x64)")
    s.add_argument("--steps", type=_positive_int, default=10)
    s.add_argument("--dt", type=float, default=0.1)
    s.add_argument("--displacement", type=float, default=1.0, help="largest per-step shift in cells (max 2)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model bundle on an image pair", epilog=help_text(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--data", required=True, help="manifest file")
    t.add_argument("--config", required=True, help="key = value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="infer intermediate frames and fields for a pair")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--patch", type=_size, default=None, help="tile extents (default: training patch)")
    i.add_argument("--quiver-every", type=_positive_int, default=8)
    i.add_argument("--seed", type=int, default=0, help="unused; inference is deterministic")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("baseline", help="run a comparison method", epilog=help_text(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    b.add_argument("--method", required=True, choices=["ot", "direct"])
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--steps", type=_positive_int, default=10, help="OT: number of interpolation steps")
    b.add_argument("--epsilon", type=float, default=1e-2, help="OT: entropic weight")
    b.add_argument("--floor", type=float, default=1e-8, help="OT: density floor before renormalizing")
    b.add_argument("--max-iter", type=_positive_int, default=5000, help="OT: Sinkhorn iteration cap")
    b.add_argument("--tol", type=float, default=1e-7, help="OT: marginal tolerance (L1)")
    b.add_argument("--config", default=None, help="direct: training config")
    b.add_argument("--quiver-every", type=_positive_int, default=8)
    b.add_argument("--seed", type=int, default=None, help="direct: override the config seed")
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("check", help="run verification probes")
    c.add_argument("--suite", required=True, choices=["grad", "advect", "ot"])
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None):
    from .training import NumericalAbort

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        where = f"; state dumped to {exc.dump_path}" if exc.dump_path else ""
        print(f"numerical abort: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
