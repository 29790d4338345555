"""Command line entry point: ``refprior <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format error,
3 numerical failure (for example a non-finite training loss).
"""

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import harness, imageio
from .errors import ConfigError, RefPriorError
from .prior import heatmap_bytes, prior_map
from .synthesis import DEFAULT_GRIDS, DegradationSchedule, build_dataset, generate_sources


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _range(text_pair):
    lo, hi = (float(v) for v in text_pair)
    return (lo, hi)


def _add_train_flags(p, prrn):
    p.add_argument("--manifest", required=True, help="dataset directory or manifest.jsonl")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--dtype", choices=sorted(harness.DTYPES), default="float32")
    p.add_argument("--log-every", type=int, default=50)
    if prrn:
        p.add_argument("--prior-mode", default="truth", help="truth, zero or rpen:<checkpoint>")
        p.add_argument("--grid", type=int, default=7)
        p.add_argument("--base-channels", type=int, default=harness.DESK_PRRN.base_channels)
        p.add_argument("--fwa-scale", action="store_true", help="also modulate features multiplicatively")
        p.add_argument("--norm-groups", type=int, default=harness.DESK_PRRN.norm_groups)
    else:
        p.add_argument("--val-manifest", help="validation set (defaults to the training set)")
        p.add_argument("--stem-channels", type=int, default=harness.DESK_RPEN.stem_channels)
        p.add_argument("--norm-groups", type=int, default=harness.DESK_RPEN.norm_groups)


def build_parser():
    parser = _Parser(prog="refprior", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="build a synthetic I/T/R dataset with prior maps")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--t-dir", help="directory of transmission PPMs")
    p.add_argument("--r-dir", help="directory of reflection PPMs")
    p.add_argument("--procedural", type=int, metavar="N",
                   help="generate N procedural T and R sources instead of reading directories")
    p.add_argument("--size", type=int, default=56)
    p.add_argument("--grids", type=int, nargs="+", default=list(DEFAULT_GRIDS))
    defaults = DegradationSchedule()
    p.add_argument("--blur-sigma", nargs=2, metavar=("MIN", "MAX"), default=defaults.blur_sigma)
    p.add_argument("--ghost-prob", type=float, default=defaults.ghost_prob)
    p.add_argument("--ghost-max-shift", type=int, default=defaults.ghost_max_shift)
    p.add_argument("--ghost-alpha", nargs=2, metavar=("MIN", "MAX"), default=defaults.ghost_alpha)
    p.add_argument("--attenuation", nargs=2, metavar=("MIN", "MAX"), default=defaults.attenuation)

    p = sub.add_parser("prior", help="prior map of a T/R pair")
    p.add_argument("--t", required=True, dest="t_path")
    p.add_argument("--r", required=True, dest="r_path")
    p.add_argument("--grid", type=int, default=7)
    p.add_argument("--json", help="write the map as a JSON array (default: stdout)")
    p.add_argument("--heatmap", help="write a PGM heatmap at image resolution")

    _add_train_flags(sub.add_parser("train-rpen", help="train the prior regression network"), prrn=False)
    _add_train_flags(sub.add_parser("train-prrn", help="train the restoration network"), prrn=True)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prrn", help="PRRN checkpoint (omit to score I itself against T)")
    p.add_argument("--prior-source", default="truth", help="truth, zero or rpen:<checkpoint>")
    p.add_argument("--out-csv")

    p = sub.add_parser("ablate-grid", help="one truth-prior PRRN per patch grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--grids", type=int, nargs="+", default=[1, 7, 14])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dtype", choices=sorted(harness.DTYPES), default="float32")
    p.add_argument("--base-channels", type=int, default=harness.DESK_PRRN.base_channels)
    p.add_argument("--norm-groups", type=int, default=harness.DESK_PRRN.norm_groups)

    p = sub.add_parser("infer", help="restore one image with trained RPEN + PRRN")
    p.add_argument("--image", required=True)
    p.add_argument("--prrn", required=True)
    p.add_argument("--rpen", required=True)
    p.add_argument("--out", required=True, help="restored PPM")
    p.add_argument("--heatmap", help="predicted prior heatmap PGM")

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--case", action="append", help="restrict to named cases (repeatable)")
    return parser


# ----------------------------------------------------------------- commands
def _cmd_synth(args):
    if args.procedural is None and not (args.t_dir and args.r_dir):
        raise ConfigError("synth needs --t-dir and --r-dir, or --procedural N")
    schedule = DegradationSchedule(
        blur_sigma=_range(args.blur_sigma),
        ghost_prob=args.ghost_prob,
        ghost_max_shift=args.ghost_max_shift,
        ghost_alpha=_range(args.ghost_alpha),
        attenuation=_range(args.attenuation),
    )
    out = Path(args.out)
    t_dir, r_dir = args.t_dir, args.r_dir
    if args.procedural is not None:
        t_dir, r_dir = out / "sources" / "T", out / "sources" / "R"
        generate_sources(t_dir, args.procedural, args.size, args.seed, "T")
        generate_sources(r_dir, args.procedural, args.size, args.seed, "R")
    manifest = build_dataset(t_dir, r_dir, schedule, out, args.grids, args.size, args.seed)
    print(f"wrote {len(manifest)} records to {out}")


def _cmd_prior(args):
    t = imageio.load_image(args.t_path)
    r = imageio.load_image(args.r_path)
    p = prior_map(t, r, args.grid)
    text = json.dumps(p.tolist())
    if args.json:
        Path(args.json).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    if args.heatmap:
        imageio.save_gray_bytes(heatmap_bytes(p, t.shape[0], t.shape[1]), args.heatmap)


def _train_config(args, **extra):
    return harness.TrainConfig(
        seed=args.seed, steps=args.steps, batch_size=args.batch_size, lr=args.lr,
        beta1=args.beta1, beta2=args.beta2, eps=args.eps, dtype=args.dtype,
        log_every=args.log_every, **extra,
    )


def _cmd_train_rpen(args):
    config = _train_config(args)
    model_config = replace(harness.DESK_RPEN, stem_channels=args.stem_channels, norm_groups=args.norm_groups)
    result = harness.train_rpen(args.manifest, config, args.out, model_config, args.val_manifest)
    print(json.dumps({"initial_val": result["initial_val"], "final_val": result["final_val"]}, sort_keys=True))


def _cmd_train_prrn(args):
    config = _train_config(args, prior_mode=args.prior_mode, grid=args.grid)
    model_config = replace(
        harness.DESK_PRRN, base_channels=args.base_channels, norm_groups=args.norm_groups, fwa_scale=args.fwa_scale
    )
    result = harness.train_prrn(args.manifest, config, args.out, model_config)
    print(json.dumps({k: result[k] for k in ("initial_train_psnr", "final_train_psnr")}, sort_keys=True))


def _cmd_eval(args):
    report = harness.evaluate(args.manifest, args.prrn, args.prior_source, args.out_csv)
    print(report.table())


def _cmd_ablate(args):
    config = harness.TrainConfig(seed=args.seed, steps=args.steps, batch_size=args.batch_size, lr=args.lr, dtype=args.dtype)
    model_config = replace(harness.DESK_PRRN, base_channels=args.base_channels, norm_groups=args.norm_groups)
    rows = harness.ablate_grid(args.manifest, args.grids, config, args.val_manifest, args.out, model_config)
    print(f"{'grid':>6} {'PSNR(dB)':>9} {'SSIM':>7}")
    for r in rows:
        print(f"{r['grid']:>4}x{r['grid']:<2}{r['psnr_db']:>8.3f} {r['ssim']:>7.4f}")


def _cmd_infer(args):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        _, prior = harness.infer(args.image, args.prrn, args.rpen, args.out, args.heatmap)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"wrote {args.out}; mean predicted prior {prior.mean():.4f}")


def _cmd_gradcheck(args):
    from .gradsuite import TOLERANCE, run_suite

    failed = False
    for r in run_suite(args.case, args.trials, args.seed):
        status = "PASS" if r.passed else "FAIL"
        failed |= not r.passed
        print(f"{status} {r.name:<18} trials={r.trials} max_rel_err={r.max_rel_error:.3e} ({r.seconds:.1f}s)")
    print(f"tolerance {TOLERANCE:g}")
    return 3 if failed else 0


COMMANDS = {
    "synth": _cmd_synth,
    "prior": _cmd_prior,
    "train-rpen": _cmd_train_rpen,
    "train-prrn": _cmd_train_prrn,
    "eval": _cmd_eval,
    "ablate-grid": _cmd_ablate,
    "infer": _cmd_infer,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "gradcheck" and args.case:
        from .gradsuite import CASES

        unknown = sorted(set(args.case) - set(CASES))
        if unknown:
            print(f"refprior: error: unknown gradcheck cases {unknown}", file=sys.stderr)
            return 1
    try:
        return COMMANDS[args.command](args) or 0
    except RefPriorError as exc:
        print(f"refprior: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"refprior: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
