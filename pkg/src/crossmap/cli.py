"""Command-line entry point: ``crossmap <subcommand> [flags]``.

Every subcommand builds an :class:`ExperimentConfig` from a preset (desk
scale unless ``--full-scale``), then an optional JSON ``--config`` file, then
explicit flags, and uses the sections it needs.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import cvae as cv
from . import decoder as dec
from . import harness
from .dataio import generate_synthetic_pair, read_trials, write_trials
from .errors import (
    CacheError,
    ConditioningError,
    ConfigError,
    DegenerateClassError,
    DeterminismError,
    ExperimentAborted,
    FormatError,
    NumericError,
    RangeError,
    ShapeError,
    SizeError,
    StateError,
)
from .pinsker import extract_features, read_features, write_features

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--config", help="JSON file mirroring ExperimentConfig")
    p.add_argument("--full-scale", action="store_true", help="N=32, T=650, R=100 preset")
    p.add_argument("--seed", type=int, help="master seed (also seeds synthesis and training)")


def _add_pinsker(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--l-coeffs", type=int, dest="L", help="complex Fourier coefficients kept")
    g.add_argument("--mu", type=float, help="shrinkage threshold (L is derived)")
    p.add_argument("--alpha", type=float, help="ellipsoid smoothness exponent")


def build_parser():
    parser = _Parser(prog="crossmap", description="Cross-subject decoding with a CVAE feature map.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic (source, destination) trial pair")
    _add_common(p)
    p.add_argument("--warp-gain", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--n-trials", type=int, help="trials per subject")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("features", help="trial file -> Pinsker feature file")
    _add_common(p)
    _add_pinsker(p)
    p.add_argument("--trials", required=True, help="input trial file")
    p.add_argument("--out", required=True, help="output feature file")

    p = sub.add_parser("train-cvae", help="train the mapping on two feature files")
    _add_common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--dest", required=True)
    p.add_argument("--mode", choices=["classmean", "random"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")

    p = sub.add_parser("train-decoder", help="train a decoder on a feature file")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--decoder", choices=["mlp", "lda"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")

    p = sub.add_parser("map", help="map source features into destination space")
    _add_common(p)
    p.add_argument("--model", required=True, help="CVAE checkpoint")
    p.add_argument("--features", required=True)
    p.add_argument("--map", dest="map_mode", help="det or gen:S")
    p.add_argument("--out", required=True, help="output feature file")

    p = sub.add_parser("eval", help="accuracy of a decoder on a feature file")
    p.add_argument("--decoder", required=True, help="decoder checkpoint")
    p.add_argument("--features", required=True)

    p = sub.add_parser("experiment", help="repeated-split end-to-end experiment")
    _add_common(p)
    _add_pinsker(p)
    p.add_argument("--reps", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--mode", choices=["classmean", "random"])
    p.add_argument("--map", dest="map_mode", help="det or gen:S")
    p.add_argument("--decoder", choices=["mlp", "lda"])
    p.add_argument("--epochs", type=int, help="CVAE epochs")
    p.add_argument("--no-mapping", action="store_true", help="skip the CVAE conditions")
    p.add_argument("--affine", action="store_true", help="add the class-mean affine baseline")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=["csv", "json"], default="csv")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _merge(base, update):
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(args) -> harness.ExperimentConfig:
    preset = harness.ExperimentConfig.full_scale() if args.full_scale else harness.ExperimentConfig.desk()
    d = preset.to_dict()
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        d = _merge(d, doc)
    flags = vars(args)

    def put(path, value):
        if value is None:
            return
        node = d
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value

    seed = flags.get("seed")
    for path in (("seed",), ("synth", "seed"), ("cvae", "seed"), ("decoder_config", "seed")):
        put(path, seed)
    if flags.get("L") is not None:
        d["L"], d["mu"] = flags["L"], None
    if flags.get("mu") is not None:
        d["L"], d["mu"] = None, flags["mu"]
    put(("alpha",), flags.get("alpha"))
    for flag, key in (("reps", "reps"), ("n_train", "n_train"), ("n_test", "n_test"),
                      ("map_mode", "map_mode")):
        put((key,), flags.get(flag))
    put(("cvae", "mode"), flags.get("mode"))
    put(("cvae", "latent_dim"), flags.get("latent_dim"))
    put(("synth", "transfer_warp_gain"), flags.get("warp_gain"))
    put(("synth", "noise_sigma"), flags.get("noise"))
    put(("synth", "n_trials_per_subject"), flags.get("n_trials"))
    if args.command in ("experiment", "train-decoder"):
        put(("decoder",), flags.get("decoder"))
    if args.command == "train-decoder":
        put(("decoder_config", "epochs"), flags.get("epochs"))
    else:
        put(("cvae", "epochs"), flags.get("epochs"))
    if flags.get("no_mapping"):
        d["run_mapping"] = False
    if flags.get("affine"):
        d["affine_baseline"] = True
    if args.command == "synth" and d["n_train"] + d["n_test"] > d["synth"]["n_trials_per_subject"]:
        # split sizes are irrelevant when only writing trials
        d["n_train"], d["n_test"] = 1, 1
    return harness.ExperimentConfig.from_dict(d)


def cmd_synth(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    src, dst = generate_synthetic_pair(cfg.synth)
    paths = [os.path.join(args.out, "source.xtrl"), os.path.join(args.out, "destination.xtrl")]
    write_trials(paths[0], src)
    write_trials(paths[1], dst)
    print("\n".join(paths))


def cmd_features(args, cfg):
    fm = extract_features(read_trials(args.trials), cfg.pinsker())
    write_features(args.out, fm)
    print(f"{args.out}: {fm.n_rows} rows, D={fm.dim} (N={fm.n_channels}, L={fm.L})")


def cmd_train_cvae(args, cfg):
    model = cv.train_cvae(read_features(args.source), read_features(args.dest), cfg.cvae)
    cv.save_cvae(args.out, model)
    last = model.history[-1] if model.history else {}
    print(f"{args.out}: {len(model.history)} epochs, final loss {last.get('loss', float('nan')):.4f}")


def cmd_train_decoder(args, cfg):
    fm = read_features(args.features)
    whitener = cv.Whitener.fit(fm.rows)
    white = fm.with_rows(whitener.apply(fm.rows))
    if cfg.decoder == "lda":
        model = dec.train_lda(white, cfg.lda_ridge)
    else:
        model = dec.train_mlp_decoder(white, cfg.decoder_config)
    dec.save_decoder(args.out, model, whitener)
    print(f"{args.out}: {cfg.decoder} decoder, training accuracy {dec.accuracy(model, white):.3f}")


def cmd_map(args, cfg):
    model = cv.load_cvae(args.model)
    fm = read_features(args.features)
    mapped = cv.map_features(model, fm.rows, harness.parse_map_mode(cfg.map_mode), cfg.seed)
    write_features(args.out, fm.with_rows(mapped.raw))
    print(f"{args.out}: {fm.n_rows} rows mapped ({cfg.map_mode})")


def cmd_eval(args):
    model, whitener = dec.load_decoder(args.decoder)
    fm = read_features(args.features)
    rows = fm.rows if whitener is None else whitener.apply(fm.rows)
    print(f"accuracy {100.0 * dec.accuracy(model, fm, rows):.1f}")


def cmd_experiment(args, cfg):
    def progress(r):
        print(f"repetition {r + 1}/{cfg.reps} done", file=sys.stderr)

    report = harness.run_experiment(cfg, progress)
    paths = harness.emit_report(report, args.out, args.format)
    summary, gains = report.summary()
    for c in report.conditions:
        print(f"{c}, {100 * summary[c]['mean']:.1f}, {100 * summary[c]['std']:.1f}")
    for name, value in gains.items():
        print(f"gain_{name}, {'n/a' if value is None else f'{value:.1f}'}")
    if report.failures:
        print(f"{len(report.failures)} repetition(s) failed", file=sys.stderr)
    print("\n".join(paths))


def cmd_gradcheck(args):
    results = harness.gradient_suite(args.seed)
    ok = True
    for name, err in results.items():
        passed = err < GRADCHECK_TOL
        ok &= passed
        print(f"{name}: max relative error {err:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


_DATA_ERRORS = (FormatError, SizeError, DegenerateClassError, ShapeError, RangeError,
                StateError, CacheError, OSError)
_NUMERIC_ERRORS = (NumericError, ConditioningError, DeterminismError, ExperimentAborted,
                   ArithmeticError, np.linalg.LinAlgError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "eval":
            return cmd_eval(args) or EXIT_OK
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = load_config(args)
        handler = {
            "synth": cmd_synth, "features": cmd_features, "train-cvae": cmd_train_cvae,
            "train-decoder": cmd_train_decoder, "map": cmd_map, "experiment": cmd_experiment,
        }[args.command]
        handler(args, cfg)
        return EXIT_OK
    except ConfigError as exc:
        print(f"crossmap: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"crossmap: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"crossmap: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TypeError, ValueError) as exc:
        # malformed config values or checkpoints
        print(f"crossmap: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
