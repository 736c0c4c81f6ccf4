"""Command-line entry point: ``facemorph <command> [options]``.

Every command writes the exact arguments it ran with to
``<out-dir>/run_config.json``; passing that file back through ``--config``
reproduces the run.
"""

import argparse
import contextlib
import csv
import json
import logging
import os
import sys

import torch

from facemorph import seeding
from facemorph.data import DatasetIndex, ImageStore, generate_synthetic_faces, index_dataset, load_image, save_image
from facemorph.encoder import (
    EncoderTrainConfig,
    cosine_distance,
    encode,
    load_encoder,
    save_encoder,
    train_desk_encoder,
)
from facemorph.errors import ConfigError, DataError, DomainError, NumericAbort
from facemorph.mixing import check_alpha
from facemorph.morphnet import generate_morph, load_generator
from facemorph import protocol as P
from facemorph.trainer import TrainConfig, run_training

log = logging.getLogger("facemorph")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RUN_CONFIG = "run_config.json"


@contextlib.contextmanager
def run_lock(out_dir):
    """Exclusive ownership of a run directory for the duration of a command."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"run directory {out_dir} is locked by another command ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(path)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save_run_config(args):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}
    _write_json(os.path.join(args.out_dir, RUN_CONFIG), cfg)
    return cfg


def _parse_overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_index(path):
    if not os.path.exists(path):
        raise DataError(f"index file {path} does not exist")
    return DatasetIndex.read_csv(path)


# -- commands --------------------------------------------------------------


def cmd_index(args):
    idx = index_dataset(args.root)
    out = os.path.join(args.out_dir, "index.csv")
    idx.write_csv(out)
    with open(os.path.join(args.out_dir, "index_warnings.txt"), "w") as fh:
        fh.writelines(w + "\n" for w in idx.warnings)
    print(f"indexed {len(idx)} images of {len(idx.identities)} identities -> {out}")
    for w in idx.warnings:
        print(f"warning: {w}", file=sys.stderr)


def cmd_synth(args):
    images = os.path.join(args.out_dir, "images")
    idx = generate_synthetic_faces(images, args.n_identities, args.images_per_identity, args.seed)
    idx.write_csv(os.path.join(args.out_dir, "index.csv"))
    print(f"wrote {len(idx)} images of {len(idx.identities)} identities under {images}")


def cmd_train_encoder(args):
    idx = _load_index(args.index)
    cfg = EncoderTrainConfig(**_parse_overrides(args.set))
    enc, report = train_desk_encoder(idx, cfg, seed=args.seed)
    save_encoder(enc, os.path.join(args.out_dir, "encoder.pt"), extra={"seed": args.seed})
    _write_json(os.path.join(args.out_dir, "encoder_report.json"), report)
    print(f"held-out accuracy {report['heldout_accuracy']} (chance {report['chance']:.3f})")


def _train_config(args):
    fields = _parse_overrides(args.set)
    fields["seed"] = args.seed
    return TrainConfig.desk(**fields) if args.desk_scale else TrainConfig(**fields)


def cmd_train(args):
    idx = _load_index(args.index)
    enc = load_encoder(args.encoder)
    cfg = _train_config(args)
    res = run_training(cfg, idx, enc, args.out_dir)
    print(f"trained {res.summary['steps']} steps; epoch mean losses {res.summary['epoch_mean_total']}")
    print(f"generator -> {res.generator_path}")


def cmd_morph(args):
    check_alpha(args.alpha)
    gen = load_generator(args.generator)
    enc = load_encoder(args.encoder)
    x1, x2 = load_image(args.image1), load_image(args.image2)
    with torch.no_grad():
        f1, f2 = encode(enc, x1), encode(enc, x2)
        xm = generate_morph(gen, f1, f2, args.alpha)
        fm = encode(enc, xm)
        d1 = float(cosine_distance(fm.f, f1.f)[0])
        d2 = float(cosine_distance(fm.f, f2.f)[0])
    save_image(xm[0], args.output)
    _write_json(os.path.join(args.out_dir, "morph.json"), {"alpha": args.alpha, "d1": d1, "d2": d2,
                                                           "output": args.output})
    print(f"d_cos(morph, image1) = {d1:.6f}")
    print(f"d_cos(morph, image2) = {d2:.6f}")


def cmd_build_protocol(args):
    idx = _load_index(args.index)
    s_trip, s_quint = seeding.spawn(args.seed, 2)
    if args.triplets:
        triplets = P.read_protocol(args.triplets)
        if triplets and isinstance(triplets[0], P.Quintuple):
            raise ConfigError(f"{args.triplets} already holds quintuples")
    else:
        triplets = P.make_triplets(idx, args.n_genuine, args.n_imposter, seeding.child_int(s_trip))
        P.write_protocol(os.path.join(args.out_dir, "triplets.csv"), triplets)
    stats = {}
    quints = P.build_quintuples(triplets, idx, seeding.child_int(s_quint), stats)
    out = os.path.join(args.out_dir, "protocol.csv")
    P.write_protocol(out, quints)
    _write_json(os.path.join(args.out_dir, "protocol_stats.json"),
                {"n_pairs": len(quints), "n_same": sum(q.y for q in quints),
                 "n_diff": sum(1 - q.y for q in quints), **stats})
    print(f"{len(quints)} quintuples -> {out} ({stats})")


def _eval_inputs(args):
    idx = _load_index(args.index)
    gen = load_generator(args.generator)
    enc_gen = load_encoder(args.encoder)
    enc_test = load_encoder(args.test_encoder) if args.test_encoder else enc_gen
    quints = P.read_protocol(args.protocol)
    if quints and not isinstance(quints[0], P.Quintuple):
        raise ConfigError("evaluation needs a quintuple protocol; run build-protocol first")
    cache = P.DistanceCache(os.path.join(args.out_dir, "cache")) if args.cache else None
    return idx, gen, enc_gen, enc_test, quints, cache


def cmd_evaluate(args):
    check_alpha(args.alpha)
    idx, gen, enc_gen, enc_test, quints, cache = _eval_inputs(args)
    rep = P.evaluate(gen, enc_gen, enc_test, quints, args.alpha, ImageStore(idx), mode=args.mode,
                     threshold_mode=args.threshold_mode, far=args.far, cache=cache)
    rep.write(os.path.join(args.out_dir, "evaluation.json"), os.path.join(args.out_dir, "distances.csv"))
    table = rep.metrics()["table"]
    print(f"Acc_morph same {table['acc_morph_same']}%  diff {table['acc_morph_diff']}%  "
          f"(side1 {table['acc_side1_diff']}%, side2 {table['acc_side2_diff']}%)")


def cmd_sweep_alpha(args):
    alphas = [float(a) for a in args.alphas.split(",")]
    idx, gen, enc_gen, enc_test, quints, cache = _eval_inputs(args)
    rows = P.sweep_alpha(gen, enc_gen, enc_test, quints, alphas, ImageStore(idx), mode=args.mode,
                         threshold_mode=args.threshold_mode, far=args.far, cache=cache)
    P.write_sweep(os.path.join(args.out_dir, "alpha_sweep.csv"), rows)
    for r in rows:
        print(f"alpha {r['alpha']:.2f}: acc_morph {r['acc_morph']:.1f}  side1 {r['acc_side1']:.1f}  "
              f"side2 {r['acc_side2']:.1f}")


def build_report(run_dir):
    """Consolidate evaluation artifacts of ``run_dir`` into ``run_dir/report``."""
    eval_json = os.path.join(run_dir, "evaluation.json")
    dist_csv = os.path.join(run_dir, "distances.csv")
    for path in (eval_json, dist_csv):
        if not os.path.exists(path):
            raise DataError(f"missing evaluation artifact {path}; run `evaluate` first")
    with open(eval_json) as fh:
        metrics = json.load(fh)
    rows = P.read_distances(dist_csv)
    out = os.path.join(run_dir, "report")
    os.makedirs(out, exist_ok=True)

    with open(os.path.join(out, "scatter.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("row", "fold", "y", "d1", "d2", "threshold"))
        for r in rows:
            w.writerow((r["row"], r["fold"], r["y"], repr(r["d1"]), repr(r["d2"]), repr(r["threshold"])))
    lines = {"max_accuracy": metrics["global_thresholds"]["max_accuracy"],
             "far": metrics["global_thresholds"]["far"], "far_rate": metrics["far"],
             "per_fold": metrics["thresholds"]}
    _write_json(os.path.join(out, "thresholds.json"), lines)

    sweep_src = os.path.join(run_dir, "alpha_sweep.csv")
    has_sweep = os.path.exists(sweep_src)
    if has_sweep:
        with open(sweep_src) as src, open(os.path.join(out, "alpha_sweep.csv"), "w") as dst:
            dst.write(src.read())
    both_below = sum(1 for r in rows if r["y"] == 0 and r["d1"] < r["threshold"] and r["d2"] < r["threshold"])
    summary = {"metrics": metrics, "n_rows": len(rows), "quadrant_both_below_diff": both_below,
               "has_alpha_sweep": has_sweep}
    _write_json(os.path.join(out, "metrics.json"), summary)
    return summary


def cmd_report(args):
    summary = build_report(args.run_dir)
    m = summary["metrics"]["table"]
    print(f"report for {args.run_dir}: Acc_morph diff {m['acc_morph_diff']}%, same {m['acc_morph_same']}%")


# -- parser ----------------------------------------------------------------


def _common(sub_defaults):
    p = argparse.ArgumentParser(add_help=False)
    d = argparse.SUPPRESS if sub_defaults else None
    p.add_argument("--config", default=d, help="JSON file with argument defaults")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS if sub_defaults else 0)
    p.add_argument("--out-dir", default=argparse.SUPPRESS if sub_defaults else ".")
    p.add_argument("--desk-scale", action="store_true", default=argparse.SUPPRESS if sub_defaults else False)
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if sub_defaults else False)
    return p


def _eval_args(p):
    p.add_argument("--generator", required=True)
    p.add_argument("--encoder", required=True, help="encoder used to generate morphs")
    p.add_argument("--test-encoder", default=None, help="encoder under attack (default: --encoder)")
    p.add_argument("--index", required=True)
    p.add_argument("--protocol", required=True)
    p.add_argument("--mode", choices=("quintuple", "triplet"), default="quintuple")
    p.add_argument("--threshold-mode", choices=("max_accuracy", "far"), default="max_accuracy")
    p.add_argument("--far", type=float, default=P.DEFAULT_FAR)
    p.add_argument("--cache", action="store_true", help="cache morph distances under <out-dir>/cache")


def build_parser():
    parser = argparse.ArgumentParser(prog="facemorph", description=__doc__.splitlines()[0],
                                     parents=[_common(False)])
    common = _common(True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", parents=[common], help="index a directory-per-identity dataset")
    p.add_argument("root")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("synth", parents=[common], help="generate procedural desk-scale faces")
    p.add_argument("--n-identities", type=int, default=8)
    p.add_argument("--images-per-identity", type=int, default=20)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-encoder", parents=[common], help="train the desk-scale face encoder")
    p.add_argument("--index", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override an encoder training field")
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("train", parents=[common], help="train the morphing generator")
    p.add_argument("--index", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a training config field")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("morph", parents=[common], help="morph two aligned face images")
    p.add_argument("--generator", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--image1", required=True)
    p.add_argument("--image2", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_morph)

    p = sub.add_parser("build-protocol", parents=[common], help="extend triplets to quintuples")
    p.add_argument("--index", required=True)
    p.add_argument("--triplets", default=None, help="existing triplet CSV (default: sample new pairs)")
    p.add_argument("--n-genuine", type=int, default=100)
    p.add_argument("--n-imposter", type=int, default=100)
    p.set_defaults(func=cmd_build_protocol)

    p = sub.add_parser("evaluate", parents=[common], help="Acc_morph of a generator against an encoder")
    _eval_args(p)
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-alpha", parents=[common], help="Acc_morph over a grid of alphas")
    _eval_args(p)
    p.add_argument("--alphas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("report", parents=[common], help="consolidate evaluation artifacts for plotting")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def _apply_defaults(parser, defaults):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            continue
        if action.dest in defaults:
            action.default = defaults[action.dest]
            action.required = False
            if not action.option_strings:
                action.nargs = "?"


def parse_args(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    if known.config:
        try:
            with open(known.config) as fh:
                defaults = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {known.config}: {exc}") from exc
        if not isinstance(defaults, dict):
            raise ConfigError(f"config {known.config} must hold a JSON object")
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        command = defaults.get("command")
        if command is not None:
            if command not in subparsers.choices:
                raise ConfigError(f"config names unknown command {command!r}")
            if not any(a in subparsers.choices for a in argv):
                argv = [command] + argv
            # command-line flags still win over the config file
            _apply_defaults(parser, defaults)
            _apply_defaults(subparsers.choices[command], defaults)
    args = parser.parse_args(argv)
    if args.command == "report" and args.out_dir == ".":
        args.out_dir = args.run_dir
    return args


def main(argv=None):
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with run_lock(args.out_dir):
            _save_run_config(args)
            args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
