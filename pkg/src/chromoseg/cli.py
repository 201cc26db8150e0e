"""Command-line pipeline: gen, clean, split, train, eval, baseline, hist, render.

Every stage reads and writes files, takes its randomness from ``--seed`` and
writes a JSON run manifest next to its output.  Exit codes: 0 success, 1 bad
flags or config, 2 missing or unreadable input, 3 numerical divergence.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines as bl
from . import datagen as dg
from . import evaluation as ev
from . import network as nw
from . import preprocess as pp
from .dataset import read_dataset, write_dataset
from .errors import ConfigError, FormatError, NumericalDivergenceError, StructuralError

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data):
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def file_digest(path):
    return f"{fnv1a64(Path(path).read_bytes()):016x}"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---- flag value types -------------------------------------------------------

def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits: {text}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer: {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative: {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text}")
    return v


def _size(text):
    """'88x88' or '88,88' -> (88, 88)."""
    parts = text.replace("x", ",").split(",")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HEIGHTxWIDTH, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"sizes must be positive: {text}")
    return h, w


def _fractions(text):
    try:
        vals = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers: {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three fractions, got {len(vals)}")
    return vals


def _class_weights(text):
    if text in ("auto", "none"):
        return text
    try:
        vals = [float(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected auto, none or four numbers: {text!r}") from None
    if len(vals) != 4 or min(vals) <= 0:
        raise argparse.ArgumentTypeError("class weights need four positive numbers")
    return vals


def _indices(text):
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated indices: {text!r}") from None


# ---- parser -----------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_u64, default=0, help="global seed (default 0)")
    common.add_argument("--out", required=True, help="output file (directory for render)")
    common.add_argument("--threads", type=_positive_int, default=1,
                        help="worker threads for generation (default 1)")
    common.add_argument("--config", help="plain 'key = value' file; flags win on conflict")

    parser = _Parser(prog="chromoseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"chromoseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic overlap dataset")
    p.add_argument("--n", type=_nonneg_int, default=dg.GenConfig.n_samples, help="number of samples")
    p.add_argument("--canvas", type=_size, default=dg.GenConfig.canvas, help="HEIGHTxWIDTH")
    p.add_argument("--max-translation", type=_nonneg_int, default=dg.GenConfig.max_translation)
    p.add_argument("--min-overlap", type=_positive_int, default=dg.GenConfig.min_overlap)
    p.add_argument("--n-sources", type=_positive_int, default=dg.GenConfig.n_sources,
                   help="procedural chromosomes when --sources is not given")
    p.add_argument("--sources", help="directory of <id>_gray.pgm / <id>_mask.pgm pairs")

    p = sub.add_parser("clean", parents=[common], help="fix labels, remove artifacts, crop")
    p.add_argument("--in", dest="input", required=True, help="input dataset")
    p.add_argument("--crop", type=_size, default=pp.CROP, help="HEIGHTxWIDTH (default 88x88)")

    p = sub.add_parser("split", parents=[common], help="shuffle into train/val/test files")
    p.add_argument("--in", dest="input", required=True, help="input dataset")
    p.add_argument("--fractions", type=_fractions, default=(0.64, 0.16, 0.20),
                   help="train,val,test (default 0.64,0.16,0.20)")

    p = sub.add_parser("train", parents=[common], help="train the segmentation network")
    p.add_argument("--train", required=True, help="training dataset")
    p.add_argument("--val", required=True, help="validation dataset")
    p.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    p.add_argument("--epochs", type=_nonneg_int, default=nw.TrainConfig.epochs)
    p.add_argument("--batch-size", type=_positive_int, default=nw.TrainConfig.batch_size)
    p.add_argument("--lr", type=_positive_float, default=nw.TrainConfig.learning_rate)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=nw.TrainConfig.optimizer)
    p.add_argument("--class-weights", type=_class_weights, default="auto",
                   help="auto, none, or four comma-separated numbers")
    p.add_argument("--depth", type=_positive_int, default=nw.NetConfig.depth)
    p.add_argument("--base-filters", type=_positive_int, default=nw.NetConfig.base_filters)
    p.add_argument("--save-optimizer", action="store_true",
                   help="store Adam moments in the checkpoint")
    p.add_argument("--quiet", action="store_true", help="no per-epoch log lines")

    p = sub.add_parser("eval", parents=[common], help="IOU report for a model or prediction file")
    p.add_argument("--data", required=True, help="dataset with ground truth labels")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="trained model")
    src.add_argument("--pred", help="dataset whose labels are the predictions")
    p.add_argument("--merged", action="store_true", help="merge classes 1 and 2 before scoring")

    p = sub.add_parser("baseline", parents=[common], help="threshold or contour-geometry baseline")
    p.add_argument("--method", choices=("threshold", "geometric"), required=True)
    p.add_argument("--train", required=True, help="dataset used to fit the thresholds")
    p.add_argument("--data", required=True, help="dataset to score")
    p.add_argument("--epsilon", type=float, default=2.0, help="polygon approximation tolerance")
    p.add_argument("--margin", type=float, default=10.0, help="reflex angle margin in degrees")

    p = sub.add_parser("hist", parents=[common], help="intensity histograms as CSV")
    p.add_argument("--data", required=True, help="dataset")

    p = sub.add_parser("render", parents=[common], help="PPM overlays of input, truth, prediction")
    p.add_argument("--data", required=True, help="dataset")
    p.add_argument("--checkpoint", help="model for the prediction panel")
    p.add_argument("--indices", type=_indices, help="comma-separated sample indices")
    p.add_argument("--count", type=_nonneg_int, default=4,
                   help="number of samples when --indices is absent (default 4)")
    return parser


# ---- config file ------------------------------------------------------------

def read_config(path):
    """Parse 'key = value' lines; '#' starts a comment.  Keys may use - or _."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _subparsers(parser):
    return next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subs = _subparsers(parser)
    command = next((a for a in argv if a in subs), None)
    if known.config is None or command is None:
        return parser.parse_args(argv)
    sub = subs[command]
    try:
        values = read_config(known.config)
    except ConfigError as exc:
        sub.error(str(exc))
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            sub.error(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = value
        action.required = False
    # config values become defaults, so flags on the command line win;
    # argparse applies each option's type to string defaults
    sub.set_defaults(**defaults)
    for group in sub._mutually_exclusive_groups:
        if any(a.dest in defaults for a in group._group_actions):
            group.required = False
    return parser.parse_args(argv)


# ---- manifest ---------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def write_manifest(path, argv, args, inputs, outputs, seeds):
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items())
              if k not in ("command",)}
    manifest = {
        "tool": "chromoseg",
        "version": __version__,
        "command": args.command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(p): file_digest(p) for p in outputs},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def manifest_path(out):
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# ---- commands ---------------------------------------------------------------

def _load(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    return read_dataset(path)


def cmd_gen(args):
    cfg = dg.GenConfig(n_samples=args.n, canvas=args.canvas, max_translation=args.max_translation,
                       min_overlap=args.min_overlap, seed=args.seed, n_sources=args.n_sources,
                       source_dir=args.sources)
    if args.sources is not None and not Path(args.sources).is_dir():
        raise FileNotFoundError(f"source directory not found: {args.sources}")
    ds = dg.generate_dataset(cfg, threads=args.threads)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples of {ds.shape[0]}x{ds.shape[1]} to {args.out}")
    return [], [args.out], {"global": args.seed}


def cmd_clean(args):
    ds = pp.clean_dataset(_load(args.input), args.crop)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} cleaned samples to {args.out}")
    return [args.input], [args.out], {}


def _split_paths(out):
    out = Path(out)
    stem = out.name[:-len(".chrseg")] if out.name.endswith(".chrseg") else out.name
    return [out.with_name(f"{stem}_{part}.chrseg") for part in ("train", "val", "test")]


def cmd_split(args):
    ds = _load(args.input)
    spec = pp.SplitSpec(*args.fractions, seed=args.seed)
    paths = _split_paths(args.out)
    for part, path in zip(pp.split(ds, spec), paths):
        write_dataset(part, path)
        print(f"wrote {len(part)} samples to {path}")
    return [args.input], paths, {"split": args.seed}


def cmd_train(args):
    train_set, val_set = _load(args.train), _load(args.val)
    cw = args.class_weights
    if isinstance(cw, str):
        cw = {"auto": "auto", "none": None}[cw]
    net = nw.NetConfig(depth=args.depth, base_filters=args.base_filters, input_size=train_set.shape)
    tcfg = nw.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                          optimizer=args.optimizer, class_weights=cw, seed=args.seed)

    def log(rec):
        if args.quiet:
            return
        ious = " ".join("  n/a" if v is None else f"{v:.3f}" for v in rec["val_iou"])
        print(f"epoch {rec['epoch']:3d} train {rec['train_loss']:.4f} "
              f"val {rec['val_loss']:.4f} iou {ious}", flush=True)

    params = nw.init_params(net, args.seed)
    best, history = nw.train(params, train_set, val_set, tcfg, log=log)
    state = best.optimizer_state if args.save_optimizer else None
    nw.save_checkpoint(best, args.out, optimizer_state=state)
    hist_path = args.history or f"{args.out}.history.csv"
    Path(hist_path).write_text(nw.history_csv(history))
    print(f"wrote checkpoint {args.out} and history {hist_path}")
    return [args.train, args.val], [args.out, hist_path], {"init": args.seed, "shuffle": args.seed}


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return nw.load_checkpoint(path)[0]


def _write_report(report, out):
    Path(out).write_text(report.to_json())
    print(report.to_text(), end="")


def cmd_eval(args):
    ds = _load(args.data)
    if args.checkpoint:
        pred = nw.predict(_load_checkpoint(args.checkpoint), ds.images)
        src = args.checkpoint
    else:
        other = _load(args.pred)
        if other.shape != ds.shape or len(other) != len(ds):
            raise StructuralError("prediction file does not match the dataset's shape")
        pred, src = other.labels, args.pred
    truth = ds.labels
    if args.merged:
        pred, truth = ev.merge_chromosomes(pred), ev.merge_chromosomes(truth)
    _write_report(ev.evaluate(pred, truth), args.out)
    return [args.data, src], [args.out], {}


def cmd_baseline(args):
    train_set, ds = _load(args.train), _load(args.data)
    model = bl.fit_threshold(train_set.images, train_set.labels)
    if args.method == "threshold":
        report = bl.threshold_report(model, ds.images, ds.labels)
    else:
        report = bl.geometric_report(model, ds.images, ds.labels, args.epsilon, args.margin)
    a, b = model.levels
    print(f"thresholds: t_low={a} t_high={b} (byte levels)")
    _write_report(report, args.out)
    return [args.train, args.data], [args.out], {}


def cmd_hist(args):
    ds = _load(args.data)
    hist = ev.intensity_histogram(ds)
    Path(args.out).write_text(ev.histogram_csv(hist))
    frac = ev.overlap_mass_in_single_support(hist)
    print(f"overlap mass inside single-chromosome support: {frac:.4f}")
    return [args.data], [args.out], {}


def cmd_render(args):
    ds = _load(args.data)
    params = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    idx = args.indices if args.indices is not None else list(range(min(args.count, len(ds))))
    for i in idx:
        if not 0 <= i < len(ds):
            raise ConfigError(f"sample index {i} out of range for {len(ds)} samples")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in idx:
        image, label = ds.images[i], ds.labels[i]
        panels = {"input": np.zeros_like(label), "truth": label}
        if params is not None:
            panels["pred"] = nw.predict(params, image[None])[0]
        for name, lab in panels.items():
            path = out / f"{i:05d}_{name}.ppm"
            ev.render_overlay(image, lab, path)
            written.append(path)
    print(f"wrote {len(written)} overlays to {out}")
    inputs = [args.data] + ([args.checkpoint] if args.checkpoint else [])
    return inputs, written, {}


COMMANDS = {"gen": cmd_gen, "clean": cmd_clean, "split": cmd_split, "train": cmd_train,
            "eval": cmd_eval, "baseline": cmd_baseline, "hist": cmd_hist, "render": cmd_render}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"chromoseg: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        inputs, outputs, seeds = COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"chromoseg: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FormatError as exc:
        print(f"chromoseg: unreadable input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalDivergenceError as exc:
        print(f"chromoseg: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, StructuralError) as exc:
        _subparsers(build_parser())[args.command].print_usage(sys.stderr)
        print(f"chromoseg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    write_manifest(manifest_path(args.out), argv, args, inputs, outputs, seeds)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
