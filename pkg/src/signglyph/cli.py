"""Command-line entry point: ``signglyph {prepare,train,eval,predict,report,synth}``.

Exit status: 0 success, 2 configuration/usage error, 3 missing file or
failed write, 4 unusable data (corrupt image, bad manifest or checkpoint,
malformed CSV), 1 anything unexpected.
"""
import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .datapipe import (
    DEFAULT_BG_THRESHOLD,
    LABEL_SPACES,
    TARGET_SIDE,
    AugmentPolicy,
    ImageCache,
    epoch_seed,
    list_images,
    load_image,
    make_batches,
    pad_and_resize,
    prepare_image,
    prepare_manifest,
    read_manifest,
    save_png,
    write_manifest,
)
from .errors import ConfigError, IOFailure, SignglyphError
from .model import ModelConfig, build_model, load_checkpoint, predict, save_checkpoint
from .training import MetricsWriter, SgdConfig, evaluate, fit, read_metrics

log = logging.getLogger("signglyph")

# Published accuracies (%) of earlier ASL alphabet classifiers, with the
# protocol differences that make them only loosely comparable.
REFERENCE_RESULTS = (
    ("deepCNN (reference, NZ ASL)", 82.5, "letters; background-subtracted inputs; trained from scratch"),
    ("Stanford deepCNN", 72.0, "pre-trained GoogLeNet; no background subtraction"),
    ("RF-JA+C(h-h)", 90.0, "colour glove + depth camera; 50-50 train/validation split"),
    ("RF-JA+C(l-o-o)", 70.0, "colour glove + depth camera; specific data omitted"),
)


def _int_list(text):
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _labels(text):
    if text in LABEL_SPACES:
        return LABEL_SPACES[text]
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    if len(names) < 2:
        raise argparse.ArgumentTypeError(
            f"labels must be one of {sorted(LABEL_SPACES)} or a comma-separated list of >= 2 names"
        )
    return names


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="signglyph", description="From-scratch CNN for static hand-gesture images.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=0, help="run seed for init, shuffling, augmentation, splits")
    p.add_argument("--config", type=Path, help="JSON file of flag defaults (keys are option names)")
    p.add_argument("--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="background-subtract, pad/resize and split a class-per-folder image tree")
    s.add_argument("raw_dir", type=Path)
    s.add_argument("out_dir", type=Path)
    s.add_argument("--background", type=Path, help="reference background frame (same size as the photos)")
    s.add_argument("--threshold", type=int, default=DEFAULT_BG_THRESHOLD)
    s.add_argument("--side", type=int, default=TARGET_SIDE)
    s.add_argument("--labels", type=_labels, help="letters, digits, digits0, letters+digits, or a,b,c")
    s.add_argument("--val-fraction", type=float, default=0.5)

    s = sub.add_parser("train", help="fit a model on a manifest")
    s.add_argument("manifest", type=Path)
    s.add_argument("--out", type=Path, required=True, help="final checkpoint path")
    s.add_argument("--metrics", type=Path, required=True, help="per-epoch metrics CSV")
    s.add_argument("--best", type=Path, help="best-validation checkpoint (default: <out stem>_best<suffix>)")
    s.add_argument("--run-log", type=Path, help="resolved-config JSON (default: <metrics>.run.json)")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.0)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr-decay", type=float, default=1.0)
    s.add_argument("--stop-after", type=int, help="stop after N epochs without validation improvement")
    s.add_argument("--side", type=int, default=TARGET_SIDE)
    s.add_argument("--filters", type=_int_list, default=(32, 64, 128))
    s.add_argument("--dense", type=_int_list, default=(512, 256))
    s.add_argument("--kernel", type=int, default=3)
    s.add_argument("--pool", type=int, default=2)
    s.add_argument("--conv-dropout", type=float, default=0.25)
    s.add_argument("--dense-dropout", type=float, default=0.5)
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--max-rotation", type=float, default=20.0)
    s.add_argument("--max-translate", type=float, default=0.20)
    s.add_argument("--hflip-prob", type=float, default=0.5)
    s.add_argument("--no-train-eval", action="store_true",
                   help="report running training-mode loss/accuracy instead of an extra eval pass")
    s.add_argument("--timing", action="store_true",
                   help="record wall-clock seconds in the metrics CSV (makes it non-reproducible)")
    s.add_argument("--no-cache", action="store_true", help="decode images every epoch instead of once")

    s = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint on a split")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("manifest", type=Path)
    s.add_argument("--split", choices=("train", "val"), default="val")
    s.add_argument("--confusion", type=Path, help="confusion matrix CSV (default: next to the checkpoint)")
    s.add_argument("--batch-size", type=int, default=32)

    s = sub.add_parser("predict", help="classify a single image")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("image", type=Path)
    s.add_argument("--topk", type=int, default=3)
    s.add_argument("--background", type=Path)
    s.add_argument("--threshold", type=int, default=DEFAULT_BG_THRESHOLD)

    s = sub.add_parser("report", help="curve data, figures and a comparison table from metrics CSVs")
    s.add_argument("metrics", type=Path, nargs="+")
    s.add_argument("--out-dir", type=Path, required=True)
    s.add_argument("--label", action="append", help="table name for each run, in order (default: ours)")
    s.add_argument("--format", choices=("png", "svg", "pdf"), default="png")
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--no-reference", action="store_true", help="omit the published comparison rows")

    s = sub.add_parser("synth", help="render a synthetic glyph dataset with a manifest")
    s.add_argument("out_dir", type=Path)
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--train-per-class", type=int, default=50)
    s.add_argument("--val-per-class", type=int, default=20)
    s.add_argument("--side", type=int, default=TARGET_SIDE)
    return p


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        overrides = json.loads(args.config.read_text())
    except FileNotFoundError:
        raise IOFailure(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    if not isinstance(overrides, dict):
        raise ConfigError(f"{args.config}: expected a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions} | {a.dest: a for a in parser._actions}
    norm = {}
    for key, value in overrides.items():
        dest = key.lstrip("-").replace("-", "_")
        action = known.get(dest)
        if action is None or dest in ("help", "command", "config", "version") or not action.option_strings:
            raise ConfigError(f"{args.config}: unknown option {key!r} for '{args.command}'")
        if action.type is not None and not isinstance(value, bool):
            value = action.type(",".join(map(str, value)) if isinstance(value, list) else value)
        norm[dest] = value
    # config values act as defaults; explicit flags on the command line still win
    parser.set_defaults(**{k: v for k, v in norm.items() if k in {a.dest for a in parser._actions}})
    sub.set_defaults(**norm)
    return parser.parse_args(argv)


def _plain(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _resolved(args):
    return {k: _plain(v) for k, v in sorted(vars(args).items())}


# commands -------------------------------------------------------------------

def cmd_prepare(args):
    raw = args.raw_dir
    if not raw.is_dir():
        raise IOFailure(f"raw image directory not found: {raw}")
    background = load_image(args.background) if args.background else None
    classes = args.labels or tuple(sorted(p.name for p in raw.iterdir() if p.is_dir()))
    if not classes:
        raise ConfigError(f"{raw} has no class subdirectories")
    for name in classes:
        src_dir = raw / name
        files = list_images(src_dir) if src_dir.is_dir() else []
        if not files:
            raise ConfigError(f"class {name!r} has no images under {src_dir}")
        written = set()
        for f in files:
            dst = args.out_dir / name / (f.stem + ".png")
            if dst in written:
                raise ConfigError(f"{f}: another image in {src_dir} already maps to {dst.name}")
            written.add(dst)
            save_png(prepare_image(load_image(f), args.side, background, args.threshold), dst)
    manifest = prepare_manifest(args.out_dir, classes, args.val_fraction, args.seed)
    path = args.out_dir / "manifest.tsv"
    write_manifest(manifest, path)
    print(f"{'class':<12}{'train':>7}{'val':>7}")
    for name, c in manifest.counts().items():
        print(f"{name:<12}{c['train']:>7}{c['val']:>7}")
    print(f"wrote {len(manifest.entries)} images and {path}")
    return 0


def cmd_train(args):
    manifest = read_manifest(args.manifest)
    for w in manifest.check_trainable():
        log.warning(w)
    model_cfg = ModelConfig(
        num_classes=len(manifest.labels), input_side=args.side, conv_filters=args.filters,
        kernel_side=args.kernel, pool_side=args.pool, conv_dropout=args.conv_dropout,
        dense_dropout=args.dense_dropout, dense_widths=args.dense, seed=args.seed,
        labels=manifest.labels,
    )
    sgd = SgdConfig(learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size,
                    epochs=args.epochs, seed=args.seed, lr_decay=args.lr_decay)
    policy = AugmentPolicy(args.max_rotation, args.max_translate, args.hflip_prob,
                           enabled=not args.no_augment)
    policy.validate()
    sgd.validate()
    model = build_model(model_cfg)

    run_log = args.run_log or args.metrics.with_name(args.metrics.name + ".run.json")
    resolved = {
        "args": _resolved(args),
        "model": json.loads(model_cfg.to_text()),
        "sgd": asdict(sgd),
        "augment": asdict(policy),
        "parameters": model.param_count(),
    }
    run_log.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    print(f"seed {args.seed}: model init seed {model_cfg.seed}, shuffle/augment seed {sgd.seed}")

    loader = load_image if args.no_cache else ImageCache()
    bs = sgd.batch_size

    def train_batches(epoch):
        return make_batches(manifest, "train", bs, epoch_seed(sgd.seed, epoch), policy,
                            args.side, loader)

    def fixed(split):
        return lambda: make_batches(manifest, split, bs, None, None, args.side, loader)

    best_path = args.best or args.out.with_name(args.out.stem + "_best" + args.out.suffix)

    def on_best(m, metrics):
        save_checkpoint(m, best_path)

    with MetricsWriter(args.metrics, timing=args.timing) as sink:
        result = fit(model, train_batches, fixed("val"), sgd, sink,
                     train_eval_batches=None if args.no_train_eval else fixed("train"),
                     on_best=on_best, stop_after=args.stop_after)
    save_checkpoint(model, args.out)
    seconds = sum(m.seconds for m in result.history)
    last = result.history[-1] if result.history else None
    if last:
        print(f"final val_acc {last.val_acc:.4f}  best {result.best_val_acc:.4f} "
              f"(epoch {result.best_epoch})  {seconds:.1f}s")
    return 0


def _check_labels(model, manifest):
    cfg = model.config
    if cfg.num_classes != len(manifest.labels):
        raise ConfigError(
            f"checkpoint has {cfg.num_classes} classes but manifest defines {len(manifest.labels)}"
        )
    if cfg.labels is not None and tuple(cfg.labels) != tuple(manifest.labels):
        raise ConfigError("checkpoint class names differ from the manifest's label space")


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    _check_labels(model, manifest)
    if not manifest.split(args.split):
        raise ConfigError(f"manifest has no {args.split} entries")
    res = evaluate(model, make_batches(manifest, args.split, args.batch_size,
                                       side=model.config.input_side))
    out = args.confusion or args.checkpoint.with_name(args.checkpoint.stem + f"_{args.split}_confusion.csv")
    res.confusion.write_csv(out, manifest.labels)
    print(f"split {args.split}: {res.confusion.total} samples")
    print(f"loss {res.loss:.4f}")
    print(f"accuracy {res.accuracy:.4f}")
    print(f"confusion matrix written to {out}")
    return 0


def cmd_predict(args):
    model = load_checkpoint(args.checkpoint)
    side = model.config.input_side
    background = load_image(args.background) if args.background else None
    stored = prepare_image(load_image(args.image), side, background, args.threshold)
    pixels = pad_and_resize(stored, side)
    idx, probs = predict(model, pixels)
    names = model.config.labels or tuple(str(i) for i in range(model.config.num_classes))
    k = max(1, min(args.topk, len(probs)))
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[:k]
    print(f"prediction: {names[idx]}")
    for i in order:
        print(f"{names[i]}\t{probs[i]:.6f}")
    return 0


@dataclass
class ReportRow:
    method: str
    accuracy: float
    caveat: str
    ours: bool = False


def cmd_report(args):
    runs = [(p, read_metrics(p)) for p in args.metrics]
    labels = args.label or []
    if len(labels) > len(runs):
        raise ConfigError(f"{len(labels)} labels given for {len(runs)} metrics files")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    rows = [] if args.no_reference else [ReportRow(*r) for r in REFERENCE_RESULTS]
    if not args.no_figures:
        from . import plotting
    for i, (path, history) in enumerate(runs):
        if i < len(labels):
            name = labels[i]
        else:
            name = "ours" if len(runs) == 1 else f"ours ({path.stem})"
        curves = args.out_dir / f"{path.stem}_curves.csv"
        with open(curves, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "train_acc", "val_acc"])
            for m in history:
                w.writerow([m.epoch, f"{m.train_loss:.6f}", f"{m.val_loss:.6f}",
                            f"{m.train_acc:.6f}", f"{m.val_acc:.6f}"])
        if history:
            final = history[-1]
            rows.append(ReportRow(name, round(100.0 * final.val_acc, 1),
                                  f"final validation accuracy after {final.epoch} epochs", True))
        if not args.no_figures and history:
            plotting.plot_curves(history, name, args.out_dir / f"{path.stem}_curves.{args.format}",
                                 args.format)
    table = args.out_dir / "comparison.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "accuracy", "caveat"])
        for r in rows:
            if not 0.0 <= r.accuracy <= 100.0:
                raise ConfigError(f"accuracy {r.accuracy} for {r.method} outside [0, 100]")
            w.writerow([r.method, f"{r.accuracy:.1f}", r.caveat])
    if not args.no_figures and rows:
        plotting.plot_comparison(rows, args.out_dir / f"comparison.{args.format}", args.format)
    for r in rows:
        print(f"{r.method:<32}{r.accuracy:6.1f}")
    print(f"report written to {args.out_dir}")
    return 0


def cmd_synth(args):
    from .synthetic import write_glyph_dataset

    m = write_glyph_dataset(args.out_dir, args.train_per_class, args.val_per_class,
                            args.classes, args.seed, args.side)
    print(f"wrote {len(m.entries)} images and {args.out_dir / 'manifest.tsv'}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "report": cmd_report,
    "synth": cmd_synth,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SignglyphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    log.info("%s %s", args.command, json.dumps(_resolved(args), sort_keys=True))
    try:
        return COMMANDS[args.command](args)
    except SignglyphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IOFailure.exit_code


if __name__ == "__main__":
    sys.exit(main())
