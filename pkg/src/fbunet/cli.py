"""Command-line entry point: ``fbunet <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import gradcheck as gc
from .data import DatasetManifest, make_folds, synthetic_dataset
from .errors import FBUNetError
from .models import VARIANTS, ModelConfig
from .train import (ABLATION_SETS, DROSOPHILA_RATIOS, MOUSE_RATIOS, TrainConfig, ablate,
                    evaluate, evaluate_arrays, inspect, train)

PRESETS = {
    "drosophila": dict(batch=16, fold=(5, 0), ratios=DROSOPHILA_RATIOS),
    "mouse": dict(batch=10, fold=(8, 0), ratios=MOUSE_RATIOS),
}


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def _locations(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _fold(text):
    k, i = text.split("/")
    return int(k), int(i)


def _ratios(text):
    return tuple(float(v) for v in text.split(":"))


def _model_flags(p):
    p.add_argument("--variant", choices=VARIANTS, default="feedback-convlstm")
    p.add_argument("--classes", type=int, default=None, help="default: from the manifest")
    p.add_argument("--filters", type=_ints, default=(8, 16, 32, 64, 128))
    p.add_argument("--lstm-locations", type=_locations, default=None)
    p.add_argument("--feedback-input", choices=("probs-only", "concat-image"), default="probs-only")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--rcl-steps", type=int, default=2)
    p.add_argument("--forget-bias", type=float, default=1.0)


def _train_flags(p):
    p.add_argument("--manifest", required=True)
    _model_flags(p)
    p.add_argument("--preset", choices=sorted(PRESETS), default="drosophila",
                   help="batch size and fold layout of a reference dataset")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=1500)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fold", type=_fold, default=None, help="K/I, e.g. 5/0")
    p.add_argument("--ratios", type=_ratios, default=None, help="train:val:test, e.g. 192:48:80")
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--no-class-weights", action="store_true")
    p.add_argument("--augment", action="store_true",
                   help="random rotation/flip of each training sample per batch")
    p.add_argument("--out", default=None)


def _model_config(args, num_classes):
    return ModelConfig(variant=args.variant, num_classes=args.classes or num_classes,
                       filters=args.filters, lstm_locations=args.lstm_locations,
                       feedback_input=args.feedback_input, rcl_time_steps=args.rcl_steps,
                       lam=args.lam, forget_bias=args.forget_bias)


def _train_config(args, manifest):
    preset = PRESETS[args.preset]
    return TrainConfig(model=_model_config(args, manifest.num_classes), lr=args.lr,
                       epochs=args.epochs, batch_size=args.batch or preset["batch"],
                       seed=args.seed, fold=args.fold or preset["fold"],
                       ratios=args.ratios or preset["ratios"], checkpoint_dir=args.out,
                       eval_every=args.eval_every, class_weights=not args.no_class_weights,
                       augment=args.augment)


def cmd_train(args):
    manifest = DatasetManifest.load(args.manifest)
    config = _train_config(args, manifest)
    report = train(config, manifest, log_stream=sys.stdout)
    test = report.splits["test"]
    if test.ids:
        res = evaluate_arrays(report.best_model, test.images, test.labels, config.batch_size,
                              manifest.class_names)
        print(res.table(config.model.variant))
        for line in res.rows(config.model.variant):
            print(line)
    return 0


def cmd_evaluate(args):
    manifest = DatasetManifest.load(args.manifest)
    ids = None
    if args.split != "all":
        k, i = args.fold
        fold = make_folds(manifest, k, args.ratios, args.seed)[i]
        ids = getattr(fold, args.split)
    res = evaluate(args.checkpoint, manifest, ids, args.batch)
    print(res.table(Path(args.checkpoint).stem))
    for line in res.rows(Path(args.checkpoint).stem):
        print(line)
    return 0


def cmd_ablate(args):
    manifest = DatasetManifest.load(args.manifest)
    config = _train_config(args, manifest)
    if args.locations:
        sets = [_locations(s) for s in args.locations.split(";")]
    else:
        sets = ABLATION_SETS
    report = ablate(config, sets, manifest, args.manifest, workers=args.workers)
    print(report.table())
    for line in report.machine_rows():
        print(line)
    return 0


def cmd_gradcheck(args):
    variants = tuple(args.variants.split(",")) if args.variants else ("feedback-convlstm",)
    results = gc.run(seed=args.seed, ops_only=args.ops_only, model_coords=args.coords,
                     variants=variants)
    print(gc.report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_inspect(args):
    written = inspect(args.checkpoint, args.image, args.out, args.label)
    for name, path in written.items():
        print(f"{name}\t{path}")
    return 0


def cmd_make_synth(args):
    m = synthetic_dataset(args.classes, args.n, args.size, args.seed, args.out)
    print(m.root / "manifest.txt")
    return 0


def cmd_make_folds(args):
    manifest = DatasetManifest.load(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fold in make_folds(manifest, args.k, args.ratios, args.seed):
        path = out / f"fold{fold.index}.txt"
        lines = [f"{split}\t{sid}" for split in ("train", "val", "test") for sid in getattr(fold, split)]
        path.write_text("\n".join(lines) + "\n")
        print(f"fold\t{fold.index}\ttrain\t{len(fold.train)}\tval\t{len(fold.val)}"
              f"\ttest\t{len(fold.test)}\t{path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fbunet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model on one fold")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="ConvLSTM placement sweep")
    _train_flags(p)
    p.add_argument("--locations", default=None,
                   help="';'-separated location sets, e.g. 'a;c;a,b,d,e' (default: the seven reference rows)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("evaluate", help="IoU of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--fold", type=_fold, default=(5, 0))
    p.add_argument("--ratios", type=_ratios, default=DROSOPHILA_RATIOS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=16)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all ops and a tiny model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true")
    p.add_argument("--coords", type=int, default=6, help="coordinates per model tensor")
    p.add_argument("--variants", default=None, help="comma-separated model variants")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="write PGM panels for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--label", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("make-synth", help="generate a synthetic blob dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("make-folds", help="write group-aware fold files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", "--folds", dest="k", type=int, default=5)
    p.add_argument("--ratios", type=_ratios, default=DROSOPHILA_RATIOS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_folds)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FBUNetError, OSError) as exc:
        print(f"fbunet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
