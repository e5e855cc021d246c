"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable files, bad
formats, empty datasets), 3 internal error. Data goes to stdout, diagnostics
to stderr; every subcommand takes --json for schema-stable output.

Thread control: --threads, falling back to the MELAD_THREADS environment
variable; --deterministic pins the engine to one thread for bit-identical
results across runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from . import meld_format, model, trainer
from .errors import MeladError
from .tensor_core import Tensor

USAGE_EXIT = 1
DATA_EXIT = 2
INTERNAL_EXIT = 3


class _UsageError(Exception):
    """Bad invocation discovered after argparse (flag combos, env vars)."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this taxonomy reserves 2 for
    data errors, so usage failures are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number")
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _resolve_threads(args) -> int | None:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("MELAD_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise _UsageError(f"MELAD_THREADS must be an integer, got {env!r}")
        if value < 1:
            raise _UsageError(f"MELAD_THREADS must be >= 1, got {value}")
        return value
    return None


def _load_arch(value: str) -> model.ArchitectureConfig:
    if value in model.BUILTIN_CONFIGS:
        return model.builtin_config(value)
    return model.load_config(value)


def _emit(args, obj: dict, human: str) -> None:
    if args.json:
        print(json.dumps(obj, indent=2))
    else:
        print(human)


# --- subcommands --------------------------------------------------------------

def cmd_infer(args) -> int:
    bundle = meld_format.load_weights(args.weights)
    threads = _resolve_threads(args)
    start = time.perf_counter()
    target = args.image_size or bundle.config.input_height
    image = data_mod.preprocess(args.image, target)
    prediction = model.forward(bundle, image,
                               deterministic=args.deterministic,
                               threads=threads)
    runtime_ms = (time.perf_counter() - start) * 1000.0
    obj = prediction.to_json()
    obj["runtime_ms"] = runtime_ms
    human = (f"label: {prediction.label}\n"
             f"p_benign: {prediction.p_benign:.6f}\n"
             f"p_malignant: {prediction.p_malignant:.6f}\n"
             f"runtime_ms: {runtime_ms:.1f}")
    _emit(args, obj, human)
    return 0


def cmd_train(args) -> int:
    arch = _load_arch(args.arch)
    manifest = data_mod.load_manifest(args.manifest)
    cfg = trainer.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        image_size=args.image_size,
        deterministic=args.deterministic,
        threads=_resolve_threads(args),
        augment=(trainer.AugmentConfig() if args.augment
                 else trainer.AugmentConfig.none()),
    )
    print(f"training {arch.name}: lr={cfg.learning_rate} "
          f"batch={cfg.batch_size} epochs={cfg.epochs} seed={cfg.seed} "
          f"image_size={cfg.image_size}", file=sys.stderr)
    result = trainer.train(arch, manifest, cfg)
    meld_format.save_weights(result.bundle, args.out)
    history_path = args.history or f"{args.out}.history.csv"
    trainer.save_history(result.history, history_path)
    final = result.history[-1]
    obj = {
        "weights": str(args.out),
        "history": str(history_path),
        "epochs": final.epoch,
        "final_loss": final.loss,
        "final_accuracy": final.accuracy,
    }
    human = (f"wrote {args.out} and {history_path}\n"
             f"epoch {final.epoch}: loss {final.loss:.4f} "
             f"accuracy {final.accuracy:.4f}")
    _emit(args, obj, human)
    return 0


def cmd_bench(args) -> int:
    bundle = meld_format.load_weights(args.weights)
    if args.image is not None:
        image = data_mod.preprocess(args.image, args.input_size)
    else:
        # Fixed pseudorandom input: benchmark numbers do not depend on
        # having an image at hand, and the cost of a conv is data-independent.
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0)))
        shape = (bundle.config.input_channels, args.input_size, args.input_size)
        image = Tensor(rng.random(shape, dtype=np.float32))
    report = bench_mod.time_inference(
        bundle,
        image,
        trials=args.trials,
        threads=_resolve_threads(args),
        deterministic=args.deterministic,
        image_path=args.image if args.include_preprocess else None,
        include_preprocess=args.include_preprocess,
        trainsets=args.trainsets,
    )
    if args.precision is not None:
        ratio = bench_mod.perf_ratio(args.precision, report.mean_ms)
        report = dataclasses.replace(report, perf_ratio=ratio)
    print(bench_mod.emit_report(report, "json" if args.json else "markdown"))
    return 0


def cmd_params(args) -> int:
    arch = _load_arch(args.arch)
    counts = model.count_params(arch)
    obj = {"trainable": counts.trainable,
           "non_trainable": counts.non_trainable,
           "total": counts.total}
    human = (f"trainable: {counts.trainable:,}\n"
             f"non-trainable: {counts.non_trainable:,}\n"
             f"total: {counts.total:,}")
    _emit(args, obj, human)
    return 0


def cmd_rf(args) -> int:
    arch = _load_arch(args.arch)
    rf = model.receptive_field(arch)
    _emit(args, {"receptive_field": rf}, str(rf))
    return 0


def cmd_synth(args) -> int:
    manifest = trainer.synthetic_dataset(args.seed, args.n, args.out,
                                         size=args.size)
    counts = manifest.counts
    obj = {"out": str(args.out), "manifest": str(os.path.join(args.out, "manifest.csv")),
           "counts": counts}
    human = (f"wrote {len(manifest)} images to {args.out} "
             f"(benign {counts['benign']}, malignant {counts['malignant']})")
    _emit(args, obj, human)
    return 0


def cmd_dataset_ingest(args) -> int:
    if (args.csv is None) == (args.folders is None):
        raise _UsageError("provide exactly one of --csv or --folders")
    if args.csv is not None:
        aliases = (data_mod.load_alias_table(args.aliases)
                   if args.aliases else None)
        result = data_mod.ingest_csv(
            args.csv,
            image_root=args.image_root,
            source=args.source,
            image_column=args.image_column,
            label_column=args.label_column,
            aliases=aliases,
        )
        manifest, rejects = result.manifest, result.rejects
    else:
        manifest = data_mod.ingest_folders(args.folders, source=args.source)
        rejects = ()
    data_mod.save_manifest(manifest, args.out)
    for reject in rejects:
        print(f"rejected row {reject.row_number}: {reject.reason}",
              file=sys.stderr)
    counts = manifest.counts
    obj = {"out": str(args.out), "counts": counts,
           "rejected": len(rejects),
           "rejects": [r._asdict() for r in rejects]}
    human = (f"wrote {args.out}: benign {counts['benign']}, "
             f"malignant {counts['malignant']}, rejected {len(rejects)}")
    _emit(args, obj, human)
    return 0


def cmd_dataset_combine(args) -> int:
    manifests = {}
    for pair in args.manifest:
        code, sep, path = pair.partition("=")
        if not sep or not code or not path:
            raise _UsageError(
                f"--manifest takes code=path pairs, got {pair!r}"
            )
        manifests[code] = data_mod.load_manifest(path)
    if args.combo is None and args.preset is None:
        raise _UsageError("dataset combine needs --combo or --preset")
    if args.preset:
        presets = data_mod.combination_presets()
        if args.preset not in presets:
            raise MeladError(
                f"unknown preset {args.preset!r}; shipped presets: "
                f"{', '.join(sorted(presets))}"
            )
        combo = presets[args.preset]
    else:
        combo = data_mod.parse_combo(args.combo)
    combined = data_mod.combine(manifests, combo)
    data_mod.save_manifest(combined, args.out)
    counts = combined.counts
    obj = {"out": str(args.out), "combo": list(combo), "counts": counts,
           "records": len(combined), "provenance": list(combined.provenance)}
    human = (f"wrote {args.out}: {'+'.join(combo)} -> "
             f"benign {counts['benign']}, malignant {counts['malignant']}")
    _emit(args, obj, human)
    return 0


def cmd_dataset_balance(args) -> int:
    manifest = data_mod.load_manifest(args.manifest)
    balanced = trainer.balance_50_50(manifest, trainer.balance_rng(args.seed))
    data_mod.save_manifest(balanced, args.out)
    counts = balanced.counts
    obj = {"out": str(args.out), "counts": counts}
    human = (f"wrote {args.out}: benign {counts['benign']}, "
             f"malignant {counts['malignant']}")
    _emit(args, obj, human)
    return 0


# --- parser wiring --------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser, *, threads: bool = True) -> None:
    parser.add_argument("--json", action="store_true",
                        help="emit machine-readable JSON on stdout")
    if threads:
        parser.add_argument("--threads", type=_positive_int, default=None,
                            help="engine thread count "
                                 "(default: MELAD_THREADS or all cores)")
        parser.add_argument("--deterministic", action="store_true",
                            help="single-threaded engine, bit-identical output")


def build_parser() -> _Parser:
    parser = _Parser(prog="melad",
                     description="Dilated-convolution melanoma classifier")
    parser.add_argument("--version", action="version", version="melad 1.0.0")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="classify one image")
    p.add_argument("image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image-size", type=_positive_int, default=None,
                   help="resize target (default: the bundle's input size)")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--arch", default="mela-d",
                   help="builtin name (mela-d, mela-d-lite) or a config JSON path")
    p.add_argument("--out", required=True, help="output .meld weight file")
    p.add_argument("--history", default=None,
                   help="history CSV path (default: <out>.history.csv)")
    p.add_argument("--epochs", type=_positive_int, default=20)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=_positive_float, default=1e-4)
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--image-size", type=_positive_int, default=150)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction,
                   default=True, help="augment oversampled duplicates")
    _add_common(p)
    p.set_defaults(func=cmd_train, deterministic=True)
    p.add_argument("--fast", dest="deterministic", action="store_false",
                   help="allow multi-threaded BLAS (results may vary in "
                        "the last bits)")

    p = sub.add_parser("bench", help="time single-image inference")
    p.add_argument("--weights", required=True)
    p.add_argument("--trials", type=_positive_int, default=3)
    p.add_argument("--input-size", type=_positive_int, default=150)
    p.add_argument("--image", default=None,
                   help="use this image (default: fixed random input)")
    p.add_argument("--include-preprocess", action="store_true",
                   help="time decoding + resizing too (needs --image)")
    p.add_argument("--trainsets", default=None)
    p.add_argument("--precision", type=float, default=None,
                   help="precision in [0,1]; adds perf_ratio to the report")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("params", help="parameter counts for a config")
    p.add_argument("--arch", default="mela-d")
    _add_common(p, threads=False)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("rf", help="receptive field of a config")
    p.add_argument("--arch", default="mela-d")
    _add_common(p, threads=False)
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("synth", help="generate the synthetic two-class dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_positive_int, default=10,
                   help="images per class")
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--size", type=_positive_int, default=64)
    _add_common(p, threads=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dataset", help="manifest tooling")
    dataset_sub = p.add_subparsers(dest="dataset_command", required=True)

    q = dataset_sub.add_parser("ingest", help="CSV or folder tree -> manifest")
    q.add_argument("--csv", default=None)
    q.add_argument("--folders", default=None,
                   help="root with benign/ and malignant/ subdirectories")
    q.add_argument("--image-root", default=None)
    q.add_argument("--source", default="local", help="source code tag")
    q.add_argument("--image-column", default="image")
    q.add_argument("--label-column", default="label")
    q.add_argument("--aliases", default=None,
                   help="JSON alias table: raw label -> benign|malignant")
    q.add_argument("--out", required=True)
    _add_common(q, threads=False)
    q.set_defaults(func=cmd_dataset_ingest)

    q = dataset_sub.add_parser("combine", help="merge manifests by code")
    q.add_argument("--manifest", action="append", required=True,
                   metavar="CODE=PATH")
    q.add_argument("--combo", default=None, help='e.g. "a+b+c"')
    q.add_argument("--preset", default=None,
                   help="a shipped combination preset name")
    q.add_argument("--out", required=True)
    _add_common(q, threads=False)
    q.set_defaults(func=cmd_dataset_combine)

    q = dataset_sub.add_parser("balance", help="oversample to 50:50")
    q.add_argument("--manifest", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=_non_negative_int, default=0)
    _add_common(q, threads=False)
    q.set_defaults(func=cmd_dataset_balance)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except MeladError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return INTERNAL_EXIT


if __name__ == "__main__":
    sys.exit(main())
