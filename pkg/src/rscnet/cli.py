"""Command-line entry point.

Subcommands cover the full pipeline: synthetic data generation, source-task
pre-training, transfer (feature extraction + head training + fine-tuning),
evaluation, offline feature extraction, and the three experiment harnesses.
Outputs are CSV files plus PNG figures rendered alongside them (suppress
with --no-figures).

Every run prints its resolved configuration, seed included, before doing any
work.  Errors are written to stderr as ``error:<category>: <message>``;
the exit code is 2 for usage errors and 1 otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dpipe
from . import experiments as exps
from .errors import CompatibilityError, RscError, UsageError
from .metrics import accuracy, confusion, write_metrics_csv
from .network import (
    PROFILES,
    build_network,
    load_weights,
    resolve_archive_profile,
    save_weights,
    truncate_to_conv_base,
)
from .tensor import SeededRng
from .training import (
    FeatureCache,
    TrainConfig,
    TrainReport,
    extract_features,
    load_feature_cache,
    predict,
    save_feature_cache,
    train_epochs,
    transfer_pipeline,
    write_report_csv,
)

PALETTES = {
    "winter-a": {},
    "winter-b": {
        "sky_rgb": (152.0, 152.0, 160.0),
        "road_rgb": (86.0, 90.0, 96.0),
        "snow_rgb": (236.0, 238.0, 242.0),
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error:usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def _echo_config(command: str, args, extra=None):
    pairs = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    if extra:
        pairs.update(extra)
    rendered = " ".join(f"{k}={v}" for k, v in sorted(pairs.items()))
    print(f"config: command={command} {rendered}")


def _manifest_path(data_arg) -> Path:
    path = Path(data_arg)
    return path / "manifest.csv" if path.is_dir() else path


def _load_dataset(data_arg):
    return dpipe.load_dataset(_manifest_path(data_arg))


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    return int(os.environ.get("RSC_WORKERS", "1"))


def _maybe_figures(args) -> bool:
    return not args.no_figures


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    _echo_config("gen-data", args)
    overrides = dict(PALETTES[args.palette])
    if args.noise is not None:
        overrides["noise_amplitude"] = args.noise
    config = dpipe.SyntheticConfig(
        size=args.size,
        seed=args.seed,
        coverage_jitter=args.coverage_jitter,
        glare_count=args.glare,
        snow_side=args.snow_side,
        **overrides,
    )
    dataset = dpipe.generate_synthetic(config, args.per_class)
    manifest = dpipe.save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} images, manifest {manifest}")
    return 0


def cmd_pretrain(args):
    if args.lr <= 0:
        raise UsageError("--lr must be > 0")
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    _echo_config("pretrain", args)
    dataset = _load_dataset(args.data)
    num_classes = dpipe.scheme_classes(args.scheme)
    profile = PROFILES[args.profile](num_classes=num_classes)
    view = dpipe.make_view(dataset, args.scheme, profile.input_shape[1:])
    config = TrainConfig(seed=args.seed, batch_size=args.batch_size)
    net = build_network(profile, SeededRng(args.seed))
    report = train_epochs(net, view, config, args.lr, args.epochs)
    save_weights(net, args.out)
    last = report.epochs[-1]
    print(
        f"pretrained {args.profile} for {len(report.epochs)} epochs "
        f"(stop={report.stop_reason}); train_acc={last.train_acc:.4f}; "
        f"archive {args.out}"
    )
    return 0


def _combined_report(head_report: TrainReport, ft_report: TrainReport) -> TrainReport:
    combined = TrainReport(
        stop_reason=f"pretrain:{head_report.stop_reason},finetune:{ft_report.stop_reason}"
    )
    epoch = 0
    for report in (head_report, ft_report):
        for stats in report.epochs:
            epoch += 1
            combined.epochs.append(dataclasses.replace(stats, epoch=epoch))
    return combined


def _transfer_config(args) -> TrainConfig:
    return TrainConfig(
        lr_pretrain=args.lr_pre,
        lr_finetune=args.lr_fine,
        epochs_pretrain=args.epochs_pre,
        epochs_finetune=args.epochs_fine,
        batch_size=args.batch_size,
        frozen_blocks_finetune=args.frozen_blocks,
        seed=args.seed,
    )


def cmd_transfer(args):
    if not 0 <= args.frozen_blocks <= 5:
        raise UsageError("--frozen-blocks must be in 0..5")
    if args.lr_pre <= 0 or args.lr_fine <= 0:
        raise UsageError("learning rates must be > 0")
    _echo_config("transfer", args)
    dataset = _load_dataset(args.data)
    profile = resolve_archive_profile(args.base)
    train_ds, test_ds = dpipe.split_train_test(
        dataset, args.train_fraction, SeededRng(args.seed)
    )
    input_hw = profile.input_shape[1:]
    train_view = dpipe.make_view(train_ds, args.scheme, input_hw)
    test_view = dpipe.make_view(test_ds, args.scheme, input_hw) if len(test_ds) else None
    config = _transfer_config(args)
    head_widths = tuple(int(x) for x in args.head.split(",")) if args.head else None

    train_cache = None
    if args.cache:
        cache_path = Path(args.cache)
        if cache_path.exists():
            train_cache = load_feature_cache(cache_path)
        else:
            base = truncate_to_conv_base(load_weights(args.base, profile))
            raw = extract_features(base, train_view, workers=_workers(args))
            train_cache = FeatureCache(
                np.float64(np.float32(raw.features)), raw.labels, raw.ids, raw.fingerprint
            )
            save_feature_cache(train_cache, cache_path)

    result = transfer_pipeline(
        args.base,
        train_view,
        test_view,
        config,
        head_widths=head_widths,
        profile=profile,
        train_cache=train_cache,
        workers=_workers(args),
    )
    save_weights(result.network, args.out)
    combined = _combined_report(result.head_report, result.finetune_report)
    write_report_csv(combined, args.report)
    if _maybe_figures(args):
        from .figures import save_training_curves

        fig_path = Path(args.report).with_suffix("").as_posix() + "_curves.png"
        save_training_curves(result.head_report, result.finetune_report, fig_path)
        print(f"figure {fig_path}")
    head_acc = result.head_only_test_acc()
    final_acc = result.final_test_acc()
    print(
        f"transfer complete; head_only_test_acc="
        f"{'n/a' if head_acc is None else f'{head_acc:.4f}'} "
        f"final_test_acc={'n/a' if final_acc is None else f'{final_acc:.4f}'}; "
        f"model {args.out}; report {args.report}"
    )
    return 0


def cmd_eval(args):
    _echo_config("eval", args)
    profile = resolve_archive_profile(args.model)
    net = load_weights(args.model, profile)
    num_classes = dpipe.scheme_classes(args.scheme)
    if profile.num_classes != num_classes:
        raise CompatibilityError(
            f"model predicts {profile.num_classes} classes but scheme "
            f"'{args.scheme}' has {num_classes}"
        )
    dataset = _load_dataset(args.data)
    view = dpipe.make_view(dataset, args.scheme, profile.input_shape[1:])
    preds = predict(net, view)
    cm = confusion(preds, view.y, num_classes, dpipe.SCHEME_CLASS_NAMES[args.scheme])
    write_metrics_csv(cm, args.metrics)
    if _maybe_figures(args):
        from .figures import save_confusion_heatmap

        fig_path = Path(args.metrics).with_suffix("").as_posix() + "_confusion.png"
        save_confusion_heatmap(cm, fig_path)
        print(f"figure {fig_path}")
    print(f"accuracy={accuracy(cm):.4f} over {cm.total} samples; metrics {args.metrics}")
    return 0


def cmd_extract_features(args):
    _echo_config("extract-features", args)
    profile = resolve_archive_profile(args.base)
    base = truncate_to_conv_base(load_weights(args.base, profile))
    dataset = _load_dataset(args.data)
    view = dpipe.make_view(dataset, args.scheme, profile.input_shape[1:])
    cache = extract_features(base, view, workers=_workers(args))
    save_feature_cache(cache, args.out)
    print(f"cached {len(cache)} feature vectors of width {cache.width} to {args.out}")
    return 0


def _experiment_config(args) -> TrainConfig:
    early = 1.01 if args.no_early_stop else 0.99
    return TrainConfig(
        lr_pretrain=args.lr_pre,
        lr_finetune=args.lr_fine,
        epochs_pretrain=args.epochs_pre,
        epochs_finetune=args.epochs_fine,
        batch_size=args.batch_size,
        frozen_blocks_finetune=args.frozen_blocks,
        early_stop_train_acc=early,
        seed=args.seed,
    )


def cmd_experiment(args):
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    _echo_config("experiment", args)
    dataset = _load_dataset(args.data)
    config = _experiment_config(args)
    seeds = [args.seed + i for i in range(args.seeds)]
    out = Path(args.out)
    stem = out.with_suffix("").as_posix()
    workers = _workers(args)

    if args.kind == "sensitivity":
        grid = exps.GridSpec(
            fc_structures=_parse_structures(args.structures),
            pretrain_lrs=_parse_floats(args.pretrain_lrs),
            finetune_lrs=_parse_floats(args.finetune_lrs),
            freeze_depths=tuple(int(x) for x in args.freeze_depths.split(",")),
        )
        trials = exps.run_sensitivity(
            grid,
            args.base,
            dataset,
            seeds,
            config,
            scheme=args.scheme,
            train_fraction=args.train_fraction,
            workers=workers,
        )
        exps.emit_csv(trials, out)
        if _maybe_figures(args):
            from .figures import save_sensitivity_panels

            print(f"figure {save_sensitivity_panels(trials, stem + '_sensitivity.png')}")
    elif args.kind == "granularity":
        trials, pooled = exps.run_granularity(
            dataset,
            args.base,
            seeds,
            config=config,
            train_fraction=args.train_fraction,
            workers=workers,
        )
        exps.emit_csv(trials, out)
        for scheme, cm in pooled.items():
            write_metrics_csv(cm, f"{stem}_{scheme}_metrics.csv")
        if _maybe_figures(args):
            from .figures import save_granularity_bars

            accs = {scheme: accuracy(cm) for scheme, cm in pooled.items()}
            print(f"figure {save_granularity_bars(accs, stem + '_granularity.png')}")
    else:  # datasize
        fractions = _parse_floats(args.fractions)
        trials, stats = exps.run_datasize(
            dataset,
            args.base,
            fractions=fractions,
            repeats=args.seeds,
            config=config,
            seeds=seeds,
            scheme=args.scheme,
            train_fraction=args.train_fraction,
            workers=workers,
        )
        exps.emit_csv(trials, out)
        exps.write_box_csv(stats, stem + "_box.csv")
        print(f"box stats {stem}_box.csv")
        if _maybe_figures(args):
            from .figures import save_datasize_box

            accs = {f: [t.test_acc for t in trials if t.fraction == f] for f in fractions}
            print(f"figure {save_datasize_box(accs, stem + '_box.png')}")
    print(f"results {out}")
    print(exps.format_reference_table())
    return 0


def _parse_floats(text: str):
    try:
        values = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got '{text}'")
    if not values:
        raise UsageError("expected at least one value")
    return values


def _parse_structures(text: str):
    try:
        pairs = tuple(
            tuple(int(x) for x in chunk.split("-")) for chunk in text.split(",")
        )
    except ValueError:
        raise UsageError(f"expected h1-h2 pairs like '512-256,1024-512', got '{text}'")
    if any(len(p) != 2 for p in pairs):
        raise UsageError("each structure must be a h1-h2 pair")
    return pairs


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="rscnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="base RNG seed")
        p.add_argument("--workers", type=int, default=None,
                       help="parallel workers (default: env RSC_WORKERS or 1)")

    p = sub.add_parser("gen-data", help="write a synthetic labeled dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, required=True, help="images per class")
    p.add_argument("--size", type=int, choices=[150, 32], default=32)
    p.add_argument("--noise", type=float, default=None, help="noise amplitude override")
    p.add_argument("--coverage-jitter", type=float, default=0.0,
                   help="rendered-vs-label coverage slack (class-boundary blur)")
    p.add_argument("--glare", type=int, default=0, help="max sky glare patches per image")
    p.add_argument("--snow-side", choices=["left", "right"], default="left")
    p.add_argument("--palette", choices=sorted(PALETTES), default="winter-a")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train a full network on a source dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--profile", choices=sorted(PROFILES), required=True)
    p.add_argument("--out", required=True, help="weight archive path")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--scheme", choices=["five", "three", "two"], default="five")
    p.add_argument("--batch-size", type=int, default=32)
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("transfer", help="run the three-step transfer procedure")
    p.add_argument("--base", required=True, help="pre-trained weight archive")
    p.add_argument("--data", required=True)
    p.add_argument("--scheme", choices=["five", "three", "two"], default="three")
    p.add_argument("--lr-pre", type=float, default=0.001)
    p.add_argument("--lr-fine", type=float, default=0.0005)
    p.add_argument("--epochs-pre", type=int, default=50)
    p.add_argument("--epochs-fine", type=int, default=100)
    p.add_argument("--frozen-blocks", type=int, default=2)
    p.add_argument("--train-fraction", type=float, default=0.70)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--head", default=None, help="head widths, e.g. 512,256")
    p.add_argument("--cache", default=None,
                   help="feature-cache file to reuse or create (f32 features)")
    p.add_argument("--out", required=True, help="fine-tuned model archive")
    p.add_argument("--report", required=True, help="per-epoch CSV report")
    p.add_argument("--no-figures", action="store_true")
    common(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="evaluate a model archive on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scheme", choices=["five", "three", "two"], required=True)
    p.add_argument("--metrics", required=True, help="metrics CSV path")
    p.add_argument("--no-figures", action="store_true")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-features", help="cache conv-base features offline")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="feature cache path")
    p.add_argument("--scheme", choices=["five", "three", "two"], default="five")
    common(p)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("experiment", help="run a harness study")
    p.add_argument("--kind", choices=["sensitivity", "granularity", "datasize"],
                   required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--seeds", type=int, default=3,
                   help="number of seeds (datasize: repeats per fraction)")
    p.add_argument("--scheme", choices=["five", "three", "two"], default="three")
    p.add_argument("--fractions", default="0.1,0.5,1.0")
    p.add_argument("--structures", default="256-256,512-256,1024-512,2048-2048")
    p.add_argument("--pretrain-lrs", default="0.0001,0.0005,0.001,0.005,0.01")
    p.add_argument("--finetune-lrs", default="0.0001,0.0005,0.001")
    p.add_argument("--freeze-depths", default="4,3,2,1")
    p.add_argument("--lr-pre", type=float, default=0.001)
    p.add_argument("--lr-fine", type=float, default=0.0005)
    p.add_argument("--epochs-pre", type=int, default=50)
    p.add_argument("--epochs-fine", type=int, default=100)
    p.add_argument("--frozen-blocks", type=int, default=2)
    p.add_argument("--train-fraction", type=float, default=0.70)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--no-early-stop", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    common(p)
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return 2
    except RscError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error:file: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
