"""Reproducible harness runs: sensitivity grids, label granularity, data size.

Every trial is a full transfer pipeline (feature extraction, head training,
fine-tuning) evaluated on a held-out test split.  A trial is identified by
its config fingerprint plus seed; re-running with the same pair reproduces
the logged accuracy bit for bit.  Wall-clock seconds are measured and are the
one column of the results CSV that varies between identical runs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import (
    Dataset,
    SCHEME_CLASS_NAMES,
    bootstrap_subsample,
    make_view,
    split_train_test,
)
from .errors import RangeError
from .metrics import ConfusionMatrix, box_stats, confusion
from .network import resolve_archive_profile
from .tensor import SeededRng
from .training import TrainConfig, predict, transfer_pipeline

# Accuracies published for the proprietary field dataset.  They are reference
# points only; the synthetic desk-scale tasks here are not expected to
# reproduce them.
REFERENCE_FIELD_ACCURACIES = {
    "two_class_overall": 0.9072,
    "three_class_overall": 0.873,
    "five_class_overall": 0.785,
    "five_class_bare_plus_lt25_merged": 0.8416,
    "two_class_finetune_last_block_only": 0.882,
}


def format_reference_table() -> str:
    lines = ["reference accuracies (proprietary field data, not reproducible here):"]
    for key, value in REFERENCE_FIELD_ACCURACIES.items():
        lines.append(f"  {key}: {value:.4f}")
    return "\n".join(lines)


@dataclass(frozen=True)
class GridSpec:
    """Stage-wise sweep grids: head structure first, then learning rates,
    then freeze depth."""

    fc_structures: tuple = ((256, 256), (512, 256), (1024, 512), (2048, 2048))
    pretrain_lrs: tuple = (0.0001, 0.0005, 0.001, 0.005, 0.01)
    finetune_lrs: tuple = (0.0001, 0.0005, 0.001)
    freeze_depths: tuple = (4, 3, 2, 1)  # frozen blocks; fine-tune the rest

    def __post_init__(self):
        if not (self.fc_structures and self.pretrain_lrs and self.finetune_lrs and self.freeze_depths):
            raise RangeError("every sweep grid must be non-empty")
        if min(self.pretrain_lrs) <= 0 or min(self.finetune_lrs) <= 0:
            raise RangeError("learning rates must be positive")
        if any(h1 < 1 or h2 < 1 for h1, h2 in self.fc_structures):
            raise RangeError("head widths must be positive")


@dataclass
class TrialResult:
    experiment: str
    config_fingerprint: str
    seed: int
    fraction: float
    scheme: str
    h1: int
    h2: int
    lr_pre: float
    lr_fine: float
    frozen_blocks: int
    test_acc: float
    wall_secs: float


def trial_fingerprint(experiment, scheme, fraction, h1, h2, config: TrainConfig) -> str:
    text = (
        f"exp={experiment};scheme={scheme};fraction={fraction:g};h1={h1};h2={h2};"
        f"lr_pre={config.lr_pretrain:g};lr_fine={config.lr_finetune:g};"
        f"frozen={config.frozen_blocks_finetune};"
        f"epochs={config.epochs_pretrain}/{config.epochs_finetune};"
        f"batch={config.batch_size};momentum={config.momentum:g};"
        f"early={config.early_stop_train_acc:g}"
    )
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def derive_seed(seed: int, salt: int) -> int:
    """Mix a salt into a seed so related trials get independent streams."""
    return int(SeededRng((seed << 8) ^ salt).raw(1)[0] & 0x7FFFFFFF)


def run_transfer_trial(
    base_archive,
    profile,
    train_view,
    test_view,
    config: TrainConfig,
    head_widths,
    experiment: str,
    scheme: str,
    fraction: float = 1.0,
    seed_label: int = None,
):
    """One timed pipeline run; returns (TrialResult, TransferResult)."""
    start = time.perf_counter()
    result = transfer_pipeline(
        base_archive, train_view, test_view, config, head_widths=head_widths, profile=profile
    )
    wall = time.perf_counter() - start
    trial = TrialResult(
        experiment=experiment,
        config_fingerprint=trial_fingerprint(
            experiment, scheme, fraction, head_widths[0], head_widths[1], config
        ),
        seed=config.seed if seed_label is None else seed_label,
        fraction=fraction,
        scheme=scheme,
        h1=head_widths[0],
        h2=head_widths[1],
        lr_pre=config.lr_pretrain,
        lr_fine=config.lr_finetune,
        frozen_blocks=config.frozen_blocks_finetune,
        test_acc=result.final_test_acc(),
        wall_secs=wall,
    )
    return trial, result


def _map_trials(jobs, workers: int):
    """Run trial thunks, optionally in parallel; results keep submission order."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda job: job(), jobs))
    return [job() for job in jobs]


def _median_best(trials_by_knob):
    """Knob with the best median accuracy; ties go to the earliest knob."""
    best_knob, best_median = None, -1.0
    for knob, accs in trials_by_knob:
        med = float(np.median(accs))
        if med > best_median:
            best_knob, best_median = knob, med
    return best_knob


def run_sensitivity(
    grid: GridSpec,
    base_archive,
    dataset: Dataset,
    seeds,
    config: TrainConfig = None,
    scheme: str = "three",
    train_fraction: float = 0.70,
    workers: int = 1,
):
    """Greedy stage-wise sweep: structure, pre-train LR, fine-tune LR, freeze
    depth.  Each stage fixes the best knob so far by median test accuracy;
    every stage reuses the same train/test split."""
    config = config or TrainConfig()
    profile = resolve_archive_profile(base_archive)
    input_hw = profile.input_shape[1:]
    train_ds, test_ds = split_train_test(dataset, train_fraction, SeededRng(config.seed))
    train_view = make_view(train_ds, scheme, input_hw)
    test_view = make_view(test_ds, scheme, input_hw)

    trials = []

    def stage(name, knobs, make_config_widths):
        stage_results = []
        jobs = []
        for knob in knobs:
            for seed in seeds:
                trial_config, widths = make_config_widths(knob, seed)
                jobs.append(
                    (
                        knob,
                        lambda tc=trial_config, w=widths: run_transfer_trial(
                            base_archive,
                            profile,
                            train_view,
                            test_view,
                            tc,
                            w,
                            experiment=name,
                            scheme=scheme,
                        )[0],
                    )
                )
        outcomes = _map_trials([job for _, job in jobs], workers)
        by_knob = {knob: [] for knob in knobs}
        for (knob, _), trial in zip(jobs, outcomes):
            trials.append(trial)
            stage_results.append(trial)
            by_knob[knob].append(trial.test_acc)
        return _median_best([(k, by_knob[k]) for k in knobs])

    best_structure = stage(
        "sensitivity_structure",
        grid.fc_structures,
        lambda knob, seed: (dataclasses.replace(config, seed=seed), knob),
    )
    best_lr_pre = stage(
        "sensitivity_lr_pretrain",
        grid.pretrain_lrs,
        lambda knob, seed: (
            dataclasses.replace(config, seed=seed, lr_pretrain=knob),
            best_structure,
        ),
    )
    best_lr_fine = stage(
        "sensitivity_lr_finetune",
        grid.finetune_lrs,
        lambda knob, seed: (
            dataclasses.replace(
                config, seed=seed, lr_pretrain=best_lr_pre, lr_finetune=knob
            ),
            best_structure,
        ),
    )
    stage(
        "sensitivity_freeze_depth",
        grid.freeze_depths,
        lambda knob, seed: (
            dataclasses.replace(
                config,
                seed=seed,
                lr_pretrain=best_lr_pre,
                lr_finetune=best_lr_fine,
                frozen_blocks_finetune=knob,
            ),
            best_structure,
        ),
    )
    return trials


def run_granularity(
    dataset: Dataset,
    base_archive,
    seeds,
    schemes=("five", "three", "two"),
    config: TrainConfig = None,
    train_fraction: float = 0.70,
    head_widths=None,
    workers: int = 1,
):
    """Same split, three label granularities; labels are re-mapped per scheme.

    Returns (trials, {scheme: pooled ConfusionMatrix over seeds}).
    """
    config = config or TrainConfig()
    profile = resolve_archive_profile(base_archive)
    input_hw = profile.input_shape[1:]
    widths = tuple(head_widths) if head_widths else profile.fc_head
    train_ds, test_ds = split_train_test(dataset, train_fraction, SeededRng(config.seed))

    trials = []
    pooled = {}
    for scheme in schemes:
        train_view = make_view(train_ds, scheme, input_hw)
        test_view = make_view(test_ds, scheme, input_hw)
        names = SCHEME_CLASS_NAMES[scheme]

        def one(seed, tv=train_view, sv=test_view, sc=scheme, nm=names):
            trial_config = dataclasses.replace(config, seed=seed)
            trial, result = run_transfer_trial(
                base_archive,
                profile,
                tv,
                sv,
                trial_config,
                widths,
                experiment="granularity",
                scheme=sc,
            )
            preds = predict(result.network, sv)
            return trial, confusion(preds, sv.y, len(nm), nm)

        outcomes = _map_trials([lambda s=seed: one(s) for seed in seeds], workers)
        counts = None
        for trial, cm in outcomes:
            trials.append(trial)
            counts = cm.counts if counts is None else counts + cm.counts
        pooled[scheme] = ConfusionMatrix(counts, names)
    return trials, pooled


def run_datasize(
    dataset: Dataset,
    base_archive,
    fractions=(0.10, 0.50, 1.00),
    repeats: int = 5,
    config: TrainConfig = None,
    seeds=None,
    scheme: str = "three",
    train_fraction: float = 0.70,
    head_widths=None,
    workers: int = 1,
):
    """Bootstrap study: subsample the fixed training pool at each fraction,
    train, evaluate; box statistics per fraction.

    Returns (trials, {fraction: (median, q25, q75, n)}).
    """
    config = config or TrainConfig()
    if repeats < 1:
        raise RangeError("repeats must be >= 1")
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise RangeError(f"fraction {fraction} outside (0, 1]")
    if seeds is None:
        seeds = [config.seed + r for r in range(repeats)]
    if len(seeds) < repeats:
        raise RangeError(f"need {repeats} seeds, got {len(seeds)}")
    profile = resolve_archive_profile(base_archive)
    input_hw = profile.input_shape[1:]
    widths = tuple(head_widths) if head_widths else profile.fc_head
    pool_ds, test_ds = split_train_test(dataset, train_fraction, SeededRng(config.seed))
    test_view = make_view(test_ds, scheme, input_hw)

    def one(fraction_index, fraction, repeat):
        seed = seeds[repeat]
        trial_seed = derive_seed(seed, fraction_index + 1)
        sub = bootstrap_subsample(pool_ds, fraction, SeededRng(trial_seed))
        train_view = make_view(sub, scheme, input_hw)
        trial_config = dataclasses.replace(config, seed=trial_seed)
        trial, _ = run_transfer_trial(
            base_archive,
            profile,
            train_view,
            test_view,
            trial_config,
            widths,
            experiment="datasize",
            scheme=scheme,
            fraction=fraction,
            seed_label=seed,
        )
        return fraction, trial

    jobs = [
        (lambda fi=fi, f=f, r=r: one(fi, f, r))
        for fi, f in enumerate(fractions)
        for r in range(repeats)
    ]
    outcomes = _map_trials(jobs, workers)
    trials = []
    accs = {f: [] for f in fractions}
    for fraction, trial in outcomes:
        trials.append(trial)
        accs[fraction].append(trial.test_acc)
    stats = {}
    for fraction in fractions:
        median, q25, q75 = box_stats(accs[fraction])
        stats[fraction] = (median, q25, q75, len(accs[fraction]))
    return trials, stats


RESULTS_HEADER = (
    "experiment,config_fingerprint,seed,fraction,scheme,h1,h2,"
    "lr_pre,lr_fine,frozen_blocks,test_acc,wall_secs"
)


def emit_csv(trials, path):
    """One row per trial, ordered by (config fingerprint, seed)."""
    ordered = sorted(trials, key=lambda t: (t.config_fingerprint, t.seed, t.experiment))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER.split(","))
        for t in ordered:
            writer.writerow(
                [
                    t.experiment,
                    t.config_fingerprint,
                    t.seed,
                    f"{t.fraction:g}",
                    t.scheme,
                    t.h1,
                    t.h2,
                    f"{t.lr_pre:g}",
                    f"{t.lr_fine:g}",
                    t.frozen_blocks,
                    f"{t.test_acc:.6f}",
                    f"{t.wall_secs:.3f}",
                ]
            )


def write_box_csv(stats, path):
    """``fraction,median,q25,q75,n`` rows, ordered by fraction."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "median", "q25", "q75", "n"])
        for fraction in sorted(stats):
            median, q25, q75, n = stats[fraction]
            writer.writerow(
                [f"{fraction:g}", f"{median:.6f}", f"{q25:.6f}", f"{q75:.6f}", n]
            )
