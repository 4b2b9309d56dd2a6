"""Matplotlib renderings of the report CSVs: training curves, sensitivity
panels, granularity bars, data-size box plots, confusion heatmaps.

All figures are written as PNG files through the Agg backend, so rendering
needs no display and repeated runs produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 120


def _save(fig, path):
    fig.savefig(path, dpi=_DPI, format="png")
    plt.close(fig)
    return path


def save_training_curves(head_report, finetune_report, path):
    """Accuracy and loss per epoch for the head-training and fine-tune phases."""
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.5))
    offset = 0
    for label, report, color in [
        ("head training", head_report, "tab:blue"),
        ("fine-tuning", finetune_report, "tab:red"),
    ]:
        if report is None or not report.epochs:
            continue
        epochs = [offset + e.epoch for e in report.epochs]
        ax_acc.plot(epochs, [e.train_acc for e in report.epochs], color=color,
                    label=f"{label} (train)")
        tests = [(x, e.test_acc) for x, e in zip(epochs, report.epochs) if e.test_acc is not None]
        if tests:
            ax_acc.plot(*zip(*tests), color=color, linestyle="--", label=f"{label} (test)")
        ax_loss.plot(epochs, [e.train_loss for e in report.epochs], color=color, label=label)
        offset = epochs[-1]
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.legend(fontsize=7)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_loss.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def save_confusion_heatmap(cm, path):
    counts = np.asarray(cm.counts, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(cm.class_names),) * 2)
    shares = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
    ax.imshow(shares, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, f"{int(counts[i, j])}", ha="center", va="center",
                    color="black" if shares[i, j] < 0.6 else "white", fontsize=8)
    ax.set_xticks(range(len(cm.class_names)), cm.class_names, rotation=45,
                  ha="right", fontsize=7)
    ax.set_yticks(range(len(cm.class_names)), cm.class_names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    fig.tight_layout()
    return _save(fig, path)


def _panel(ax, trials, key, title, categorical=False):
    knobs = sorted({key(t) for t in trials})
    medians = []
    for knob in knobs:
        accs = [t.test_acc for t in trials if key(t) == knob]
        medians.append(float(np.median(accs)))
        xs = [str(knob)] * len(accs) if categorical else [knob] * len(accs)
        ax.plot(xs, accs, "o", color="tab:gray", markersize=3, alpha=0.6)
    ax.plot([str(k) for k in knobs] if categorical else knobs,
            medians, "-o", color="tab:blue", markersize=4)
    ax.set_title(title, fontsize=8)
    ax.set_ylabel("test accuracy", fontsize=7)
    ax.tick_params(labelsize=7)
    if not categorical:
        ax.set_xscale("log")


def save_sensitivity_panels(trials, path):
    """One panel per sweep stage, median accuracy over the swept knob."""
    stages = [
        ("sensitivity_structure", lambda t: f"{t.h1}-{t.h2}", "head structure", True),
        ("sensitivity_lr_pretrain", lambda t: t.lr_pre, "pre-training learning rate", False),
        ("sensitivity_lr_finetune", lambda t: t.lr_fine, "fine-tuning learning rate", False),
        ("sensitivity_freeze_depth", lambda t: t.frozen_blocks, "frozen blocks", True),
    ]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    for ax, (stage, key, title, categorical) in zip(axes.ravel(), stages):
        stage_trials = [t for t in trials if t.experiment == stage]
        if stage_trials:
            _panel(ax, stage_trials, key, title, categorical)
        else:
            ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def save_granularity_bars(accuracy_by_scheme, path):
    schemes = list(accuracy_by_scheme)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(schemes, [accuracy_by_scheme[s] for s in schemes], color="tab:blue", width=0.5)
    for i, scheme in enumerate(schemes):
        ax.text(i, accuracy_by_scheme[scheme] + 0.01,
                f"{accuracy_by_scheme[scheme]:.3f}", ha="center", fontsize=8)
    ax.set_ylim(0.0, 1.1)
    ax.set_ylabel("test accuracy")
    ax.set_xlabel("label scheme")
    fig.tight_layout()
    return _save(fig, path)


def save_datasize_box(accs_by_fraction, path):
    """Box plot of test accuracy against training-data fraction."""
    fractions = sorted(accs_by_fraction)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.boxplot(
        [accs_by_fraction[f] for f in fractions],
        tick_labels=[f"{f:g}" for f in fractions],
        whis=(0, 100),
    )
    ax.set_xlabel("fraction of the training pool")
    ax.set_ylabel("test accuracy")
    fig.tight_layout()
    return _save(fig, path)
