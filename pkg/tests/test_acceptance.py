"""Acceptance gate.

One test per criterion, in order; a summary block at the end of the pytest
run prints one PASS/FAIL line per criterion (see conftest.py).  Criteria 9-11
train real pipelines on synthetic data and take a few minutes each; they are
marked slow but run by default.
"""


import numpy as np
import numpy.testing as npt
import pytest

from rscnet.cli import main as cli_main
from rscnet.data import (
    FiveClassLabel,
    SyntheticConfig,
    generate_synthetic,
    make_view,
    map_label,
    split_train_test,
)
from rscnet.experiments import GridSpec, run_datasize, run_sensitivity
from rscnet.layers import Conv2D, Dense, MaxPool2, ReLU, Softmax, conv_forward_naive, finite_difference_check, parameter_count
from rscnet.metrics import accuracy_from_class_rates
from rscnet.network import (
    assemble,
    build_head,
    build_network,
    mini_32,
    save_weights,
    truncate_to_conv_base,
    vgg16_150,
)
from rscnet.tensor import SeededRng
from rscnet.training import (
    TrainConfig,
    cross_entropy,
    extract_features,
    fine_tune,
    fused_softmax_ce_grad,
    train_epochs,
    train_head_on_cache,
    transfer_pipeline,
)

# Frozen experiment setups.  The source task differs from the target task in
# palette, snow side, and glare, so the pre-trained base transfers but does
# not trivially solve the target; generator knobs were calibrated so the
# head-only pipeline lands near 0.9 with clear headroom for fine-tuning.
SOURCE_CONFIG = SyntheticConfig(
    seed=101,
    noise_amplitude=18.0,
    snow_side="right",
    sky_rgb=(152.0, 152.0, 160.0),
    road_rgb=(86.0, 90.0, 96.0),
    snow_rgb=(236.0, 238.0, 242.0),
)
TARGET_CONFIG = SyntheticConfig(
    seed=202, noise_amplitude=22.0, coverage_jitter=0.06, glare_count=6
)
DATASIZE_CONFIG = SyntheticConfig(
    seed=303, noise_amplitude=22.0, coverage_jitter=0.02, glare_count=6
)


@pytest.fixture(scope="module")
def source_archive(tmp_path_factory):
    """Surrogate pre-trained base: five-class source task, 12 epochs."""
    dataset = generate_synthetic(SOURCE_CONFIG, 150)
    view = make_view(dataset, "five", (32, 32))
    net = build_network(mini_32(5), SeededRng(7))
    train_epochs(net, view, TrainConfig(seed=7), lr=0.001, max_epochs=12)
    path = tmp_path_factory.mktemp("acceptance") / "source_base.rscw"
    save_weights(net, path)
    return path


@pytest.fixture(scope="module")
def target_dataset():
    return generate_synthetic(TARGET_CONFIG, 180)  # 900 images


def test_c01_parameter_count_anchors():
    first = parameter_count(Conv2D(3, 64))
    biggest = parameter_count(Conv2D(512, 512))
    assert first == 1792
    assert biggest == 2359808
    print(f"criterion 1: conv(3->64)={first}, conv(512->512)={biggest}")


def test_c02_spatial_chain_anchor():
    profile = vgg16_150(3)
    trace = profile.spatial_trace()
    assert trace == [150, 75, 37, 18, 9, 4]
    assert profile.flatten_width() == 8192
    print(f"criterion 2: trace={trace}, flatten={profile.flatten_width()}")


def test_c03_gradient_correctness():
    tolerance = 1e-6
    worst = {}

    errs = []
    for trial in range(100):
        rng = SeededRng(1000 + trial)
        conv = Conv2D(1 + trial % 3, 1 + (trial // 3) % 3)
        conv.W = rng.uniform(-1, 1, conv.W.shape)
        conv.b = rng.uniform(-1, 1, conv.b.shape)
        h = 3 + trial % 4
        x = rng.uniform(-1, 1, (conv.in_ch, h, h))
        errs.append(finite_difference_check(conv, x, seed=trial))
    worst["conv2d"] = max(errs)

    errs = []
    for trial in range(100):
        rng = SeededRng(2000 + trial)
        dense = Dense(2 + trial % 5, 2 + (trial // 5) % 5)
        dense.W = rng.uniform(-1, 1, dense.W.shape)
        dense.b = rng.uniform(-1, 1, dense.b.shape)
        errs.append(finite_difference_check(dense, rng.uniform(-1, 1, (dense.in_units,)), seed=trial))
    worst["dense"] = max(errs)

    errs = []
    for trial in range(100):
        rng = SeededRng(3000 + trial)
        x = rng.uniform(-1, 1, (2 + trial % 3, 8))
        x = np.where(np.abs(x) < 0.1, x + 0.25, x)  # keep clear of the kink
        errs.append(finite_difference_check(ReLU(), x, seed=trial))
    worst["relu"] = max(errs)

    errs = []
    for trial in range(100):
        rng = SeededRng(4000 + trial)
        x = rng.uniform(-1, 1, (1 + trial % 2, 4 + trial % 3, 4 + (trial // 3) % 3))
        errs.append(finite_difference_check(MaxPool2(), x, seed=trial))
    worst["maxpool"] = max(errs)

    errs = []
    h = 1e-6
    for trial in range(100):
        rng = SeededRng(5000 + trial)
        logits = rng.uniform(-3, 3, 3 + trial % 6)
        true_class = trial % len(logits)
        probs = Softmax().forward(logits)
        analytic = fused_softmax_ce_grad(probs, true_class)
        for i in range(len(logits)):
            bumped = logits.copy()
            bumped[i] += h
            fp = cross_entropy(Softmax().forward(bumped), true_class)
            bumped[i] -= 2 * h
            fm = cross_entropy(Softmax().forward(bumped), true_class)
            numeric = (fp - fm) / (2 * h)
            errs.append(abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    worst["softmax_ce"] = max(errs)

    assert all(err < tolerance for err in worst.values()), worst
    print("criterion 3: max rel errors " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items()))


def test_c04_conv_oracle_equivalence():
    rng = SeededRng(77)
    worst = 0.0
    for _ in range(50):
        in_ch = 1 + int(rng.uniform(0, 4))
        out_ch = 1 + int(rng.uniform(0, 4))
        h = 2 + int(rng.uniform(0, 15))
        w = 2 + int(rng.uniform(0, 15))
        conv = Conv2D(in_ch, out_ch)
        conv.W = rng.uniform(-1, 1, conv.W.shape)
        conv.b = rng.uniform(-1, 1, conv.b.shape)
        x = rng.uniform(-1, 1, (in_ch, h, w))
        diff = np.abs(conv.forward(x) - conv_forward_naive(conv.W, conv.b, x)).max()
        worst = max(worst, diff)
    assert worst < 1e-9
    print(f"criterion 4: max |im2col - naive| = {worst:.2e} over 50 trials")


def test_c05_freeze_contract():
    dataset = generate_synthetic(SyntheticConfig(seed=55), 8)
    view = make_view(dataset, "three", (32, 32))
    base = truncate_to_conv_base(build_network(mini_32(3), SeededRng(5)))
    head = build_head(32, (64, 32), 3, SeededRng(6))
    net = assemble(base, head)
    frozen_names = [
        layer.name for layer in net.param_layers() if layer.name.startswith(("block1_", "block2_"))
    ]
    before = {l.name: (l.W.copy(), l.b.copy()) for l in net.param_layers()}
    config = TrainConfig(seed=9, epochs_finetune=5, frozen_blocks_finetune=2,
                         early_stop_train_acc=1.01)
    report = fine_tune(net, view, config)
    assert len(report.epochs) == 5
    after = {l.name: l for l in net.param_layers()}
    for name in frozen_names:
        npt.assert_array_equal(before[name][0], after[name].W)
        npt.assert_array_equal(before[name][1], after[name].b)
    moved = [n for n in after if not np.array_equal(before[n][0], after[n].W)]
    assert moved  # the unfrozen tail actually trained
    print(f"criterion 5: {frozen_names} bit-identical after 5 epochs; {len(moved)} layers moved")


def test_c06_cache_equivalence():
    dataset = generate_synthetic(SyntheticConfig(seed=66), 12)  # 60 images
    view = make_view(dataset, "three", (32, 32))
    config = TrainConfig(seed=3, epochs_pretrain=12, early_stop_train_acc=1.01)

    base_a = truncate_to_conv_base(build_network(mini_32(3), SeededRng(8)))
    cache = extract_features(base_a, view)
    _, report_cached = train_head_on_cache(cache, (64, 32), 3, config)

    base_b = truncate_to_conv_base(build_network(mini_32(3), SeededRng(8)))
    attached = assemble(base_b, build_head(32, (64, 32), 3, SeededRng(config.seed)))
    from rscnet.network import set_freeze_by_blocks

    set_freeze_by_blocks(attached, 5)
    report_attached = train_epochs(
        attached, view, config, config.lr_pretrain, config.epochs_pretrain,
        shuffle_seed=config.seed,
    )

    assert len(report_cached.epochs) == len(report_attached.epochs) == 12
    gaps = [
        abs(a.train_loss - b.train_loss)
        for a, b in zip(report_cached.epochs, report_attached.epochs)
    ]
    assert max(gaps) < 1e-9
    print(f"criterion 6: max per-epoch loss gap {max(gaps):.2e} over 12 epochs")


def test_c07_overall_accuracy_identity():
    acc = accuracy_from_class_rates([0.5539, 0.4461], [0.0487, 0.1475])
    assert abs(acc - 0.9072) < 0.0005
    print(f"criterion 7: implied overall accuracy {acc:.6f}")


def test_c08_label_scheme_mapping():
    expected_three = {0: 0, 1: 1, 2: 1, 3: 1, 4: 2}
    expected_two = {0: 0, 1: 1, 2: 1, 3: 1, 4: 1}
    for label in FiveClassLabel:
        assert map_label(label, "five") == int(label)
        assert map_label(label, "three") == expected_three[int(label)]
        assert map_label(label, "two") == expected_two[int(label)]
        merged = 0 if map_label(label, "three") == 0 else 1
        assert merged == map_label(label, "two")
    print("criterion 8: all 5 labels map per the three- and two-class scheme; composition holds")


@pytest.mark.slow
def test_c09_end_to_end_transfer(source_archive, target_dataset):
    train_ds, test_ds = split_train_test(target_dataset, 600 / 900, SeededRng(1))
    train_view = make_view(train_ds, "three", (32, 32))
    test_view = make_view(test_ds, "three", (32, 32))
    assert (len(train_view), len(test_view)) == (600, 300)

    head_accs, fine_accs = [], []
    for seed in range(1, 6):
        result = transfer_pipeline(
            source_archive, train_view, test_view, TrainConfig(seed=seed)
        )
        head_accs.append(result.head_only_test_acc())
        fine_accs.append(result.final_test_acc())
    head_median = float(np.median(head_accs))
    fine_median = float(np.median(fine_accs))
    assert fine_median >= 0.90
    assert fine_median >= head_median
    print(
        f"criterion 9: fine-tuned median {fine_median:.4f} (>= 0.90), "
        f"head-only median {head_median:.4f}; per-seed fine "
        f"{['%.3f' % a for a in fine_accs]}"
    )


@pytest.mark.slow
def test_c10_datasize_trend(source_archive):
    dataset = generate_synthetic(DATASIZE_CONFIG, 80)  # pool 280 / test 120
    trials, stats = run_datasize(
        dataset,
        source_archive,
        fractions=(0.10, 0.50, 1.00),
        repeats=5,
        config=TrainConfig(seed=0),
        seeds=[1, 2, 3, 4, 5],
        scheme="three",
    )
    medians = [stats[f][0] for f in (0.10, 0.50, 1.00)]
    iqr_small = stats[0.10][2] - stats[0.10][1]
    iqr_full = stats[1.00][2] - stats[1.00][1]
    assert medians[0] <= medians[1] <= medians[2]
    assert iqr_full <= iqr_small
    print(
        f"criterion 10: medians {['%.4f' % m for m in medians]} non-decreasing; "
        f"IQR 10%={iqr_small:.4f} >= IQR 100%={iqr_full:.4f}"
    )


@pytest.mark.slow
def test_c11_freeze_depth_trend(source_archive, target_dataset):
    grid = GridSpec(
        fc_structures=((64, 32),),
        pretrain_lrs=(0.001,),
        finetune_lrs=(0.0005,),
        freeze_depths=(4, 3, 2),  # fine-tune the last 1, 2, 3 blocks
    )
    config = TrainConfig(
        seed=0, epochs_pretrain=8, epochs_finetune=30, early_stop_train_acc=1.01
    )
    trials = run_sensitivity(grid, source_archive, target_dataset, [1, 2, 3], config)
    depth_trials = [t for t in trials if t.experiment == "sensitivity_freeze_depth"]
    acc_medians = []
    wall_medians = []
    for frozen in (4, 3, 2):
        sub = [t for t in depth_trials if t.frozen_blocks == frozen]
        assert len(sub) == 3
        acc_medians.append(float(np.median([t.test_acc for t in sub])))
        wall_medians.append(float(np.median([t.wall_secs for t in sub])))
    assert acc_medians[0] <= acc_medians[1] <= acc_medians[2]
    assert wall_medians[0] < wall_medians[1] < wall_medians[2]
    print(
        f"criterion 11: accuracy medians {['%.4f' % a for a in acc_medians]} "
        f"non-decreasing, wall medians {['%.2f' % w for w in wall_medians]}s "
        f"strictly increasing (fine-tune last 1 -> 3 blocks)"
    )


def _files_equal(a, b):
    return a.read_bytes() == b.read_bytes()


def _results_equal_modulo_walltime(a, b):
    """Results CSVs compare equal once the measured wall_secs column is
    dropped; timing is the one legitimately non-reproducible field."""
    rows_a = a.read_text().strip().splitlines()
    rows_b = b.read_text().strip().splitlines()
    strip = lambda rows: [",".join(r.split(",")[:-1]) for r in rows]
    return strip(rows_a) == strip(rows_b)


@pytest.mark.slow
def test_c12_cli_determinism(tmp_path):
    def run(args):
        assert cli_main(args) == 0

    outs = []
    for tag in ("one", "two"):
        root = tmp_path / tag
        root.mkdir()
        run(["gen-data", "--out", str(root / "target"), "--per-class", "6",
             "--size", "32", "--seed", "1", "--glare", "2"])
        run(["gen-data", "--out", str(root / "source"), "--per-class", "6",
             "--size", "32", "--seed", "2", "--palette", "winter-b",
             "--snow-side", "right"])
        run(["pretrain", "--data", str(root / "source"), "--profile", "mini_32",
             "--out", str(root / "base.rscw"), "--epochs", "2", "--seed", "3"])
        run(["transfer", "--base", str(root / "base.rscw"),
             "--data", str(root / "target"), "--scheme", "three",
             "--epochs-pre", "3", "--epochs-fine", "3", "--seed", "4",
             "--out", str(root / "model.rscw"), "--report", str(root / "report.csv")])
        run(["eval", "--model", str(root / "model.rscw"),
             "--data", str(root / "target"), "--scheme", "three",
             "--metrics", str(root / "metrics.csv")])
        run(["experiment", "--kind", "datasize", "--data", str(root / "target"),
             "--base", str(root / "base.rscw"), "--out", str(root / "results.csv"),
             "--seeds", "1", "--fractions", "0.5,1.0",
             "--epochs-pre", "1", "--epochs-fine", "1"])
        outs.append(root)

    a, b = outs
    identical = [
        "target/manifest.csv",
        "source/manifest.csv",
        "base.rscw",
        "model.rscw",
        "report.csv",
        "report_curves.png",
        "metrics.csv",
        "metrics_confusion.png",
        "results_box.csv",
        "results_box.png",
    ]
    for rel in identical:
        assert _files_equal(a / rel, b / rel), f"{rel} differs between reruns"
    for ppm in sorted((a / "target" / "images").iterdir()):
        assert _files_equal(ppm, b / "target" / "images" / ppm.name)
    assert _results_equal_modulo_walltime(a / "results.csv", b / "results.csv")
    print(f"criterion 12: {len(identical)} artifact kinds byte-identical across reruns")
