"""Cross-entropy loss, SGD, the epoch loop, and the transfer procedure.

The transfer procedure runs in three steps:

1. push every image once through the frozen conv base and cache the
   flattened features offline;
2. train a small fully connected head on the cached features with SGD;
3. attach the trained head to the base, freeze the first conv blocks, and
   fine-tune the rest at a much smaller learning rate.

Step 3 refuses to run on a head that was never trained: large gradients from
random head weights would destroy the base's learned features.

Feature-cache file format (binary, little-endian): magic "RSCF", u32
version=1, u32 fingerprint length + UTF-8 fingerprint, u32 sample count,
u32 feature width, count x u32 labels, per sample u32 id length + UTF-8 id,
then count*width f32 features.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import DataView
from .errors import (
    CompatibilityError,
    DomainError,
    FormatError,
    RangeError,
    ShapeError,
    StateError,
)
from .layers import Dense
from .network import (
    Network,
    assemble,
    build_head,
    load_weights,
    resolve_archive_profile,
    set_freeze_by_blocks,
    truncate_to_conv_base,
)
from .tensor import SeededRng

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    lr_pretrain: float = 0.001
    lr_finetune: float = 0.0005
    epochs_pretrain: int = 50
    epochs_finetune: int = 100
    batch_size: int = 32
    momentum: float = 0.0
    early_stop_train_acc: float = 0.99
    frozen_blocks_finetune: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.lr_pretrain <= 0 or self.lr_finetune <= 0:
            raise RangeError("learning rates must be strictly positive")
        if self.batch_size < 1:
            raise RangeError("batch size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise RangeError("momentum must be in [0, 1)")
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise RangeError("epoch counts must be >= 0")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float = None


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    stop_reason: str = "epochs_exhausted"

    def final_test_acc(self):
        return self.epochs[-1].test_acc if self.epochs else None

    def final_train_acc(self):
        return self.epochs[-1].train_acc if self.epochs else None


def write_report_csv(report: TrainReport, path):
    """``epoch,train_loss,train_acc,test_acc`` rows (6 decimals), then a
    trailing ``# stop=<reason>`` comment."""
    with open(path, "w", newline="") as fh:
        fh.write("epoch,train_loss,train_acc,test_acc\n")
        for e in report.epochs:
            test = "" if e.test_acc is None else f"{e.test_acc:.6f}"
            fh.write(f"{e.epoch},{e.train_loss:.6f},{e.train_acc:.6f},{test}\n")
        fh.write(f"# stop={report.stop_reason}\n")


def cross_entropy(probs, true_class: int) -> float:
    """-log p[true_class], with p floored at 1e-12 before the log."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= true_class < probs.shape[-1]:
        raise RangeError(f"class index {true_class} out of range 0..{probs.shape[-1] - 1}")
    return float(-np.log(max(probs[true_class], PROB_FLOOR)))


def fused_softmax_ce_grad(probs, true_class: int):
    """Gradient of cross-entropy w.r.t. the logits: probs - onehot."""
    grad = np.array(probs, dtype=np.float64, copy=True)
    grad[true_class] -= 1.0
    return grad


def sgd_step(net: Network, grads, lr: float, momentum: float, velocity: dict):
    """v <- momentum*v - lr*g; w <- w + v, for unfrozen layers only.

    ``grads`` is aligned with ``net.layers`` (None for parameterless layers);
    ``velocity`` is keyed by layer index and owned by the caller so it can
    persist across steps.
    """
    for i, layer in enumerate(net.layers):
        if not layer.has_params or net.freeze[i]:
            continue
        if grads[i] is None:
            raise StateError(f"no gradient available for layer '{layer.name}'")
        dw, db = grads[i]
        if dw.shape != layer.W.shape or db.shape != layer.b.shape:
            raise ShapeError(f"gradient shape mismatch for layer '{layer.name}'")
        vw, vb = velocity.get(i, (np.zeros_like(layer.W), np.zeros_like(layer.b)))
        vw = momentum * vw - lr * dw
        vb = momentum * vb - lr * db
        velocity[i] = (vw, vb)
        layer.W += vw
        layer.b += vb


def _output_classes(net: Network) -> int:
    dense = [l for l in net.layers if isinstance(l, Dense)]
    if not dense:
        raise StateError("network has no dense output layer")
    return dense[-1].out_units


def evaluate_accuracy(net: Network, view: DataView, chunk: int = 128) -> float:
    if len(view) == 0:
        raise DomainError("cannot evaluate on an empty view")
    correct = 0
    for start in range(0, len(view), chunk):
        probs = net.forward(view.x[start : start + chunk])
        correct += int((probs.argmax(axis=-1) == view.y[start : start + chunk]).sum())
    return correct / len(view)


def predict(net: Network, view: DataView, chunk: int = 128) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lowest class index."""
    parts = [
        net.forward(view.x[start : start + chunk]).argmax(axis=-1)
        for start in range(0, len(view), chunk)
    ]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def train_epochs(
    net: Network,
    train_view: DataView,
    config: TrainConfig,
    lr: float,
    max_epochs: int,
    test_view: DataView = None,
    shuffle_seed: int = None,
) -> TrainReport:
    """SGD over seeded shuffled mini-batches.

    Per batch the loss is the mean cross-entropy, so gradients are means and
    the learning rate is comparable across batch sizes.  Training accuracy is
    accumulated from the forward passes used for the updates; early stop is
    checked only at epoch boundaries and only against training accuracy.
    """
    n = len(train_view)
    if n == 0:
        raise DomainError("cannot train on an empty dataset")
    num_classes = _output_classes(net)
    if train_view.y.min() < 0 or train_view.y.max() >= num_classes:
        raise RangeError(f"labels must be in 0..{num_classes - 1}")
    shuffle_rng = SeededRng(config.seed if shuffle_seed is None else shuffle_seed)
    velocity = {}
    report = TrainReport()
    for epoch in range(1, max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = train_view.x[idx]
            yb = train_view.y[idx]
            probs = net.forward(xb)
            rows = np.arange(len(idx))
            loss_sum += float(-np.log(np.maximum(probs[rows, yb], PROB_FLOOR)).sum())
            correct += int((probs.argmax(axis=-1) == yb).sum())
            grad = probs.copy()
            grad[rows, yb] -= 1.0
            grad /= len(idx)
            net.backward_from_logits(grad)
            sgd_step(net, net.collect_grads(), lr, config.momentum, velocity)
        train_acc = correct / n
        test_acc = (
            evaluate_accuracy(net, test_view)
            if test_view is not None and len(test_view)
            else None
        )
        report.epochs.append(EpochStats(epoch, loss_sum / n, train_acc, test_acc))
        if train_acc >= config.early_stop_train_acc:
            report.stop_reason = "early_stop"
            break
    return report


# ---------------------------------------------------------------------------
# offline feature cache

CACHE_MAGIC = b"RSCF"


@dataclass
class FeatureCache:
    features: np.ndarray  # (N, width) float64
    labels: np.ndarray  # (N,) int64
    ids: tuple
    fingerprint: str  # of the conv base that produced the features

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]


def extract_features(base: Network, view: DataView, workers: int = 1) -> FeatureCache:
    """One flattened feature vector per image, in dataset order.

    Samples are pushed through the base one at a time, so serial and parallel
    extraction produce bit-identical caches.
    """
    if not base.base_only:
        raise StateError("feature extraction needs a conv-only base (truncate first)")
    width = base.profile.flatten_width()
    fingerprint = base.content_fingerprint()
    n = len(view)
    if n == 0:
        return FeatureCache(
            np.zeros((0, width)), np.zeros(0, dtype=np.int64), (), fingerprint
        )

    def one(i: int):
        return base.forward(view.x[i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            feats = list(pool.map(one, range(n)))
    else:
        feats = [one(i) for i in range(n)]
    return FeatureCache(np.stack(feats), view.y.copy(), view.ids, fingerprint)


def save_feature_cache(cache: FeatureCache, path):
    fp = cache.fingerprint.encode()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<I", len(fp)))
        fh.write(fp)
        fh.write(struct.pack("<II", len(cache), cache.width))
        fh.write(cache.labels.astype("<u4").tobytes())
        for item_id in cache.ids:
            raw = item_id.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(cache.features, dtype="<f4").tobytes())


def load_feature_cache(path) -> FeatureCache:
    with open(path, "rb") as fh:
        blob = fh.read()

    pos = 0

    def take(k):
        nonlocal pos
        if pos + k > len(blob):
            raise FormatError(f"{path}: truncated feature cache")
        out = blob[pos : pos + k]
        pos += k
        return out

    if take(4) != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic, not a feature cache")
    if struct.unpack("<I", take(4))[0] != 1:
        raise FormatError(f"{path}: unsupported cache version")
    fp = take(struct.unpack("<I", take(4))[0]).decode()
    count, width = struct.unpack("<II", take(8))
    labels = np.frombuffer(take(4 * count), dtype="<u4").astype(np.int64)
    ids = tuple(take(struct.unpack("<I", take(4))[0]).decode() for _ in range(count))
    features = (
        np.frombuffer(take(4 * count * width), dtype="<f4")
        .astype(np.float64)
        .reshape(count, width)
    )
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after features")
    return FeatureCache(features, labels, ids, fp)


def _cache_view(cache: FeatureCache) -> DataView:
    return DataView(cache.features, cache.labels, cache.ids, ())


def train_head_on_cache(
    cache: FeatureCache,
    head_widths,
    num_classes: int,
    config: TrainConfig,
    test_cache: FeatureCache = None,
):
    """Step 2: train the classifier head on cached features.

    With equal seeds and batch order this matches training the same head
    attached to the frozen base, epoch for epoch.
    """
    if len(cache) == 0:
        raise DomainError("cannot train a head on an empty feature cache")
    head = build_head(cache.width, head_widths, num_classes, SeededRng(config.seed))
    test_view = _cache_view(test_cache) if test_cache is not None and len(test_cache) else None
    report = train_epochs(
        head,
        _cache_view(cache),
        config,
        config.lr_pretrain,
        config.epochs_pretrain,
        test_view=test_view,
        shuffle_seed=config.seed,
    )
    return head, report


def fine_tune(net: Network, train_view: DataView, config: TrainConfig, test_view=None) -> TrainReport:
    """Step 3: slow-rate training of the unfrozen tail.

    Requires a head installed by ``assemble`` (i.e. a trained one); the first
    ``frozen_blocks_finetune`` conv blocks stay bit-identical.
    """
    if not net.head_trained:
        raise StateError(
            "fine-tuning requires a trained head; train the head on cached "
            "features and assemble it first"
        )
    set_freeze_by_blocks(net, config.frozen_blocks_finetune)
    return train_epochs(
        net,
        train_view,
        config,
        config.lr_finetune,
        config.epochs_finetune,
        test_view=test_view,
        shuffle_seed=config.seed + 1,
    )


@dataclass
class TransferResult:
    network: Network
    head_report: TrainReport
    finetune_report: TrainReport

    def head_only_test_acc(self):
        return self.head_report.final_test_acc()

    def final_test_acc(self):
        return self.finetune_report.final_test_acc()


def transfer_pipeline(
    base_archive,
    train_view: DataView,
    test_view: DataView = None,
    config: TrainConfig = None,
    head_widths=None,
    profile=None,
    train_cache: FeatureCache = None,
    workers: int = 1,
) -> TransferResult:
    """Steps 1-3 end to end, starting from a saved pre-trained network.

    ``train_cache`` short-circuits step 1 with previously extracted features;
    its fingerprint must match the base loaded from the archive.
    """
    config = config or TrainConfig()
    profile = profile or resolve_archive_profile(base_archive)
    source = load_weights(base_archive, profile)
    base = truncate_to_conv_base(source)
    if train_cache is None:
        train_cache = extract_features(base, train_view, workers=workers)
    elif train_cache.fingerprint != base.content_fingerprint():
        raise CompatibilityError(
            "feature cache was produced by a different base "
            f"({train_cache.fingerprint[:12]}... vs {base.content_fingerprint()[:12]}...)"
        )
    test_cache = (
        extract_features(base, test_view, workers=workers)
        if test_view is not None and len(test_view)
        else None
    )
    num_classes = len(train_view.class_names) or int(train_view.y.max()) + 1
    widths = tuple(head_widths) if head_widths else profile.fc_head
    head, head_report = train_head_on_cache(
        train_cache, widths, num_classes, config, test_cache
    )
    net = assemble(base, head)
    ft_report = fine_tune(net, train_view, config, test_view)
    return TransferResult(net, head_report, ft_report)
