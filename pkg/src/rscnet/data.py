"""Image ingestion, preprocessing, label schemes, splits, and synthetic data.

Disk formats:

* Images are binary PPM (``P6``, maxval 255) or raw tensors (``.rsct``:
  magic "RSCT", u32 version=1, u8 ndim, ndim x u32 dims LE, f32 LE payload).
* A dataset manifest is a CSV ``id,path,five_class`` with five_class in
  {bare, lt25, p25to50, p50to75, gt75}; paths are relative to the manifest.

In memory an image is a float64 (3, H, W) tensor with values in [0, 255].
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DomainError, FileError, FormatError, RangeError, ShapeError
from .tensor import SeededRng, Tensor


class FiveClassLabel(IntEnum):
    """Lateral snow coverage classes, ordered by increasing coverage."""

    BARE = 0
    LT25 = 1
    P25TO50 = 2
    P50TO75 = 3
    GT75 = 4


FIVE_CLASS_NAMES = ("bare", "lt25", "p25to50", "p50to75", "gt75")

SCHEME_CLASS_NAMES = {
    "five": FIVE_CLASS_NAMES,
    "three": ("bare", "partly_snow_covered", "fully_snow_covered"),
    "two": ("bare", "with_snow_covered"),
}

_THREE_MAP = {
    FiveClassLabel.BARE: 0,
    FiveClassLabel.LT25: 1,
    FiveClassLabel.P25TO50: 1,
    FiveClassLabel.P50TO75: 1,
    FiveClassLabel.GT75: 2,
}


def map_label(label: FiveClassLabel, scheme: str) -> int:
    """Coarse class index of a five-class label under a scheme.

    three: bare -> bare; lt25/25to50/50to75 -> partly snow covered;
    gt75 -> fully snow covered.  two: bare -> bare; everything else ->
    with snow covered.
    """
    label = FiveClassLabel(label)
    if scheme == "five":
        return int(label)
    if scheme == "three":
        return _THREE_MAP[label]
    if scheme == "two":
        return 0 if label is FiveClassLabel.BARE else 1
    raise DomainError(f"unknown label scheme '{scheme}'")


def scheme_classes(scheme: str) -> int:
    return len(SCHEME_CLASS_NAMES[scheme])


@dataclass
class DatasetItem:
    image: Tensor  # (3, H, W), values in [0, 255]
    label: FiveClassLabel
    id: str


@dataclass
class Dataset:
    items: list = field(default_factory=list)

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise DomainError("dataset ids are not unique")

    def __len__(self):
        return len(self.items)

    def ids(self):
        return [it.id for it in self.items]


@dataclass
class DataView:
    """Preprocessed, scheme-mapped tensors ready for training."""

    x: Tensor  # (N, 3, H, W)
    y: np.ndarray  # (N,) int64
    ids: tuple
    class_names: tuple

    def __len__(self):
        return len(self.y)


def make_view(dataset: Dataset, scheme: str, input_hw) -> DataView:
    """Preprocess every image to the given input size and map its label."""
    h, w = input_hw
    names = SCHEME_CLASS_NAMES[scheme]
    if len(dataset) == 0:
        return DataView(np.zeros((0, 3, h, w)), np.zeros(0, dtype=np.int64), (), names)
    x = np.stack([preprocess(it.image, h, w) for it in dataset.items])
    y = np.array([map_label(it.label, scheme) for it in dataset.items], dtype=np.int64)
    return DataView(x, y, tuple(dataset.ids()), names)


# ---------------------------------------------------------------------------
# image files


def save_ppm(img: Tensor, path):
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"PPM writer expects (3, H, W), got {list(img.shape)}")
    _, h, w = img.shape
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def _ppm_tokens(blob: bytes, count: int, start: int):
    """Read `count` whitespace-separated header tokens, honoring # comments."""
    tokens = []
    i = start
    while len(tokens) < count:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated PPM header")
        tokens.append(blob[i:j])
        i = j
    return tokens, i + 1  # single whitespace after maxval separates the raster


def load_ppm(path) -> Tensor:
    """Read a binary 8-bit PPM into a (3, H, W) float64 tensor in [0, 255]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (missing P6 magic)")
    try:
        (w_tok, h_tok, maxval_tok), pos = _ppm_tokens(blob, 3, 2)
        w, h, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    except (ValueError, FormatError):
        raise FormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    raster = blob[pos : pos + need]
    if len(raster) != need:
        raise FormatError(f"{path}: raster truncated ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64)


RSCT_MAGIC = b"RSCT"


def save_tensor(arr: Tensor, path):
    with open(path, "wb") as fh:
        fh.write(RSCT_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RSCT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a raw tensor file")
    if len(blob) < 9:
        raise FormatError(f"{path}: truncated tensor header")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != 1:
        raise FormatError(f"{path}: unsupported tensor version {version}")
    ndim = blob[8]
    pos = 9
    if len(blob) < pos + 4 * ndim:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{ndim}I", blob[pos : pos + 4 * ndim])
    pos += 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(blob) != pos + 4 * count:
        raise FormatError(f"{path}: payload size mismatch")
    return np.frombuffer(blob[pos:], dtype="<f4").astype(np.float64).reshape(dims)


# ---------------------------------------------------------------------------
# preprocessing


def resize_bilinear(img: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with corner-aligned sampling.

    Uses the lerp form a + t*(b - a), so constant images stay exactly
    constant.
    """
    if img.ndim != 3:
        raise ShapeError(f"resize expects (C, H, W), got {list(img.shape)}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be >= 1, got {out_h}x{out_w}")
    _, h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()

    def grid(n_in, n_out):
        if n_out == 1:
            pos = np.array([0.5 * (n_in - 1)])
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, ty = grid(h, out_h)
    x0, x1, tx = grid(w, out_w)
    rows0 = img[:, y0, :]
    rows1 = img[:, y1, :]
    top = rows0[:, :, x0] + tx * (rows0[:, :, x1] - rows0[:, :, x0])
    bot = rows1[:, :, x0] + tx * (rows1[:, :, x1] - rows1[:, :, x0])
    return top + ty[None, :, None] * (bot - top)


def preprocess(img: Tensor, out_h: int = 150, out_w: int = 150) -> Tensor:
    """Resize to the network input size, then zero each channel's mean.

    The mean is per image and per channel, so the output channel means are 0
    regardless of content.
    """
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"preprocess expects a 3-channel image, got {list(img.shape)}")
    resized = resize_bilinear(img, out_h, out_w)
    return resized - resized.mean(axis=(1, 2), keepdims=True)


# ---------------------------------------------------------------------------
# splitting


def split_train_test(dataset: Dataset, train_fraction: float = 0.70, rng: SeededRng = None):
    """Seeded shuffle split; train gets round(fraction * N) items.

    The two parts are disjoint and together cover the dataset.
    """
    if len(dataset) == 0:
        raise DomainError("cannot split an empty dataset")
    if rng is None:
        rng = SeededRng(0)
    perm = rng.permutation(len(dataset))
    k = int(round(train_fraction * len(dataset)))
    train = Dataset([dataset.items[i] for i in perm[:k]])
    test = Dataset([dataset.items[i] for i in perm[k:]])
    return train, test


def bootstrap_subsample(train: Dataset, fraction: float, rng: SeededRng) -> Dataset:
    """Without-replacement draw of round(fraction * N) items."""
    if not 0.0 < fraction <= 1.0:
        raise RangeError(f"subsample fraction must be in (0, 1], got {fraction}")
    perm = rng.permutation(len(train))
    k = int(round(fraction * len(train)))
    return Dataset([train.items[i] for i in perm[:k]])


# ---------------------------------------------------------------------------
# synthetic road scenes

# A pixel counts as snow when every channel clears this value.  Generator
# colors and noise are constrained so road/sky pixels can never reach it.
SNOW_THRESHOLD = 200.0

COVERAGE_BANDS = {
    FiveClassLabel.BARE: (0.0, 0.0),
    FiveClassLabel.LT25: (0.02, 0.25),
    FiveClassLabel.P25TO50: (0.25, 0.50),
    FiveClassLabel.P50TO75: (0.50, 0.75),
    FiveClassLabel.GT75: (0.75, 1.0),
}


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the procedural road-scene generator.

    Scenes are a sky band over an asphalt band with two darker wheel tracks;
    snow is a near-white strip growing laterally from the left road edge to
    cover a fraction of the road width.  That fraction decides the label, so
    labels are exact by construction.

    Two knobs control task difficulty: ``coverage_jitter`` lets the rendered
    strip deviate from the labeled fraction, blurring class boundaries the
    way borderline road conditions do, and ``glare_count`` paints up to that
    many near-white patches into the sky, so white mass alone stops being a
    reliable cue.  Glare never touches the road band.
    """

    size: int = 32
    sky_rgb: tuple = (136.0, 168.0, 205.0)
    road_rgb: tuple = (98.0, 98.0, 104.0)
    snow_rgb: tuple = (242.0, 244.0, 248.0)
    wheel_track_delta: float = 26.0
    color_jitter: float = 8.0
    horizon: float = 0.42
    horizon_jitter: float = 0.06
    coverage_jitter: float = 0.0
    glare_count: int = 0
    snow_side: str = "left"  # road edge the snow strip grows from
    noise_amplitude: float = 18.0
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise RangeError(f"image size must be >= 8, got {self.size}")
        if self.snow_side not in ("left", "right"):
            raise RangeError(f"snow side must be 'left' or 'right', got '{self.snow_side}'")
        if self.noise_amplitude < 0:
            raise RangeError("noise amplitude must be >= 0")
        if not 0.0 <= self.coverage_jitter <= 0.25:
            raise RangeError("coverage jitter must be in [0, 0.25]")
        if self.glare_count < 0:
            raise RangeError("glare count must be >= 0")
        headroom = min(self.snow_rgb) - self.color_jitter - self.noise_amplitude
        ceiling = max(self.road_rgb) + self.color_jitter + self.noise_amplitude
        sky_floor = min(self.sky_rgb) + self.color_jitter + self.noise_amplitude
        if headroom < SNOW_THRESHOLD or ceiling >= SNOW_THRESHOLD or sky_floor >= SNOW_THRESHOLD:
            raise RangeError(
                "color/noise settings blur the snow threshold; "
                "lower the jitter or noise amplitude"
            )


def render_scene(config: SyntheticConfig, rng: SeededRng, coverage: float) -> Tensor:
    """One road scene with the given rendered snow coverage in [0, 1]."""
    size = config.size
    jmax = max(1, int(round(size * config.horizon_jitter)))
    track_w = max(1, int(round(size * 0.07)))
    horizon = int(round(size * config.horizon)) + int(np.floor(rng.uniform(-jmax, jmax + 1)))
    horizon = min(max(horizon, 4), size - 2)
    sky = np.array(config.sky_rgb) + rng.uniform(-config.color_jitter, config.color_jitter, 3)
    road = np.array(config.road_rgb) + rng.uniform(-config.color_jitter, config.color_jitter, 3)
    snow = np.array(config.snow_rgb) + rng.uniform(-config.color_jitter, config.color_jitter, 3)

    img = np.empty((3, size, size))
    img[:] = sky[:, None, None]
    img[:, horizon:, :] = road[:, None, None]
    for center in (0.25, 0.75):
        c0 = int(round(size * center)) - track_w // 2
        img[:, horizon:, c0 : c0 + track_w] -= config.wheel_track_delta
    covered = int(round(coverage * size))
    if covered:
        if config.snow_side == "left":
            img[:, horizon:, :covered] = snow[:, None, None]
        else:
            img[:, horizon:, size - covered :] = snow[:, None, None]
    if config.glare_count:
        rows = np.arange(size)[:, None]
        cols = np.arange(size)[None, :]
        for _ in range(int(rng.uniform(0, config.glare_count + 1))):
            cy = rng.uniform(0, max(1, horizon - 2))
            cx = rng.uniform(0, size)
            radius = rng.uniform(1.0, max(2.0, size * 0.15))
            tone = rng.uniform(232.0, 250.0)
            disc = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius**2
            disc[horizon:, :] = False  # glare lives in the sky only
            img[:, disc] = tone
    noise = rng.uniform(-config.noise_amplitude, config.noise_amplitude, (3, size, size))
    return np.clip(np.rint(img + noise), 0.0, 255.0)


def generate_synthetic(config: SyntheticConfig, n_per_class: int) -> Dataset:
    """Render n images per five-class label; deterministic given the seed."""
    if n_per_class < 1:
        raise RangeError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = SeededRng(config.seed)
    items = []
    for label in FiveClassLabel:
        lo, hi = COVERAGE_BANDS[label]
        for k in range(n_per_class):
            coverage = 0.0 if label is FiveClassLabel.BARE else rng.uniform(lo, hi)
            rendered = coverage
            if coverage > 0.0 and config.coverage_jitter > 0.0:
                slack = rng.uniform(-config.coverage_jitter, config.coverage_jitter)
                rendered = min(1.0, max(0.01, coverage + slack))
            img = render_scene(config, rng, rendered)
            items.append(
                DatasetItem(img, label, f"syn_{FIVE_CLASS_NAMES[label]}_{k:05d}")
            )
    return Dataset(items)


# ---------------------------------------------------------------------------
# manifests


def save_dataset(dataset: Dataset, out_dir):
    """Write PPM images plus a manifest CSV under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "path", "five_class"])
        for it in dataset.items:
            rel = f"images/{it.id}.ppm"
            save_ppm(it.image, out_dir / rel)
            writer.writerow([it.id, rel, FIVE_CLASS_NAMES[it.label]])
    return out_dir / "manifest.csv"


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileError(f"{manifest_path}: manifest not found")
    root = manifest_path.parent
    name_to_label = {n: FiveClassLabel(i) for i, n in enumerate(FIVE_CLASS_NAMES)}
    items = []
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "path", "five_class"]:
            raise FormatError(f"{manifest_path}: unexpected manifest header {header}")
        for row in reader:
            if len(row) != 3:
                raise FormatError(f"{manifest_path}: malformed row {row}")
            item_id, rel, label_name = row
            if label_name not in name_to_label:
                raise FormatError(f"{manifest_path}: unknown class '{label_name}'")
            path = root / rel
            img = load_tensor(path) if path.suffix == ".rsct" else load_ppm(path)
            items.append(DatasetItem(img, name_to_label[label_name], item_id))
    return Dataset(items)
