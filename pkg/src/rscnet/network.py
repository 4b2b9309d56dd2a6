"""Architecture profiles, layer-stack assembly, freezing, and weight archives.

Archive file format (binary, little-endian, no padding between fields):

    magic "RSCW" | u32 version=1 | u32 fingerprint length | fingerprint UTF-8
    | u32 record count | records...

    record: u32 name length | name UTF-8 | u8 dtype tag (0 = f32)
            | u8 ndim | ndim x u32 dims | product(dims) x f32 payload

The fingerprint is the SHA-256 hex digest of the profile's canonical
description, so loading an archive into a profile with any structural
difference (input size, block plan, head widths, class count) fails hard.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CompatibilityError,
    FormatError,
    ProfileError,
    RangeError,
    ShapeError,
    StateError,
)
from .layers import Conv2D, Dense, Flatten, Layer, MaxPool2, ReLU, Softmax, parameter_count
from .tensor import SeededRng, Tensor, uniform_init

ARCHIVE_MAGIC = b"RSCW"
ARCHIVE_VERSION = 1
_DTYPE_F32 = 0


@dataclass(frozen=True)
class ArchitectureProfile:
    """Ordered block/layer plan: conv blocks, each ending in one 2x2 pool,
    then a fully connected head."""

    name: str
    input_shape: tuple  # (channels, height, width)
    conv_blocks: tuple  # ((layer_count, out_channels), ...)
    fc_head: tuple  # hidden widths
    num_classes: int

    def __post_init__(self):
        c, h, w = self.input_shape
        if min(c, h, w) < 1:
            raise ProfileError(f"input extents must be positive, got {self.input_shape}")
        if not self.conv_blocks:
            raise ProfileError("at least one conv block is required")
        for count, ch in self.conv_blocks:
            if count < 1 or ch < 1:
                raise ProfileError(f"bad conv block ({count}, {ch})")
        for units in self.fc_head:
            if units < 1:
                raise ProfileError(f"bad head width {units}")
        if self.num_classes < 1:
            raise ProfileError(f"num_classes must be positive, got {self.num_classes}")
        for size in self.spatial_trace()[:-1]:
            if size < 2:
                raise ProfileError(
                    f"input {h}x{w} is too small for {len(self.conv_blocks)} pooling stages"
                )

    def spatial_trace(self) -> list:
        """Per-block spatial size, starting at the input: one floor-halving per pool."""
        size = self.input_shape[1]
        trace = [size]
        for _ in self.conv_blocks:
            size = size // 2
            trace.append(size)
        return trace

    def flatten_width(self) -> int:
        final = self.spatial_trace()[-1]
        final_w = self.input_shape[2]
        for _ in self.conv_blocks:
            final_w //= 2
        return self.conv_blocks[-1][1] * final * final_w

    def canonical(self) -> str:
        c, h, w = self.input_shape
        blocks = ",".join(f"{n}x{ch}" for n, ch in self.conv_blocks)
        head = ",".join(str(u) for u in self.fc_head) or "none"
        return f"input={c}x{h}x{w};blocks={blocks};fc={head};classes={self.num_classes}"

    def base_canonical(self) -> str:
        c, h, w = self.input_shape
        blocks = ",".join(f"{n}x{ch}" for n, ch in self.conv_blocks)
        return f"input={c}x{h}x{w};blocks={blocks};head=none"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def base_fingerprint(self) -> str:
        return hashlib.sha256(self.base_canonical().encode()).hexdigest()


def vgg16_150(num_classes: int = 3) -> ArchitectureProfile:
    """16-layer 150x150 profile: five conv blocks (64/128/256/512/512
    channels, 2/2/3/3/3 layers) and a 512/256 head."""
    return ArchitectureProfile(
        name="vgg16_150",
        input_shape=(3, 150, 150),
        conv_blocks=((2, 64), (2, 128), (3, 256), (3, 512), (3, 512)),
        fc_head=(512, 256),
        num_classes=num_classes,
    )


def mini_32(num_classes: int = 3) -> ArchitectureProfile:
    """Miniature five-block profile for 32x32 images; trains in seconds while
    keeping the same freeze-depth structure as the full profile."""
    return ArchitectureProfile(
        name="mini_32",
        input_shape=(3, 32, 32),
        conv_blocks=((1, 8), (1, 16), (1, 32), (1, 32), (1, 32)),
        fc_head=(64, 32),
        num_classes=num_classes,
    )


PROFILES = {"vgg16_150": vgg16_150, "mini_32": mini_32}


class Network:
    """An ordered layer stack with a per-layer freeze mask.

    Frozen layers are excluded from optimizer updates, so their parameters
    stay bit-identical across any number of training steps.
    """

    def __init__(self, layers, profile=None, base_only=False, head_trained=False):
        self.layers = list(layers)
        self.profile = profile
        self.base_only = base_only
        self.head_trained = head_trained
        self.freeze = [False] * len(self.layers)

    def forward(self, x: Tensor) -> Tensor:
        if self.profile is not None:
            expected = tuple(self.profile.input_shape)
            got = tuple(x.shape[-3:]) if x.ndim in (3, 4) else tuple(x.shape)
            if x.ndim not in (3, 4) or got != expected:
                raise ShapeError(
                    f"input shape {list(x.shape)} does not match profile input {list(expected)}"
                )
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward_from_logits(self, dlogits: Tensor):
        """Backpropagate a gradient expressed at the logits (pre-softmax).

        Stops once every remaining lower layer is frozen; nothing below the
        lowest unfrozen parameterized layer needs a gradient.
        """
        if not isinstance(self.layers[-1], Softmax):
            raise StateError("network does not end in softmax; nothing to fuse with")
        lowest = None
        for i, layer in enumerate(self.layers):
            if layer.has_params and not self.freeze[i]:
                lowest = i
                break
        if lowest is None:
            return
        g = dlogits
        for i in range(len(self.layers) - 2, lowest - 1, -1):
            g = self.layers[i].backward(g)

    def collect_grads(self):
        """Per-layer (dW, db) aligned with ``layers``; None for layers without
        parameters or without a computed gradient."""
        out = []
        for layer in self.layers:
            if layer.has_params and layer.dW is not None:
                out.append((layer.dW, layer.db))
            else:
                out.append(None)
        return out

    def param_layers(self):
        return [l for l in self.layers if l.has_params]

    def fingerprint(self) -> str:
        if self.profile is None:
            raise StateError("network has no profile; no fingerprint exists")
        return self.profile.base_fingerprint() if self.base_only else self.profile.fingerprint()

    def content_fingerprint(self) -> str:
        """Hash of the architecture plus the weights at 32-bit width.

        Distinguishes differently trained networks of the same shape, so a
        feature cache can be tied to the exact base that produced it.
        """
        digest = hashlib.sha256(self.fingerprint().encode())
        for layer in self.param_layers():
            digest.update(np.ascontiguousarray(layer.W, dtype="<f4").tobytes())
            digest.update(np.ascontiguousarray(layer.b, dtype="<f4").tobytes())
        return digest.hexdigest()


def _glorot(layer, rng: SeededRng):
    if isinstance(layer, Conv2D):
        k = layer.KERNEL
        fan_in, fan_out = layer.in_ch * k * k, layer.out_ch * k * k
    else:
        fan_in, fan_out = layer.in_units, layer.out_units
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    layer.W = uniform_init(layer.W.shape, -bound, bound, rng)


def _head_layers(in_width: int, fc_head, num_classes: int, rng: SeededRng):
    layers = []
    width = in_width
    for hi, units in enumerate(fc_head, 1):
        dense = Dense(width, units, name=f"fc{hi}")
        _glorot(dense, rng)
        layers += [dense, ReLU(name=f"fc{hi}_relu")]
        width = units
    out = Dense(width, num_classes, name="fc_out")
    _glorot(out, rng)
    layers += [out, Softmax(name="softmax")]
    return layers


def build_network(profile: ArchitectureProfile, rng: SeededRng) -> Network:
    """Fresh network for a profile: Glorot-uniform weights
    (+-sqrt(6/(fan_in+fan_out))), zero biases, nothing frozen."""
    layers = []
    in_ch = profile.input_shape[0]
    for bi, (count, out_ch) in enumerate(profile.conv_blocks, 1):
        for li in range(1, count + 1):
            conv = Conv2D(in_ch, out_ch, name=f"block{bi}_conv{li}")
            _glorot(conv, rng)
            layers += [conv, ReLU(name=f"block{bi}_relu{li}")]
            in_ch = out_ch
        layers.append(MaxPool2(name=f"block{bi}_pool"))
    layers.append(Flatten(name="flatten"))
    layers += _head_layers(profile.flatten_width(), profile.fc_head, profile.num_classes, rng)
    return Network(layers, profile)


def build_head(in_width: int, fc_head, num_classes: int, rng: SeededRng) -> Network:
    """Classifier head alone: (Dense, ReLU) per hidden width, then the output
    Dense and softmax.  Layer names match the full-network head so the stacks
    can be joined."""
    return Network(_head_layers(in_width, tuple(fc_head), num_classes, rng))


def set_freeze_by_blocks(net: Network, frozen_block_count: int):
    """Freeze every layer (convs and pools) of the first N conv blocks.

    The FC head is never frozen by this call; conv blocks past N are
    unfrozen, so the call is an absolute setter, not an accumulator.
    """
    if net.profile is None:
        raise StateError("freeze-by-blocks needs a profiled network")
    blocks = net.profile.conv_blocks
    if not 0 <= frozen_block_count <= len(blocks):
        raise RangeError(
            f"frozen_block_count must be in 0..{len(blocks)}, got {frozen_block_count}"
        )
    i = 0
    for bi, (count, _) in enumerate(blocks):
        span = 2 * count + 1  # (conv, relu) pairs plus the pool
        for _ in range(span):
            net.freeze[i] = bi < frozen_block_count
            i += 1
    while i < len(net.layers):
        net.freeze[i] = False
        i += 1


def truncate_to_conv_base(net: Network) -> Network:
    """Conv-blocks-only stack whose output is the flattened feature vector.

    Layer state is shared with the source network, not copied; truncating a
    base returns it unchanged.
    """
    if net.base_only:
        return net
    if net.profile is None:
        raise StateError("cannot truncate a network without a profile")
    flat_idx = next(i for i, l in enumerate(net.layers) if isinstance(l, Flatten))
    base = Network(net.layers[: flat_idx + 1], profile=net.profile, base_only=True)
    return base


def assemble(base: Network, head: Network) -> Network:
    """Join a conv base and a trained head into one fine-tunable network.

    The result carries the head-trained flag that fine-tuning requires.
    """
    if not base.base_only:
        raise StateError("assemble expects a conv-only base (use truncate_to_conv_base)")
    head_dense = [l for l in head.layers if isinstance(l, Dense)]
    if not head_dense or head_dense[0].in_units != base.profile.flatten_width():
        raise ShapeError(
            f"head expects {head_dense[0].in_units if head_dense else '?'} inputs, "
            f"base produces {base.profile.flatten_width()}"
        )
    widths = tuple(d.out_units for d in head_dense[:-1])
    profile = dataclasses.replace(
        base.profile, fc_head=widths, num_classes=head_dense[-1].out_units
    )
    return Network(base.layers + head.layers, profile=profile, head_trained=True)


def total_parameters(net: Network) -> int:
    return sum(parameter_count(l) for l in net.param_layers())


def _records_for(net: Network):
    for layer in net.param_layers():
        yield f"{layer.name}.W", layer.W
        yield f"{layer.name}.b", layer.b


def save_weights(net: Network, path):
    """Write the network's parameters as a 32-bit-float archive."""
    fp = net.fingerprint().encode()
    records = list(_records_for(net))
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", ARCHIVE_VERSION))
        fh.write(struct.pack("<I", len(fp)))
        fh.write(fp)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated archive")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def string(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode()
        except UnicodeDecodeError:
            raise FormatError(f"{self.path}: corrupt string field") from None


def read_archive(path):
    """Parse an archive into (fingerprint, ordered {name: float64 array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != ARCHIVE_MAGIC:
        raise FormatError(f"{path}: bad magic, not a weight archive")
    version = r.u32()
    if version != ARCHIVE_VERSION:
        raise FormatError(f"{path}: unsupported archive version {version}")
    fp = r.string()
    records = {}
    for _ in range(r.u32()):
        name = r.string()
        tag = r.u8()
        if tag != _DTYPE_F32:
            raise FormatError(f"{path}: unknown dtype tag {tag}")
        ndim = r.u8()
        if ndim > 8:
            raise FormatError(f"{path}: implausible rank {ndim}")
        dims = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * count)
        if name in records:
            raise FormatError(f"{path}: duplicate record '{name}'")
        records[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes after records")
    return fp, records


def load_weights(path, profile: ArchitectureProfile) -> Network:
    """Rebuild a network from an archive; exact at 32-bit width.

    Accepts archives of the full network or of the conv base alone, telling
    them apart by fingerprint.
    """
    fp, records = read_archive(path)
    if fp == profile.fingerprint():
        net = build_network(profile, SeededRng(0))
    elif fp == profile.base_fingerprint():
        net = truncate_to_conv_base(build_network(profile, SeededRng(0)))
    else:
        raise CompatibilityError(
            f"{path}: archive fingerprint {fp[:12]}... does not match profile "
            f"'{profile.name}' ({profile.canonical()})"
        )
    expected = dict(_records_for(net))
    if set(records) != set(expected):
        raise FormatError(f"{path}: record names do not match the profile's layers")
    for name, arr in records.items():
        if arr.shape != expected[name].shape:
            raise FormatError(
                f"{path}: record '{name}' has shape {list(arr.shape)}, "
                f"expected {list(expected[name].shape)}"
            )
        expected[name][...] = arr
    return net


def resolve_archive_profile(path) -> ArchitectureProfile:
    """Recover the profile of an archive written by this package.

    Block structure, head widths, and class count are reconstructed from the
    records; the input size is tried from each registered profile.  Archives
    of custom input sizes need an explicit profile instead.
    """
    fp, records = read_archive(path)
    blocks = {}
    head_widths = {}
    num_classes = None
    in_ch = None
    for name, arr in records.items():
        if not name.endswith(".W"):
            continue
        stem = name[:-2]
        if stem.startswith("block"):
            bi, li = stem[5:].split("_conv")
            blocks.setdefault(int(bi), {})[int(li)] = arr.shape[0]
            if int(bi) == 1 and int(li) == 1:
                in_ch = arr.shape[1]
        elif stem == "fc_out":
            num_classes = arr.shape[0]
        elif stem.startswith("fc"):
            head_widths[int(stem[2:])] = arr.shape[0]
    if not blocks or in_ch is None:
        raise CompatibilityError(f"{path}: archive has no recognizable conv records")
    conv_blocks = tuple(
        (len(blocks[bi]), blocks[bi][max(blocks[bi])]) for bi in sorted(blocks)
    )
    fc_head = tuple(head_widths[k] for k in sorted(head_widths))
    for factory in PROFILES.values():
        try:
            base = factory(num_classes=num_classes or 1)
            candidate = dataclasses.replace(base, conv_blocks=conv_blocks, fc_head=fc_head)
        except ProfileError:
            continue
        if candidate.fingerprint() == fp or candidate.base_fingerprint() == fp:
            return candidate
    raise CompatibilityError(
        f"{path}: archive does not match any registered profile; "
        f"load it with an explicit profile"
    )
