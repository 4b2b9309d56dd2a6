"""Dense arrays, deterministic randomness, and the im2col transform.

Tensors are plain ``numpy.ndarray`` values: float64, C-order (row-major).
Images are channels-first (C, H, W); matrices are (rows, cols).  Nothing in
this module mutates its inputs, so tensors can be shared freely across
threads.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import RangeError, ShapeError

Tensor = np.ndarray

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = float(2.0**-53)


class SeededRng:
    """Counter-based SplitMix64 generator.

    Output k is ``mix64(seed + (k + 1) * 0x9E3779B97F4A7C15)`` with the
    standard SplitMix64 finalizer, evaluated in wrapping 64-bit arithmetic.
    The sequence depends only on the seed, so equal seeds give bit-equal
    streams on every platform, and blocks of any size can be drawn without
    changing the stream.
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs as a uint64 array."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = self.seed + idx * _GOLDEN
            z ^= z >> np.uint64(30)
            z *= _MIX1
            z ^= z >> np.uint64(27)
            z *= _MIX2
            z ^= z >> np.uint64(31)
        return z

    def random(self, size=None):
        """Uniform float64 in [0, 1): top 53 bits of each raw output."""
        if size is None:
            return float(self.raw(1)[0] >> np.uint64(11)) * _INV_2_53
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape)

    def uniform(self, lo: float, hi: float, size=None):
        """Uniform in [lo, hi).  Requires lo < hi."""
        if not lo < hi:
            raise RangeError(f"uniform bounds must satisfy lo < hi, got [{lo}, {hi})")
        u = self.random(size)
        return lo + u * (hi - lo)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def zeros(shape) -> Tensor:
    """All-zero tensor.  Every extent must be >= 1."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"extents must all be >= 1, got {list(shape)}")
    return np.zeros(shape, dtype=np.float64)


def uniform_init(shape, lo: float, hi: float, rng: SeededRng) -> Tensor:
    """Uniform [lo, hi) tensor, bit-reproducible for a given rng state."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"extents must all be >= 1, got {list(shape)}")
    return rng.uniform(lo, hi, shape)


def _out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    span = extent + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"window k={k}, stride={stride}, pad={pad} does not tile extent {extent}"
        )
    return span // stride + 1


def im2col(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Unfold a (C, H, W) image into a (C*k*k, H_out*W_out) patch matrix.

    Column j holds the receptive field of output position j (row-major over
    output rows then columns), itself flattened row-major over (channel,
    window row, window col).  Padding reads as zero.
    """
    if x.ndim != 3:
        raise ShapeError(f"im2col expects a (C, H, W) tensor, got shape {list(x.shape)}")
    return im2col_batch(x[None], k, stride, pad)[0]


def im2col_batch(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Batched im2col: (N, C, H, W) -> (N, C*k*k, H_out*W_out)."""
    n, c, h, w = x.shape
    h_out = _out_extent(h, k, stride, pad)
    w_out = _out_extent(w, k, stride, pad)
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, k, k, h_out, w_out),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows.reshape(n, c * k * k, h_out * w_out))


def im2col_shape(c: int, h: int, w: int, k: int, stride: int = 1, pad: int = 0):
    """(rows, cols) of the im2col output without materializing it."""
    return c * k * k, _out_extent(h, k, stride, pad) * _out_extent(w, k, stride, pad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of (m, k) and (k, n)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {list(a.shape)} x {list(b.shape)}")
    return a @ b
