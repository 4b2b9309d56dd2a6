"""Layer kinds: 3x3 convolution, ReLU, 2x2 max-pool, flatten, dense, softmax.

Every layer accepts either a single sample (image ``(C, H, W)``, vector
``(in,)``) or a batch with a leading axis, and returns the matching rank.
``forward`` caches what ``backward`` needs; ``backward`` returns the gradient
w.r.t. the input and stores ``dW``/``db`` on parameterized layers.  Gradients
are summed over the batch; the training loop folds the 1/batch factor into
the loss gradient it feeds in.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError, StateError
from .tensor import SeededRng, Tensor, im2col_batch


class Layer:
    kind = "layer"
    has_params = False

    def __init__(self, name: str = ""):
        self.name = name
        self.cache = None

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, dy: Tensor) -> Tensor:
        raise NotImplementedError

    def reset_cache(self):
        self.cache = None


class Conv2D(Layer):
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial size kept).

    y[o, i, j] = b[o] + sum_{c,u,v} W[o, c, u, v] * x_pad[c, i+u, j+v]
    """

    kind = "conv2d"
    has_params = True
    KERNEL = 3
    STRIDE = 1
    PAD = 1

    def __init__(self, in_ch: int, out_ch: int, name: str = ""):
        super().__init__(name)
        if in_ch < 1 or out_ch < 1:
            raise ShapeError(f"channel counts must be >= 1, got {in_ch}->{out_ch}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.W = np.zeros((out_ch, in_ch, self.KERNEL, self.KERNEL))
        self.b = np.zeros(out_ch)
        self.dW = None
        self.db = None

    def forward(self, x: Tensor) -> Tensor:
        single = x.ndim == 3
        xb = x[None] if single else x
        if xb.ndim != 4 or xb.shape[1] != self.in_ch:
            raise ShapeError(
                f"conv {self.name or self.kind} expects {self.in_ch} channels, "
                f"got input shape {list(x.shape)}"
            )
        n, _, h, w = xb.shape
        cols = im2col_batch(xb, self.KERNEL, self.STRIDE, self.PAD)
        wmat = self.W.reshape(self.out_ch, -1)
        y = np.matmul(wmat, cols) + self.b[None, :, None]
        self.cache = (cols, (n, h, w), single)
        y = y.reshape(n, self.out_ch, h, w)
        return y[0] if single else y

    def backward(self, dy: Tensor) -> Tensor:
        if self.cache is None:
            raise StateError(f"conv {self.name or self.kind}: backward before forward")
        cols, (n, h, w), single = self.cache
        dyb = dy[None] if single else dy
        if dyb.shape != (n, self.out_ch, h, w):
            raise ShapeError(f"conv backward: gradient shape {list(dy.shape)} mismatch")
        dym = dyb.reshape(n, self.out_ch, h * w)
        self.dW = np.matmul(dym, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.W.shape)
        self.db = dyb.sum(axis=(0, 2, 3))
        wmat = self.W.reshape(self.out_ch, -1)
        dcols = np.matmul(wmat.T, dym).reshape(n, self.in_ch, 3, 3, h, w)
        pad = self.PAD
        dxp = np.zeros((n, self.in_ch, h + 2 * pad, w + 2 * pad))
        for u in range(self.KERNEL):
            for v in range(self.KERNEL):
                dxp[:, :, u : u + h, v : v + w] += dcols[:, :, u, v]
        dx = dxp[:, :, pad : pad + h, pad : pad + w]
        return dx[0] if single else dx


def conv_forward_naive(W: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """Sliding-window reference for Conv2D.forward, written without im2col.

    Kept deliberately loop-based so the fast path can be checked against an
    independent route.
    """
    out_ch, in_ch, k, _ = W.shape
    c, h, w = x.shape
    if c != in_ch:
        raise ShapeError(f"naive conv expects {in_ch} channels, got {c}")
    pad = Conv2D.PAD
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    y = np.empty((out_ch, h, w))
    for o in range(out_ch):
        for i in range(h):
            for j in range(w):
                acc = b[o]
                for ci in range(in_ch):
                    for u in range(k):
                        for v in range(k):
                            acc += W[o, ci, u, v] * xp[ci, i + u, j + v]
                y[o, i, j] = acc
    return y


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Tensor) -> Tensor:
        self.cache = x
        return np.maximum(0.0, x)

    def backward(self, dy: Tensor) -> Tensor:
        if self.cache is None:
            raise StateError("relu: backward before forward")
        # derivative at exactly 0 is taken as 0
        return dy * (self.cache > 0)


class MaxPool2(Layer):
    """2x2 max-pool, stride 2; odd trailing rows/columns are dropped.

    Ties resolve to the first maximum in row-major window order so backward
    routing is deterministic.
    """

    kind = "maxpool2"
    WINDOW = 2

    def forward(self, x: Tensor):
        single = x.ndim == 3
        xb = x[None] if single else x
        n, c, h, w = xb.shape
        if h < 2 or w < 2:
            raise ShapeError(f"max-pool needs spatial extents >= 2, got {h}x{w}")
        ho, wo = h // 2, w // 2
        win = (
            xb[:, :, : 2 * ho, : 2 * wo]
            .reshape(n, c, ho, 2, wo, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho, wo, 4)
        )
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self.cache = (idx, (n, c, h, w), single)
        return y[0] if single else y

    @property
    def indices(self):
        return None if self.cache is None else self.cache[0]

    def backward(self, dy: Tensor) -> Tensor:
        if self.cache is None:
            raise StateError("max-pool: backward before forward")
        idx, (n, c, h, w), single = self.cache
        dyb = dy[None] if single else dy
        ho, wo = idx.shape[2], idx.shape[3]
        if dyb.shape != (n, c, ho, wo):
            raise ShapeError(f"max-pool backward: gradient shape {list(dy.shape)} mismatch")
        dx = np.zeros((n, c, h, w))
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        ri = 2 * np.arange(ho)[None, None, :, None] + idx // 2
        cj = 2 * np.arange(wo)[None, None, None, :] + idx % 2
        dx[ni, ci, ri, cj] = dyb
        return dx[0] if single else dx


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x: Tensor) -> Tensor:
        single = x.ndim == 3
        xb = x[None] if single else x
        self.cache = (xb.shape, single)
        y = xb.reshape(xb.shape[0], -1)
        return y[0] if single else y

    def backward(self, dy: Tensor) -> Tensor:
        if self.cache is None:
            raise StateError("flatten: backward before forward")
        shape, single = self.cache
        dyb = dy[None] if single else dy
        dx = dyb.reshape(shape)
        return dx[0] if single else dx


class Dense(Layer):
    kind = "dense"
    has_params = True

    def __init__(self, in_units: int, out_units: int, name: str = ""):
        super().__init__(name)
        if in_units < 1 or out_units < 1:
            raise ShapeError(f"unit counts must be >= 1, got {in_units}->{out_units}")
        self.in_units = in_units
        self.out_units = out_units
        self.W = np.zeros((out_units, in_units))
        self.b = np.zeros(out_units)
        self.dW = None
        self.db = None

    def forward(self, x: Tensor) -> Tensor:
        single = x.ndim == 1
        xb = x[None] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.in_units:
            raise ShapeError(
                f"dense {self.name or self.kind} expects {self.in_units} inputs, "
                f"got shape {list(x.shape)}"
            )
        self.cache = (xb, single)
        y = xb @ self.W.T + self.b
        return y[0] if single else y

    def backward(self, dy: Tensor) -> Tensor:
        if self.cache is None:
            raise StateError(f"dense {self.name or self.kind}: backward before forward")
        xb, single = self.cache
        dyb = dy[None] if single else dy
        if dyb.shape != (xb.shape[0], self.out_units):
            raise ShapeError(f"dense backward: gradient shape {list(dy.shape)} mismatch")
        self.dW = dyb.T @ xb
        self.db = dyb.sum(axis=0)
        dx = dyb @ self.W
        return dx[0] if single else dx


class Softmax(Layer):
    """Max-shifted softmax along the last axis; outputs sum to 1."""

    kind = "softmax"

    def forward(self, x: Tensor) -> Tensor:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.cache = True
        return e / e.sum(axis=-1, keepdims=True)

    def backward(self, dy: Tensor) -> Tensor:
        raise StateError(
            "softmax backward is fused with cross-entropy; "
            "backpropagate from the logits instead"
        )


def parameter_count(layer: Layer) -> int:
    """Number of trainable scalars in a Conv2D or Dense layer."""
    if isinstance(layer, Conv2D):
        return layer.KERNEL * layer.KERNEL * layer.in_ch * layer.out_ch + layer.out_ch
    if isinstance(layer, Dense):
        return layer.in_units * layer.out_units + layer.out_units
    raise DomainError(f"layer kind '{layer.kind}' has no parameters")


def finite_difference_check(layer: Layer, x: Tensor, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Projects the layer output onto a fixed random direction to get a scalar,
    then compares the analytic gradient of that scalar (via ``backward``)
    against central differences over every input element and, when present,
    every weight and bias element.  Error metric per element:
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x_work = np.array(x, dtype=np.float64, copy=True)
    y = layer.forward(x_work)
    proj = SeededRng(seed).uniform(-1.0, 1.0, y.shape)

    def scalar() -> float:
        return float((layer.forward(x_work) * proj).sum())

    dx = layer.backward(proj)
    targets = [(x_work, dx)]
    if layer.has_params:
        targets.append((layer.W, layer.dW.copy()))
        targets.append((layer.b, layer.db.copy()))

    worst = 0.0
    for arr, analytic in targets:
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = scalar()
            arr[idx] = orig - h
            fm = scalar()
            arr[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
            worst = max(worst, err)
    return worst
