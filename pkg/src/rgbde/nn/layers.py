"""Layers with hand-written backward passes, operating on batch-first numpy arrays.

Every layer caches what it needs during ``forward`` and returns the input
gradient from ``backward`` while accumulating parameter gradients into
``self.grads`` (overwritten, not summed, on each call).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import OddSpatialDims, ShapeMismatch


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def named_params(self, prefix=""):
        for name in self.params:
            yield prefix + name, self, name

    def children(self):
        return ()


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class TemporalConv(Layer):
    """A length-``k`` kernel convolved along the time/bin axis, shared by every pixel.

    Input and output are (N, T, H, W); zero padding keeps T.
    """

    def __init__(self, k=5, dtype=np.float64):
        super().__init__()
        if k % 2 != 1:
            raise ShapeMismatch(f"temporal kernel length must be odd, got {k}")
        self.k = k
        self.params = {"weight": np.full(k, 1.0 / k, dtype=dtype), "bias": np.zeros(1, dtype=dtype)}

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4:
            raise ShapeMismatch(f"temporal kernel expects (N, T, H, W), got {x.shape}")
        p = self.k // 2
        T = x.shape[1]
        xp = np.pad(x, ((0, 0), (p, p), (0, 0), (0, 0)))
        w = self.params["weight"]
        out = np.zeros_like(x)
        for j in range(self.k):
            out += w[j] * xp[:, j:j + T]
        self._xp, self._T = xp, T
        return out + self.params["bias"][0]

    def backward(self, dout):
        xp, T, p = self._xp, self._T, self.k // 2
        w = self.params["weight"]
        dw = np.array([np.sum(dout * xp[:, j:j + T]) for j in range(self.k)], dtype=w.dtype)
        dxp = np.zeros_like(xp)
        for j in range(self.k):
            dxp[:, j:j + T] += w[j] * dout
        self.grads = {"weight": dw, "bias": np.array([dout.sum()], dtype=w.dtype)}
        return dxp[:, p:p + T]


class Conv2d(Layer):
    """Stride-1 'same' convolution (cross-correlation) with odd kernel size."""

    def __init__(self, cin, cout, k, rng=None, dtype=np.float64):
        super().__init__()
        if k % 2 != 1:
            raise ShapeMismatch(f"kernel size must be odd, got {k}")
        self.cin, self.cout, self.k = cin, cout, k
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = {
            "weight": kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype),
            "bias": np.zeros(cout, dtype=dtype),
        }

    def output_shape(self, shape):
        if shape[0] != self.cin:
            raise ShapeMismatch(f"conv expects {self.cin} channels, got {shape[0]}")
        return (self.cout,) + tuple(shape[1:])

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeMismatch(f"conv expects (N, {self.cin}, H, W), got {x.shape}")
        W, b = self.params["weight"], self.params["bias"]
        self._x = x
        if self.k == 1:
            out = np.einsum("nchw,oc->nohw", x, W[:, :, 0, 0], optimize=True)
        else:
            p = self.k // 2
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            win = sliding_window_view(xp, (self.k, self.k), axis=(2, 3))  # N C H W k k
            out = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out) + b[None, :, None, None]

    def backward(self, dout):
        x, W = self._x, self.params["weight"]
        db = dout.sum(axis=(0, 2, 3))
        if self.k == 1:
            dW = np.einsum("nohw,nchw->oc", dout, x, optimize=True)[:, :, None, None]
            dx = np.einsum("nohw,oc->nchw", dout, W[:, :, 0, 0], optimize=True)
        else:
            p = self.k // 2
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            win = sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
            dW = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
            q = self.k - 1 - p
            dp = np.pad(dout, ((0, 0), (0, 0), (q, q), (q, q)))
            dwin = sliding_window_view(dp, (self.k, self.k), axis=(2, 3))  # N O H W k k
            dx = np.tensordot(dwin, W[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        self.grads = {"weight": dW.astype(W.dtype, copy=False), "bias": db}
        return np.ascontiguousarray(dx)


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0)


class MaxPool2(Layer):
    """2x2 max pooling, stride 2. Odd trailing rows/columns are dropped unless ``strict``."""

    def __init__(self, strict=False):
        super().__init__()
        self.strict = strict

    def output_shape(self, shape):
        c, h, w = shape
        if self.strict and (h % 2 or w % 2):
            raise OddSpatialDims(f"2x2 pooling needs even spatial dims, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, train=False, rng=None):
        N, C, H, W = x.shape
        self.output_shape((C, H, W))
        h, w = H // 2, W // 2
        blocks = x[:, :, :2 * h, :2 * w].reshape(N, C, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(N, C, h, w, 4)
        self._arg = blocks.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(blocks, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        N, C, H, W = self._shape
        h, w = H // 2, W // 2
        blocks = np.zeros((N, C, h, w, 4), dtype=dout.dtype)
        np.put_along_axis(blocks, self._arg[..., None], dout[..., None], axis=-1)
        dx = np.zeros(self._shape, dtype=dout.dtype)
        dx[:, :, :2 * h, :2 * w] = blocks.reshape(N, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, 2 * h, 2 * w)
        return dx


class Dropout(Layer):
    """Inverted dropout: active only with ``train=True``; the identity at rate 0."""

    def __init__(self, rate=0.3):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        self._mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class Flatten(Layer):
    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Linear(Layer):
    def __init__(self, din, dout, rng=None, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.din, self.dout = din, dout
        self.params = {"weight": kaiming_uniform(rng, (din, dout), din, dtype),
                       "bias": np.zeros(dout, dtype=dtype)}

    def output_shape(self, shape):
        if shape != (self.din,):
            raise ShapeMismatch(f"linear layer expects ({self.din},), got {shape}")
        return (self.dout,)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.din:
            raise ShapeMismatch(f"linear layer expects (N, {self.din}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dout):
        self.grads = {"weight": self._x.T @ dout, "bias": dout.sum(axis=0)}
        return dout @ self.params["weight"].T


class Fire(Layer):
    """Squeeze 1x1 -> ReLU -> [expand 1x1 | expand 3x3] + skip -> ReLU -> optional 2x2 max pool.

    The two expand paths each produce ``expand / 2`` channels. The skip is the
    input itself when it already has ``expand`` channels, otherwise a 1x1
    projection.
    """

    def __init__(self, cin, squeeze, expand, pool=True, strict=False, rng=None, dtype=np.float64):
        super().__init__()
        if expand % 2:
            raise ShapeMismatch(f"expand channels must be even, got {expand}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.cin, self.squeeze, self.expand = cin, squeeze, expand
        self.sq = Conv2d(cin, squeeze, 1, rng, dtype)
        self.sq_relu = ReLU()
        self.e1 = Conv2d(squeeze, expand // 2, 1, rng, dtype)
        self.e3 = Conv2d(squeeze, expand // 2, 3, rng, dtype)
        self.skip = Conv2d(cin, expand, 1, rng, dtype) if cin != expand else None
        self.relu = ReLU()
        self.pool = MaxPool2(strict) if pool else None

    def children(self):
        named = [("squeeze.", self.sq), ("expand1.", self.e1), ("expand3.", self.e3)]
        if self.skip is not None:
            named.append(("skip.", self.skip))
        return named

    def named_params(self, prefix=""):
        for name, child in self.children():
            yield from child.named_params(prefix + name)

    def output_shape(self, shape):
        if shape[0] != self.cin:
            raise ShapeMismatch(f"fire module expects {self.cin} channels, got {shape[0]}")
        out = (self.expand,) + tuple(shape[1:])
        return self.pool.output_shape(out) if self.pool else out

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeMismatch(f"fire module expects (N, {self.cin}, H, W), got {x.shape}")
        if self.pool is not None:
            self.pool.output_shape(x.shape[1:])
        s = self.sq_relu.forward(self.sq.forward(x))
        y = np.concatenate([self.e1.forward(s), self.e3.forward(s)], axis=1)
        y = y + (self.skip.forward(x) if self.skip is not None else x)
        y = self.relu.forward(y)
        return self.pool.forward(y) if self.pool is not None else y

    def backward(self, dout):
        if self.pool is not None:
            dout = self.pool.backward(dout)
        dy = self.relu.backward(dout)
        half = self.expand // 2
        ds = self.e1.backward(dy[:, :half]) + self.e3.backward(dy[:, half:])
        dx = self.sq.backward(self.sq_relu.backward(ds))
        dx = dx + (self.skip.backward(dy) if self.skip is not None else dy)
        return dx


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return [(f"{i}.", layer) for i, layer in enumerate(self.layers)]

    def named_params(self, prefix=""):
        for name, child in self.children():
            yield from child.named_params(prefix + name)

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


class MultiBranch(Layer):
    """Independent branches, one per input, concatenated on channels and fed to a trunk."""

    def __init__(self, branches, trunk):
        super().__init__()
        self.branches = list(branches)
        self.trunk = trunk

    def children(self):
        return [(f"branch{i}.", b) for i, b in enumerate(self.branches)] + [("trunk.", self.trunk)]

    def named_params(self, prefix=""):
        for name, child in self.children():
            yield from child.named_params(prefix + name)

    def output_shape(self, shapes):
        outs = [b.output_shape(s) for b, s in zip(self.branches, shapes)]
        if len({o[1:] for o in outs}) != 1:
            raise ShapeMismatch(f"branch outputs disagree spatially: {outs}")
        merged = (sum(o[0] for o in outs),) + tuple(outs[0][1:])
        return self.trunk.output_shape(merged)

    def forward(self, xs, train=False, rng=None):
        if len(xs) != len(self.branches):
            raise ShapeMismatch(f"expected {len(self.branches)} inputs, got {len(xs)}")
        outs = [b.forward(x, train, rng) for b, x in zip(self.branches, xs)]
        self._splits = np.cumsum([o.shape[1] for o in outs])[:-1]
        self.branch_outputs = outs
        return self.trunk.forward(np.concatenate(outs, axis=1), train, rng)

    def backward(self, dout):
        d = self.trunk.backward(dout)
        return [b.backward(part) for b, part in zip(self.branches, np.split(d, self._splits, axis=1))]
