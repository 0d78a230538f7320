"""Naive loop implementations of the layer forward passes, kept as test oracles."""

import numpy as np


def temporal_conv(x, w, b=0.0):
    """x: (T, H, W), w: (k,) -> (T, H, W), zero padded."""
    T, H, W = x.shape
    k = len(w)
    p = k // 2
    out = np.zeros_like(x, dtype=float)
    for t in range(T):
        for i in range(H):
            for j in range(W):
                acc = b
                for m in range(k):
                    tt = t + m - p
                    if 0 <= tt < T:
                        acc += w[m] * x[tt, i, j]
                out[t, i, j] = acc
    return out


def conv2d(x, w, b):
    """x: (C, H, W), w: (O, C, k, k) -> (O, H, W), 'same' zero padding, cross-correlation."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((O, H, W))
    for o in range(O):
        for i in range(H):
            for j in range(W):
                acc = b[o]
                for c in range(C):
                    for di in range(k):
                        for dj in range(k):
                            ii, jj = i + di - p, j + dj - p
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += w[o, c, di, dj] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def maxpool2(x):
    C, H, W = x.shape
    out = np.zeros((C, H // 2, W // 2))
    for c in range(C):
        for i in range(H // 2):
            for j in range(W // 2):
                out[c, i, j] = max(x[c, 2 * i, 2 * j], x[c, 2 * i, 2 * j + 1],
                                   x[c, 2 * i + 1, 2 * j], x[c, 2 * i + 1, 2 * j + 1])
    return out


def linear(x, w, b):
    din, dout = w.shape
    out = np.zeros(dout)
    for o in range(dout):
        acc = b[o]
        for i in range(din):
            acc += x[i] * w[i, o]
        out[o] = acc
    return out
