"""Declarative network descriptions and the two pose-regression architectures."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch
from ..geom import euler_xyz_to_matrix, matrix_to_euler_xyz
from .layers import (Conv2d, Dropout, Fire, Flatten, Linear, MaxPool2, MultiBranch, ReLU,
                     Sequential, TemporalConv)

TRANSLATION_SCALE = 0.04  # m
ROTATION_SCALE = math.radians(35.0)


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description.

    Each input goes through its own copy of ``branch`` (independent weights);
    branch outputs are concatenated on channels and passed through ``trunk``.
    Layers are tuples: ``("temporal", k)``, ``("conv", out, k)``,
    ``("fire", squeeze, expand, pool)``, ``("pool",)``, ``("relu",)``,
    ``("dropout", rate)``, ``("flatten",)``, ``("fc", out)``.
    """

    name: str
    input_shapes: tuple
    branch: tuple = ()
    trunk: tuple = ()
    profile: str = "full"
    extra: dict = field(default_factory=dict, compare=False)

    def to_dict(self):
        return {"name": self.name, "profile": self.profile,
                "input_shapes": [list(s) for s in self.input_shapes],
                "branch": [list(l) for l in self.branch], "trunk": [list(l) for l in self.trunk]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(tuple(s) for s in d["input_shapes"]),
                   tuple(tuple(l) for l in d["branch"]), tuple(tuple(l) for l in d["trunk"]),
                   d.get("profile", "full"))

    # -- analytic shape and parameter bookkeeping, independent of the layer classes

    @staticmethod
    def _walk(layers, shape):
        params = 0
        for layer in layers:
            kind = layer[0]
            if kind == "temporal":
                params += layer[1] + 1
            elif kind == "conv":
                out, k = layer[1], layer[2]
                params += out * shape[0] * k * k + out
                shape = (out,) + tuple(shape[1:])
            elif kind == "fire":
                s, e, pool = layer[1], layer[2], layer[3]
                cin = shape[0]
                params += cin * s + s
                params += s * (e // 2) + e // 2
                params += 9 * s * (e // 2) + e // 2
                if cin != e:
                    params += cin * e + e
                shape = (e,) + tuple(shape[1:])
                if pool:
                    shape = (e, shape[1] // 2, shape[2] // 2)
            elif kind == "pool":
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "fc":
                if len(shape) != 1:
                    raise ShapeMismatch(f"fully connected layer needs a flat input, got {shape}")
                params += shape[0] * layer[1] + layer[1]
                shape = (layer[1],)
            elif kind not in ("relu", "dropout"):
                raise ValueError(f"unknown layer kind {kind!r}")
        return shape, params

    def output_shape(self):
        return self._analyze()[0]

    def param_count(self):
        return self._analyze()[1]

    def _analyze(self):
        total = 0
        outs = []
        for s in self.input_shapes:
            out, p = self._walk(self.branch, tuple(s))
            outs.append(out)
            total += p
        if len({o[1:] for o in outs}) != 1:
            raise ShapeMismatch(f"branch outputs disagree spatially: {outs}")
        merged = (sum(o[0] for o in outs),) + tuple(outs[0][1:])
        out, p = self._walk(self.trunk, merged)
        return out, total + p


def _fire_block(squeeze, expand, dropout, pool=True):
    layers = [("fire", squeeze, expand, pool)]
    if dropout:
        layers.append(("dropout", dropout))
    return layers


def _head(hidden, dropout):
    layers = [("flatten",), ("fc", hidden), ("relu",)]
    if dropout:
        layers.append(("dropout", dropout))
    return layers + [("fc", 6)]


def event_net_spec(profile="full", dropout=0.3, bins=9, size=None):
    """Temporal kernel-5, conv3-64, four fire modules, FC-500, FC-6 (channel counts reduced for ``toy``)."""
    if profile == "full":
        size = 150 if size is None else size
        conv, fires, hidden = 64, [(32, 64), (64, 128), (128, 256), (128, 512)], 500
    elif profile == "toy":
        size = 32 if size is None else size
        conv, fires, hidden = 16, [(8, 16), (16, 32), (32, 64), (32, 128)], 64
    else:
        raise ValueError(f"unknown profile {profile!r}")
    trunk = [("temporal", 5), ("relu",), ("conv", conv, 3), ("relu",)]
    for s, e in fires:
        trunk += _fire_block(s, e, dropout)
    trunk += _head(hidden, dropout)
    return NetworkSpec("event", ((bins, size, size),), (), tuple(trunk), profile)


def frame_net_spec(profile="full", dropout=0.3, size=None):
    """Two conv3-64 / fire-32-64 branches, concatenation, pooling, three fire modules, FC-500, FC-6."""
    if profile == "full":
        size = 184 if size is None else size
        conv, first, fires, hidden = 64, (32, 64), [(64, 256), (128, 512), (256, 1024)], 500
    elif profile == "toy":
        size = 32 if size is None else size
        conv, first, fires, hidden = 16, (8, 16), [(16, 32), (16, 64), (32, 128)], 64
    else:
        raise ValueError(f"unknown profile {profile!r}")
    branch = [("conv", conv, 3), ("relu",)] + _fire_block(*first, dropout, pool=False)
    trunk = [("pool",)]
    for s, e in fires:
        trunk += _fire_block(s, e, dropout)
    trunk += _head(hidden, dropout)
    return NetworkSpec("frame", ((4, size, size), (4, size, size)), tuple(branch), tuple(trunk), profile)


def _instantiate(layers, shape, rng, dtype):
    built = []
    for layer in layers:
        kind = layer[0]
        if kind == "temporal":
            built.append(TemporalConv(layer[1], dtype))
        elif kind == "conv":
            built.append(Conv2d(shape[0], layer[1], layer[2], rng, dtype))
        elif kind == "fire":
            built.append(Fire(shape[0], layer[1], layer[2], pool=bool(layer[3]), rng=rng, dtype=dtype))
        elif kind == "pool":
            built.append(MaxPool2())
        elif kind == "relu":
            built.append(ReLU())
        elif kind == "dropout":
            built.append(Dropout(layer[1]))
        elif kind == "flatten":
            built.append(Flatten())
        elif kind == "fc":
            built.append(Linear(shape[0], layer[1], rng, dtype))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        shape = built[-1].output_shape(shape)
    return Sequential(built), shape


class Network:
    """An instantiated :class:`NetworkSpec` with parameters, gradients and batched inference."""

    def __init__(self, spec, rng=None, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(0) if rng is None else rng
        branches, outs = [], []
        for s in spec.input_shapes:
            b, out = _instantiate(spec.branch, tuple(s), rng, dtype)
            branches.append(b)
            outs.append(out)
        merged = (sum(o[0] for o in outs),) + tuple(outs[0][1:])
        trunk, out = _instantiate(spec.trunk, merged, rng, dtype)
        if out != (6,):
            raise ShapeMismatch(f"network must end in 6 outputs, got {out}")
        self.root = MultiBranch(branches, trunk)

    @property
    def multi_input(self):
        return len(self.spec.input_shapes) > 1

    def _as_list(self, inputs):
        xs = list(inputs) if self.multi_input else [inputs]
        for x, s in zip(xs, self.spec.input_shapes):
            if x.ndim != 4 or tuple(x.shape[1:]) != tuple(s):
                raise ShapeMismatch(f"expected input (N, {', '.join(map(str, s))}), got {x.shape}")
        return [np.asarray(x, dtype=self.dtype) for x in xs]

    def forward(self, inputs, train=False, rng=None):
        return self.root.forward(self._as_list(inputs), train, rng)

    def backward(self, dout):
        dxs = self.root.backward(dout)
        return dxs if self.multi_input else dxs[0]

    def predict(self, inputs, batch_size=32):
        xs = self._as_list(inputs)
        n = xs[0].shape[0]
        outs = [self.root.forward([x[i:i + batch_size] for x in xs]) for i in range(0, n, batch_size)]
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, 6), self.dtype)

    def parameters(self):
        """Deterministically ordered ``(name, layer, key)`` triples."""
        return list(self.root.named_params())

    def param_arrays(self):
        return [(name, layer.params[key]) for name, layer, key in self.parameters()]

    def grad_arrays(self):
        return [(name, layer.grads[key]) for name, layer, key in self.parameters()]

    def num_params(self):
        return sum(int(layer.params[key].size) for _, layer, key in self.parameters())

    def get_flat(self):
        return np.concatenate([layer.params[key].ravel() for _, layer, key in self.parameters()])

    def set_flat(self, flat):
        flat = np.asarray(flat)
        if flat.size != self.num_params():
            raise ShapeMismatch(f"expected {self.num_params()} values, got {flat.size}")
        offset = 0
        for _, layer, key in self.parameters():
            p = layer.params[key]
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size


def build_event_net(profile="full", rng=None, dtype=np.float64, **kwargs):
    return Network(event_net_spec(profile, **kwargs), rng, dtype)


def build_frame_net(profile="full", rng=None, dtype=np.float64, **kwargs):
    return Network(frame_net_spec(profile, **kwargs), rng, dtype)


# ---------------------------------------------------------------------------
# pose vectors


def encode_pose(translation, rotation):
    """6-vector (t / 0.04 m, intrinsic XYZ Euler / 35 deg) used as regression target."""
    t = np.asarray(translation, dtype=float) / TRANSLATION_SCALE
    e = matrix_to_euler_xyz(np.asarray(rotation, dtype=float)) / ROTATION_SCALE
    return np.concatenate([t, e])


def decode_pose(vector):
    """Inverse of :func:`encode_pose`: returns ``(translation, rotation matrix)``."""
    v = np.asarray(vector, dtype=float)
    return v[:3] * TRANSLATION_SCALE, euler_xyz_to_matrix(v[3:6] * ROTATION_SCALE)


def encode_label(label):
    """Scale a raw (translation m, Euler rad) label into network units."""
    label = np.asarray(label, dtype=float)
    return np.concatenate([label[..., :3] / TRANSLATION_SCALE, label[..., 3:] / ROTATION_SCALE], axis=-1)


def decode_label(vector):
    v = np.asarray(vector, dtype=float)
    return np.concatenate([v[..., :3] * TRANSLATION_SCALE, v[..., 3:] * ROTATION_SCALE], axis=-1)
