"""Adam, the step learning-rate schedule, the training loop and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ..errors import EmptyDataset, FormatError, NonFiniteLoss, ZeroStd
from .network import Network, NetworkSpec

BASE_LR = 0.001
LR_DECAY = Fraction(3, 10)
LR_STEP_EPOCHS = 8


def lr_schedule(epoch, base_lr=BASE_LR, decay=LR_DECAY, step_epochs=LR_STEP_EPOCHS):
    """``base_lr * decay ** (epoch // step_epochs)``, evaluated exactly and rounded once."""
    exact = Fraction(repr(float(base_lr))) * Fraction(decay) ** (int(epoch) // step_epochs)
    return float(exact)


@dataclass
class AdamState:
    lr: float = BASE_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, net):
        """One bias-corrected Adam step over every parameter of ``net``, in place."""
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for name, layer, key in net.parameters():
            p, g = layer.params[key], layer.grads[key]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def mse_loss(pred, target):
    """Mean squared error and its gradient; the sum is exactly rounded, so sample order does not matter."""
    diff = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    loss = math.fsum((diff * diff).ravel().tolist()) / diff.size
    return loss, 2.0 * diff / diff.size


# Sign changes of an (x, y, z, roll, pitch, yaw) target when the event image is
# mirrored left-right or upside-down: mirroring conjugates the motion by a
# reflection, which flips the in-plane translation component and the two
# rotations whose axes lie in the mirror plane.
MIRROR_X = np.array([-1, 1, 1, 1, -1, -1], dtype=float)
MIRROR_Y = np.array([1, -1, 1, -1, 1, -1], dtype=float)


def mirror_augment(inputs, targets):
    """Append the three mirrored copies of every (C, H, W) sample with matching targets."""
    x = np.asarray(inputs)
    y = np.asarray(targets)
    xs = [x, x[..., ::-1], x[..., ::-1, :], x[..., ::-1, ::-1]]
    ys = [y, y * MIRROR_X, y * MIRROR_Y, y * (MIRROR_X * MIRROR_Y)]
    return np.ascontiguousarray(np.concatenate(xs)), np.concatenate(ys).astype(y.dtype, copy=False)


@dataclass
class TrainResult:
    losses: list  # per step
    epoch_losses: list
    steps: int
    adam: AdamState


def train(net, inputs, targets, rng, epochs=40, batch_size=256, base_lr=BASE_LR,
          lr_step_epochs=LR_STEP_EPOCHS, max_steps=None, adam=None, start_epoch=0,
          augment=None, log=None):
    """Minibatch Adam on MSE between network outputs and normalized 6-vector targets.

    ``inputs`` is an array (or, for multi-input nets, a list of arrays) with
    the sample axis first. Each epoch draws a fresh permutation from ``rng``;
    the same generator drives dropout and the optional ``augment(batch, rng)``
    hook. BLAS runs single-threaded so results are reproducible bit for bit.
    """
    xs = list(inputs) if net.multi_input else [inputs]
    targets = np.asarray(targets, dtype=net.dtype)
    n = len(targets)
    if n == 0:
        raise EmptyDataset("training set is empty")
    adam = AdamState(lr=base_lr) if adam is None else adam
    losses, epoch_losses = [], []
    steps = 0
    with threadpool_limits(limits=1):
        for epoch in range(start_epoch, start_epoch + epochs):
            adam.lr = lr_schedule(epoch, base_lr, step_epochs=lr_step_epochs)
            order = rng.permutation(n)
            batch_losses = []
            for start in range(0, n, batch_size):
                idx = np.sort(order[start:start + batch_size])
                batch = [x[idx] for x in xs]
                if augment is not None:
                    batch = augment(batch, rng)
                pred = net.forward(batch if net.multi_input else batch[0], train=True, rng=rng)
                loss, dloss = mse_loss(pred, targets[idx])
                if not math.isfinite(loss):
                    worst = max((float(np.max(np.abs(p))) for _, p in net.param_arrays()), default=0.0)
                    raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}, step {adam.step} "
                                        f"(lr {adam.lr}, largest |param| {worst:.3g})")
                net.backward(dloss.astype(net.dtype))
                adam.update(net)
                losses.append(loss)
                batch_losses.append(loss)
                steps += 1
                if max_steps is not None and steps >= max_steps:
                    epoch_losses.append(float(np.mean(batch_losses)))
                    return TrainResult(losses, epoch_losses, steps, adam)
            epoch_losses.append(float(np.mean(batch_losses)))
            if log is not None:
                log(f"epoch {epoch}: loss {epoch_losses[-1]:.6g} lr {adam.lr:.3g}")
    return TrainResult(losses, epoch_losses, steps, adam)


# ---------------------------------------------------------------------------
# frame-network input standardization


@dataclass(frozen=True)
class FrameStats:
    mean: tuple
    std: tuple

    def arrays(self):
        return np.asarray(self.mean, dtype=float), np.asarray(self.std, dtype=float)


def compute_frame_stats(frames):
    """Per-channel mean and standard deviation over a stack of (N, C, H, W) frames."""
    frames = np.asarray(frames, dtype=float)
    if frames.size == 0:
        raise EmptyDataset("no frames to compute statistics from")
    return FrameStats(tuple(frames.mean(axis=(0, 2, 3)).tolist()), tuple(frames.std(axis=(0, 2, 3)).tolist()))


def normalize_frame_input(frame, stats):
    mean, std = stats.arrays()
    if np.any(std <= 0):
        raise ZeroStd(f"channel standard deviations must be positive, got {std.tolist()}")
    shape = (-1, 1, 1)
    return (np.asarray(frame, dtype=float) - mean.reshape(shape)) / std.reshape(shape)


def denormalize_frame_input(frame, stats):
    mean, std = stats.arrays()
    return np.asarray(frame, dtype=float) * std.reshape(-1, 1, 1) + mean.reshape(-1, 1, 1)


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 header length, JSON header, float32 LE parameters,
# then (optionally) Adam first and second moments in the same order

CHECKPOINT_MAGIC = b"RGBDECK1"
CHECKPOINT_SCHEMA_VERSION = 1


def save_checkpoint(path, net, normalizer=None, frame_stats=None, adam=None, epoch=0, extra=None):
    params = net.parameters()
    header = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "architecture": net.spec.to_dict(),
        "params": [[name, list(layer.params[key].shape)] for name, layer, key in params],
        "normalizer": normalizer,
        "frame_stats": None if frame_stats is None else {"mean": list(frame_stats.mean),
                                                         "std": list(frame_stats.std)},
        "epoch": int(epoch),
        "adam": None if adam is None else {"step": adam.step, "lr": adam.lr, "beta1": adam.beta1,
                                           "beta2": adam.beta2, "eps": adam.eps},
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for _, layer, key in params:
            f.write(np.ascontiguousarray(layer.params[key], dtype="<f4").tobytes())
        if adam is not None:
            for moments in (adam.m, adam.v):
                for name, layer, key in params:
                    arr = moments.get(name, np.zeros_like(layer.params[key]))
                    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


@dataclass
class Checkpoint:
    net: Network
    normalizer: float | None
    frame_stats: FrameStats | None
    adam: AdamState | None
    epoch: int
    extra: dict


def load_checkpoint(path, dtype=np.float64):
    data = Path(path).read_bytes()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file", path)
    offset = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, offset)
    offset += 4
    try:
        header = json.loads(data[offset:offset + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt header: {exc.msg}", path) from None
    offset += hlen
    net = Network(NetworkSpec.from_dict(header["architecture"]), dtype=dtype)
    params = net.parameters()
    names = [[name, list(layer.params[key].shape)] for name, layer, key in params]
    if names != header["params"]:
        raise FormatError("parameter layout does not match the architecture", path)

    def read_block():
        nonlocal offset
        out = {}
        for name, layer, key in params:
            p = layer.params[key]
            nbytes = 4 * p.size
            if offset + nbytes > len(data):
                raise FormatError("truncated parameter data", path)
            out[name] = np.frombuffer(data, "<f4", p.size, offset).reshape(p.shape).astype(dtype)
            offset += nbytes
        return out

    values = read_block()
    for name, layer, key in params:
        layer.params[key][...] = values[name]
    adam = None
    if header.get("adam"):
        a = header["adam"]
        m, v = read_block(), read_block()
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"], m=m, v=v)
    fs = header.get("frame_stats")
    stats = FrameStats(tuple(fs["mean"]), tuple(fs["std"])) if fs else None
    return Checkpoint(net, header.get("normalizer"), stats, adam, header.get("epoch", 0), header.get("extra", {}))
