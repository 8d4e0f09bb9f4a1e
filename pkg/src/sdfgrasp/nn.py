"""Small dense networks with exact reverse-mode gradients for parameters and inputs.

Batches are row-major: inputs have shape ``(B, fan_in)``.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}
FORMAT_VERSION = 1
BCE_EPS = 1e-7


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    if act == "sigmoid":
        # split keeps exp from overflowing on large |z|
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return z


def _activation_grad(z, y, act):
    if act == "relu":
        return (z > 0).astype(z.dtype)
    if act == "tanh":
        return 1.0 - y * y
    if act == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(z)


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("weight must be (out, in) and match bias length")

    @property
    def fan_in(self):
        return self.weight.shape[1]

    @property
    def fan_out(self):
        return self.weight.shape[0]


class DenseNetwork:
    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise ValueError(f"layer dimension mismatch: {a.fan_out} -> {b.fan_in}")

    @classmethod
    def create(cls, sizes, activations, rng=None, zero_last=False):
        """He-style uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        if isinstance(activations, str):
            activations = [activations] * (len(sizes) - 1)
        if len(activations) != len(sizes) - 1:
            raise ValueError("one activation per layer")
        layers = []
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / fi)
            W = rng.uniform(-bound, bound, size=(fo, fi))
            if zero_last and i == len(sizes) - 2:
                W = np.zeros((fo, fi))
            layers.append(Layer(W, np.zeros(fo), activations[i]))
        return cls(layers)

    @property
    def fan_in(self):
        return self.layers[0].fan_in

    @property
    def fan_out(self):
        return self.layers[-1].fan_out

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def copy(self):
        return DenseNetwork([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def digest(self):
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def forward(self, x, keep=False):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        a = x.reshape(1, -1) if single else x
        if a.shape[1] != self.fan_in:
            raise ValueError(f"input width {a.shape[1]} != fan-in {self.fan_in}")
        cache = [a]
        for layer in self.layers:
            z = a @ layer.weight.T + layer.bias
            a = _activate(z, layer.activation)
            if keep:
                cache.append((z, a))
        out = a[0] if single else a
        return (out, cache) if keep else out

    def backward_cached(self, cache, upstream, need_params=True):
        """Returns (param grads as [(dW, db), ...], input grad) summed over the batch."""
        upstream = np.asarray(upstream, dtype=float)
        g = upstream.reshape(1, -1) if upstream.ndim == 1 else upstream
        if g.shape[1] != self.fan_out:
            raise ValueError(f"upstream width {g.shape[1]} != fan-out {self.fan_out}")
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            z, y = cache[i + 1]
            a_prev = cache[0] if i == 0 else cache[i][1]
            dz = g * _activation_grad(z, y, layer.activation)
            if need_params:
                grads[i] = (dz.T @ a_prev, dz.sum(axis=0))
            g = dz @ layer.weight
        return grads, (g[0] if upstream.ndim == 1 else g)

    def backward(self, x, upstream, need_params=True):
        _, cache = self.forward(x, keep=True)
        return self.backward_cached(cache, upstream, need_params)

    def input_gradient(self, x):
        """d(output)/d(input) for single-output networks, one row per input row."""
        if self.fan_out != 1:
            raise ValueError("input_gradient needs a scalar-output network")
        x = np.asarray(x, dtype=float)
        _, cache = self.forward(x, keep=True)
        ones = np.ones((cache[0].shape[0], 1))
        _, g = self.backward_cached(cache, ones, need_params=False)
        return g[0] if x.ndim == 1 else g

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self):
        parts = [b"SDFG", struct.pack("<II", FORMAT_VERSION, len(self.layers))]
        for layer in self.layers:
            parts.append(struct.pack("<IIB", layer.fan_in, layer.fan_out, _ACT_CODE[layer.activation]))
            parts.append(layer.weight.astype("<f8").tobytes(order="C"))
            parts.append(layer.bias.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != b"SDFG":
            raise ValueError("bad magic; not an SDFG network file")
        version, n = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported SDFG version {version}")
        off = 12
        layers = []
        for _ in range(n):
            fi, fo, code = struct.unpack_from("<IIB", data, off)
            off += 9
            W = np.frombuffer(data, "<f8", fi * fo, off).reshape(fo, fi).copy()
            off += 8 * fi * fo
            b = np.frombuffer(data, "<f8", fo, off).copy()
            off += 8 * fo
            layers.append(Layer(W, b, ACTIVATIONS[code]))
        return cls(layers)

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def forward(net, x):
    return net.forward(x)


def backward(net, x, upstream):
    return net.backward(x, upstream)


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.size == 0:
        raise ValueError("mse_loss on empty input")
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def bce_loss(prob, label):
    """Binary cross-entropy, mean over entries; gradient w.r.t. ``prob``."""
    label = np.asarray(label, dtype=float)
    if not np.all((label == 0) | (label == 1)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(np.asarray(prob, dtype=float), BCE_EPS, 1 - BCE_EPS)
    n = max(p.size, 1)
    loss = -(label * np.log(p) + (1 - label) * np.log(1 - p))
    grad = (-label / p + (1 - label) / (1 - p)) / n
    if p.ndim == 0:
        return float(loss), float(grad)
    return float(loss.mean()), grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr=None):
    """In-place Adam update of ``params`` (list of arrays); returns False if rejected."""
    if isinstance(params, DenseNetwork):
        params = params.parameters()
    flat = [g for pair in grads for g in (pair if isinstance(pair, tuple) else (pair,))]
    if len(flat) != len(params):
        raise ValueError("gradient list does not match parameters")
    if not all(np.all(np.isfinite(g)) for g in flat):
        log.warning("adam step %d rejected: non-finite gradient", state.step)
        return False
    lr = state.lr if lr is None else lr
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1 - state.beta1 ** state.step
    c2 = 1 - state.beta2 ** state.step
    for p, g, m, v in zip(params, flat, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError("gradient shape mismatch")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


@dataclass
class TrainingReport:
    epoch_losses: list
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def final_loss(self):
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")

    def to_dict(self, with_time=False):
        d = {"epoch_losses": [float(x) for x in self.epoch_losses], "final_loss": float(self.final_loss)}
        d.update(self.extra)
        if with_time:
            d["wall_time"] = self.wall_time
        return d


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
