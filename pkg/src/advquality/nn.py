"""Dense ReLU classifier with exact gradients and momentum SGD.

Everything is float64. Layer ``i`` maps ``x -> W_i x + b_i`` with ``W_i`` of
shape ``(out, in)``; ReLU sits between layers and the last layer emits raw
logits.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .backend import kernels

LOG_FLOOR = 1e-300
CHECKPOINT_FORMAT = "advquality-network"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class Gradients(NamedTuple):
    weights: list
    biases: list


@dataclass
class Network:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        self.weights = [np.ascontiguousarray(W, dtype=np.float64) for W in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise DimensionError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i}: input width {W.shape[1]} does not chain with "
                    f"layer {i - 1} output width {self.weights[i - 1].shape[0]}")
        if self.class_count < 2:
            raise DimensionError("class_count must be at least 2")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def class_count(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [W.shape[0] for W in self.weights]

    def copy(self) -> "Network":
        return Network([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    # classifier protocol used by the attacks
    def logits(self, X):
        return forward(self, X)

    def loss_input_grad(self, X, Q):
        _check_input(self, X)
        return kernels.loss_input_grad(self.weights, self.biases, X, Q)

    def predict(self, X):
        return self.logits(np.atleast_2d(X)).argmax(axis=1)


def init_network(dims: Sequence[int], seed: int = 0) -> Network:
    """Glorot-uniform weights, zero biases."""
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise DimensionError(f"invalid layer widths {list(dims)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Network(weights, biases)


def mlp(input_dim: int, class_count: int, hidden: Sequence[int] = (64, 64), seed: int = 0) -> Network:
    return init_network([input_dim, *hidden, class_count], seed)


def _check_input(net: Network, X):
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise DimensionError(
            f"layer 0: expects input width {net.input_dim}, got array of shape {X.shape}")


def forward(net: Network, X, return_cache: bool = False):
    """Logits for a batch ``X`` of shape ``(n, input_dim)``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    _check_input(net, X)
    acts = kernels.forward(net.weights, net.biases, X)
    return acts if return_cache else acts[-1]


def backward(net: Network, X, grad_logits, cache=None):
    """Gradients of ``sum(grad_logits * logits)`` w.r.t. parameters and inputs."""
    G = np.ascontiguousarray(grad_logits, dtype=np.float64)
    acts = cache if cache is not None else forward(net, X, return_cache=True)
    if G.shape != acts[-1].shape:
        raise DimensionError(
            f"layer {len(net.weights) - 1}: upstream gradient {G.shape} does not match logits {acts[-1].shape}")
    dWs, dbs, dX = kernels.backward(net.weights, acts, G, True)
    return Gradients(dWs, dbs), dX


def softmax(z):
    """Softmax over the last axis, max-shifted."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label):
    """``-log probs[label]``; row-wise when ``probs`` is a matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        return float(-np.log(max(probs[int(label)], LOG_FLOOR)))
    p = probs[np.arange(len(probs)), np.asarray(label)]
    return -np.log(np.maximum(p, LOG_FLOOR))


def soft_cross_entropy(target, probs):
    """``-sum_c target[c] log probs[c]`` along the last axis."""
    target = np.asarray(target, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    out = -(target * np.log(np.maximum(probs, LOG_FLOOR))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class TrainConfig:
    epochs: int = 160
    base_lr: float = 0.1
    lr_decay_epochs: list = field(default_factory=lambda: [80, 120])
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    hidden: list = field(default_factory=lambda: [64, 64])

    def validate(self, prefix: str = "train") -> "TrainConfig":
        def bad(name, msg):
            raise ValueError(f"{prefix}.{name}: {msg}")

        if int(self.epochs) != self.epochs or self.epochs < 0:
            bad("epochs", "must be a nonnegative integer")
        if not self.base_lr > 0:
            bad("base_lr", "must be positive")
        decays = list(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])):
            bad("lr_decay_epochs", "must be strictly increasing")
        if decays and (decays[0] < 0 or decays[-1] >= max(self.epochs, 1)):
            bad("lr_decay_epochs", f"must lie in [0, epochs={self.epochs})")
        if not self.lr_decay_factor > 0:
            bad("lr_decay_factor", "must be positive")
        if not 0 <= self.momentum < 1:
            bad("momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            bad("weight_decay", "must be nonnegative")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            bad("batch_size", "must be a positive integer")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            bad("seed", "must be an unsigned 64-bit integer")
        if any(int(h) != h or h < 1 for h in self.hidden):
            bad("hidden", "widths must be positive integers")
        return self


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    drops = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.base_lr / cfg.lr_decay_factor ** drops


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity."""

    def __init__(self, net: Network, cfg: TrainConfig):
        self.cfg = cfg
        self.velocity = [np.zeros_like(p) for p in (*net.weights, *net.biases)]

    def step(self, net: Network, grads: Gradients, epoch: int) -> Network:
        lr = learning_rate(epoch, self.cfg)
        params = (*net.weights, *net.biases)
        for p, g, v in zip(params, (*grads.weights, *grads.biases), self.velocity):
            v *= self.cfg.momentum
            v += g + self.cfg.weight_decay * p
            p -= lr * v
        return net


def sgd_step(net: Network, grads: Gradients, epoch: int, cfg: TrainConfig, velocity=None) -> Network:
    """One update on a copy of ``net``; ``velocity`` (if given) is advanced in place."""
    out = net.copy()
    opt = SGD(out, cfg)
    if velocity is not None:
        opt.velocity = velocity
    return opt.step(out, grads, epoch)


def save_checkpoint(path, net: Network, train_cfg: TrainConfig | None = None):
    """Structured-text checkpoint; floats are stored as C99 hex, so reloads are bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": net.dims,
        "layers": [
            {"weight": [[float(v).hex() for v in row] for row in W],
             "bias": [float(v).hex() for v in b]}
            for W, b in zip(net.weights, net.biases)
        ],
        "train_config": asdict(train_cfg) if train_cfg is not None else None,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a network checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    weights = [np.array([[float.fromhex(v) for v in row] for row in layer["weight"]])
               for layer in doc["layers"]]
    biases = [np.array([float.fromhex(v) for v in layer["bias"]]) for layer in doc["layers"]]
    net = Network(weights, biases)
    if net.dims != doc["dims"]:
        raise DimensionError(f"{path}: recorded dims {doc['dims']} do not match layers {net.dims}")
    cfg = doc.get("train_config")
    return net, (TrainConfig(**cfg) if cfg is not None else None)
