"""Minimal dense-network machinery: tanh MLPs with explicit backprop, and the
SGD / Adam optimizers used by the trainable heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "Optimizer",
    "make_optimizer",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def init_mlp(sizes, rng):
    """Glorot-uniform weights and zero biases for consecutive ``sizes``."""
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params.append([W, np.zeros(fan_out)])
    return params


def mlp_forward(params, X):
    """tanh on hidden layers, identity on the output layer.

    Returns the output and the per-layer inputs needed by :func:`mlp_backward`.
    """
    acts = [X]
    h = X
    last = len(params) - 1
    for i, (W, b) in enumerate(params):
        z = h @ W + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_backward(params, acts, d_out):
    """Gradients ``[(dW, db), ...]`` and the gradient w.r.t. the input."""
    grads = [None] * len(params)
    delta = d_out
    last = len(params) - 1
    for i in range(last, -1, -1):
        W, _ = params[i]
        if i != last:
            delta = delta * (1.0 - acts[i + 1] ** 2)
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        delta = delta @ W.T
    return grads, delta


class Optimizer:
    """In-place first-order update over a nested list of parameter arrays."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        cfg = self.cfg
        flat_p = [a for layer in params for a in layer]
        flat_g = [g for layer in grads for g in layer]
        self.t += 1
        if cfg.optimizer == "sgd":
            for p, g in zip(flat_p, flat_g):
                p -= cfg.learning_rate * g
            return
        if self.m is None:
            self.m = [np.zeros_like(p) for p in flat_p]
            self.v = [np.zeros_like(p) for p in flat_p]
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(flat_p, flat_g, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    return Optimizer(cfg)
