"""Dense autoencoder with hand-written backprop and momentum SGD.

All parameters of a model live in one contiguous float64 vector; the per-layer
weight and bias arrays are views into it.  That vector is the unit exchanged
between devices, so ``flatten`` and ``load`` are plain copies.

Canonical parameter order: layer 0 weights (row-major, shape ``(out, in)``),
layer 0 biases, layer 1 weights, layer 1 biases, ...
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import FormatError, ShapeError

ParamVector = np.ndarray

ACTIVATIONS = ("relu", "sigmoid", "identity")
DEFAULT_LAYER_SIZES = (784, 256, 64, 256, 784)

CHECKPOINT_MAGIC = b"WAFLAE01"
CHECKPOINT_SUFFIX = ".waflae"


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid(z)
    return z


def _activation_grad(name, z, a):
    """Derivative of the activation, given pre-activation z and output a."""
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


class Autoencoder:
    """Fully connected autoencoder whose parameters share one flat buffer."""

    def __init__(self, layer_sizes: Sequence[int] = DEFAULT_LAYER_SIZES,
                 activations: Optional[Sequence[str]] = None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ShapeError(f"layer sizes must be >= 2 positive integers, got {sizes}")
        if sizes != sizes[::-1]:
            raise ShapeError(f"layer sizes must mirror around the bottleneck, got {sizes}")
        n_layers = len(sizes) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["sigmoid"]
        activations = list(activations)
        if len(activations) != n_layers:
            raise ShapeError(f"need {n_layers} activations, got {len(activations)}")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if activations[-1] != "sigmoid":
            raise ValueError("final activation must be sigmoid")

        self.layer_sizes = sizes
        self.activations = activations
        self.params = np.zeros(sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:])))
        self.weights, self.biases = self._views(self.params)

    def _views(self, buf):
        weights, biases = [], []
        pos = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            weights.append(buf[pos:pos + n_in * n_out].reshape(n_out, n_in))
            pos += n_in * n_out
            biases.append(buf[pos:pos + n_out])
            pos += n_out
        return weights, biases

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int] = DEFAULT_LAYER_SIZES,
                   seed=None, activations=None) -> "Autoencoder":
        """Glorot-uniform weights, zero biases.  ``seed`` is anything numpy's
        ``default_rng`` accepts (int, SeedSequence, Generator)."""
        model = cls(layer_sizes, activations)
        rng = np.random.default_rng(seed)
        for w in model.weights:
            n_out, n_in = w.shape
            limit = np.sqrt(6.0 / (n_in + n_out))
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        return model

    @property
    def n_params(self) -> int:
        return self.params.size

    def copy(self) -> "Autoencoder":
        other = Autoencoder(self.layer_sizes, self.activations)
        other.params[:] = self.params
        return other

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.layer_sizes[0]:
            raise ShapeError(
                f"expected input of length {self.layer_sizes[0]}, got shape {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        """Reconstruct a single vector or a (batch, dim) array."""
        a = self._check_input(x)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            a = _activate(act, a @ w.T + b)
        return a

    def loss_and_grad(self, batch) -> tuple[float, ParamVector]:
        """Mean squared reconstruction error over every pixel of the batch,
        and its gradient in canonical parameter order."""
        x = self._check_input(batch)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[0] == 0:
            raise ValueError("empty batch")

        acts, pre = [x], []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = acts[-1] @ w.T + b
            pre.append(z)
            acts.append(_activate(act, z))
        diff = acts[-1] - x
        loss = float(np.mean(diff * diff))

        grad = np.zeros_like(self.params)
        gw, gb = self._views(grad)
        d_a = 2.0 * diff / diff.size
        for i in reversed(range(len(self.weights))):
            d_z = d_a * _activation_grad(self.activations[i], pre[i], acts[i + 1])
            gw[i][...] = d_z.T @ acts[i]
            gb[i][...] = d_z.sum(axis=0)
            if i:
                d_a = d_z @ self.weights[i]
        return loss, grad


@dataclass
class OptimizerState:
    """Classical momentum: v <- mu*v + g; theta <- theta - lr*v."""

    velocity: np.ndarray
    learning_rate: float = 0.001
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def for_model(cls, model: Autoencoder, learning_rate=0.001, momentum=0.9):
        return cls(np.zeros(model.n_params), learning_rate, momentum)


def forward(model: Autoencoder, x) -> np.ndarray:
    return model.forward(x)


def mse(x_hat, x) -> float:
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ShapeError(f"shape mismatch: {x_hat.shape} vs {x.shape}")
    if x.size == 0:
        raise ShapeError("mse of empty vectors")
    d = x_hat - x
    return float(np.mean(d * d))


def train_step(model: Autoencoder, opt: OptimizerState, batch) -> float:
    """One momentum-SGD update on ``batch``; returns the pre-update loss."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise ValueError("train_step needs a nonempty batch")
    loss, grad = model.loss_and_grad(batch)
    if opt.velocity.shape != grad.shape:
        raise ShapeError("optimizer velocity does not match model parameter count")
    opt.velocity *= opt.momentum
    opt.velocity += grad
    model.params -= opt.learning_rate * opt.velocity
    return loss


def flatten(model: Autoencoder) -> ParamVector:
    return model.params.copy()


def load(model: Autoencoder, params) -> None:
    params = np.asarray(params)
    if params.ndim != 1 or params.size != model.n_params:
        raise ShapeError(
            f"parameter vector of length {params.size} does not fit model with {model.n_params}")
    model.params[:] = params


GradientFn = Callable[[Autoencoder, np.ndarray], np.ndarray]


def _analytic_grad(model, batch):
    return model.loss_and_grad(batch)[1]


def grad_check(model: Autoencoder, batch, epsilon: float = 1e-5,
               gradient: GradientFn = _analytic_grad, max_params: int = 500,
               seed: int = 0) -> float:
    """Largest relative error between ``gradient`` and central differences.

    Models with more than ``max_params`` parameters are checked on a fixed
    random subsample of that many coordinates.  ``gradient`` can be swapped
    out to test the checker itself.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    batch = np.asarray(batch, dtype=np.float64)
    analytic = np.asarray(gradient(model, batch))
    n = model.n_params
    if n > max_params:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=max_params, replace=False))
    else:
        idx = np.arange(n)

    saved = model.params.copy()
    worst = 0.0
    try:
        for i in idx:
            model.params[i] = saved[i] + epsilon
            up = model.loss_and_grad(batch)[0]
            model.params[i] = saved[i] - epsilon
            down = model.loss_and_grad(batch)[0]
            model.params[i] = saved[i]
            numeric = (up - down) / (2 * epsilon)
            a = analytic[i]
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
    finally:
        model.params[:] = saved
    return worst


def save_checkpoint(model: Autoencoder, path) -> None:
    """Write ``WAFLAE01`` + uint64 LE count + float32 LE parameters."""
    values = model.params.astype("<f4")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", values.size))
        f.write(values.tobytes())


def read_checkpoint(path) -> ParamVector:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a WAFLAE01 checkpoint")
    (count,) = struct.unpack("<Q", data[8:16])
    if len(data) != 16 + 4 * count:
        raise FormatError(
            f"{path}: header declares {count} parameters but payload holds {(len(data) - 16) / 4}")
    return np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64)


def load_checkpoint(model: Autoencoder, path) -> None:
    load(model, read_checkpoint(path))
