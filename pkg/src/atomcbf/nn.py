"""Small fully connected networks: forward pass, MSE training, parameter Jacobians.

Hidden layers use tanh, the output layer is affine. Parameters are flattened
layer by layer; within a layer the weight matrix (``out x in``, row-major) comes
before the bias vector. ``param_jacobian`` columns follow this order.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODEL_MAGIC = b"ATOMNN1\n"


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DenseNet:
    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("one weight matrix and bias vector per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i}: got W{w.shape}, b{b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
        object.__setattr__(self, "layer_sizes", sizes)

    @classmethod
    def init(cls, layer_sizes, seed: int) -> "DenseNet":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            lim = 1.0 / np.sqrt(n_in)
            ws.append(rng.uniform(-lim, lim, size=(n_out, n_in)))
            bs.append(np.zeros(n_out))
        return cls(tuple(layer_sizes), tuple(ws), tuple(bs))

    @classmethod
    def from_params(cls, layer_sizes, params: np.ndarray) -> "DenseNet":
        params = np.asarray(params, dtype=float)
        ws, bs, k = [], [], 0
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            ws.append(params[k:k + n_in * n_out].reshape(n_out, n_in).copy())
            k += n_in * n_out
            bs.append(params[k:k + n_out].copy())
            k += n_out
        if k != params.size:
            raise ValueError(f"expected {k} parameters, got {params.size}")
        return cls(tuple(layer_sizes), tuple(ws), tuple(bs))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])


def _check_input(net: DenseNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.n_in or x.ndim not in (1, 2):
        raise ValueError(f"input shape {x.shape} incompatible with input dim {net.n_in}")
    return x


def _activations(weights, biases, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    n_layers = len(weights)
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = acts[-1] @ w.T + b
        acts.append(np.tanh(z) if i < n_layers - 1 else z)
    return acts


def forward(net: DenseNet, x) -> np.ndarray:
    """Network output for one input vector or a batch of row vectors."""
    return _activations(net.weights, net.biases, _check_input(net, x))[-1]


def param_jacobian_batch(net: DenseNet, x) -> np.ndarray:
    """Jacobians of every output w.r.t. all parameters, shape (batch, n_out, P)."""
    x = _check_input(net, x)
    if x.ndim == 1:
        x = x[None, :]
    acts = _activations(net.weights, net.biases, x)
    batch, n_out = x.shape[0], net.n_out
    # delta[b, j, :] = d output_j / d pre-activation of the current layer
    delta = np.broadcast_to(np.eye(n_out), (batch, n_out, n_out)).copy()
    blocks = []
    for layer in range(len(net.weights) - 1, -1, -1):
        a_prev = acts[layer]
        gw = delta[:, :, :, None] * a_prev[:, None, None, :]
        blocks.append(np.concatenate([gw.reshape(batch, n_out, -1), delta], axis=2))
        if layer > 0:
            delta = (delta @ net.weights[layer]) * (1.0 - a_prev ** 2)[:, None, :]
    return np.concatenate(blocks[::-1], axis=2)


def param_jacobian(net: DenseNet, x) -> np.ndarray:
    """Jacobian (n_out x P) of the outputs w.r.t. the flattened parameters at ``x``."""
    x = _check_input(net, x)
    if x.ndim != 1:
        raise ValueError("param_jacobian takes a single input; use param_jacobian_batch")
    return param_jacobian_batch(net, x)[0]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "sgd"  # or "adam"
    schedule: str = "constant"  # or "cosine": decay to 0 over the epochs

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def mse(net: DenseNet, inputs: np.ndarray, targets: np.ndarray) -> float:
    err = forward(net, inputs) - targets
    return float(np.mean(err ** 2))


def _gradients(weights, biases, x: np.ndarray, y: np.ndarray):
    acts = _activations(weights, biases, x)
    # loss = mean over batch and outputs of squared error
    delta = 2.0 * (acts[-1] - y) / y.size
    gws, gbs = [], []
    for layer in range(len(weights) - 1, -1, -1):
        gws.append(delta.T @ acts[layer])
        gbs.append(delta.sum(axis=0))
        if layer > 0:
            delta = (delta @ weights[layer]) * (1.0 - acts[layer] ** 2)
    return gws[::-1], gbs[::-1]


class _Adam:
    b1, b2, eps = 0.9, 0.999, 1e-8

    def __init__(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr: float) -> None:
        self.t += 1
        c1, c2 = 1.0 - self.b1 ** self.t, 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(net: DenseNet, inputs, targets, cfg: TrainConfig, history: list | None = None) -> DenseNet:
    """Minibatch gradient descent (plain SGD or Adam) on the mean squared error.

    Returns a new network; ``net`` is left untouched. If ``history`` is given,
    the full-data loss after every epoch is appended to it.
    """
    x = _check_input(net, inputs)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("training needs a non-empty 2-D input array")
    if y.shape != (len(x), net.n_out):
        raise ValueError(f"targets shape {y.shape} does not match ({len(x)}, {net.n_out})")
    if cfg.batch_size > len(x):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(x)}")

    ws = [w.copy() for w in net.weights]
    bs = [b.copy() for b in net.biases]
    params = ws + bs
    adam = _Adam(params) if cfg.optimizer == "adam" else None
    rng = np.random.default_rng(cfg.seed)
    n = len(x)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate
        if cfg.schedule == "cosine":
            lr *= 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        order = rng.permutation(n)
        # overflow shows up as a non-finite loss below, reported with the epoch
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                gws, gbs = _gradients(ws, bs, x[idx], y[idx])
                grads = gws + gbs
                if adam is None:
                    for p, g in zip(params, grads):
                        p -= lr * g
                else:
                    adam.step(params, grads, lr)
            loss = float(np.mean((_activations(ws, bs, x)[-1] - y) ** 2))
        if not np.isfinite(loss):
            raise DivergenceError(f"training diverged at epoch {epoch}: loss={loss}")
        if history is not None:
            history.append(loss)
    return DenseNet(net.layer_sizes, tuple(ws), tuple(bs))


def save_net(net: DenseNet, path) -> None:
    sizes = net.layer_sizes
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        f.write(net.params().astype("<f8").tobytes())


def load_net(path) -> DenseNet:
    raw = Path(path).read_bytes()
    if not raw.startswith(MODEL_MAGIC):
        raise ValueError(f"{path}: not an ATOMNN1 model file")
    k = len(MODEL_MAGIC)
    (n_sizes,) = struct.unpack_from("<I", raw, k)
    k += 4
    sizes = struct.unpack_from(f"<{n_sizes}I", raw, k)
    k += 4 * n_sizes
    params = np.frombuffer(raw, dtype="<f8", offset=k).astype(float)
    return DenseNet.from_params(sizes, params)
