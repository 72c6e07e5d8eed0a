"""Dense feed-forward networks with hand-written backprop, MSE and Adam.

Everything runs in float64 on plain numpy arrays. Parameters are updated in
place; a trained network is treated as frozen by convention.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("leaky_relu", "linear")


class ShapeError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    """Raised when a loss turns NaN or infinite."""


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError("bias must match weight rows")


@dataclass
class DenseNetwork:
    layers: list[Layer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[0] != b.W.shape[1]:
                raise ShapeError(f"layer sizes do not chain: {a.W.shape} -> {b.W.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def copy(self) -> "DenseNetwork":
        return DenseNetwork([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def __call__(self, x) -> np.ndarray:
        return forward(self, x).output


def init_network(
    sizes: Sequence[int],
    rng: np.random.Generator,
    hidden: str = "leaky_relu",
    output: str = "linear",
) -> DenseNetwork:
    """He-style uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(6.0 / n_in)
        W = rng.uniform(-bound, bound, size=(n_out, n_in))
        act = output if i == len(sizes) - 2 else hidden
        layers.append(Layer(W, np.zeros(n_out), act))
    return DenseNetwork(layers)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer
    output: np.ndarray


def _activate(z, act):
    if act == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    return z


def _activation_grad(z, act):
    if act == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    return np.ones_like(z)


def forward(net: DenseNetwork, x) -> ForwardCache:
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.shape[1] != net.in_dim:
        raise ShapeError(f"input has {h.shape[1]} columns, network expects {net.in_dim}")
    inputs, pre = [], []
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.W.T + layer.b
        pre.append(z)
        h = _activate(z, layer.activation)
    return ForwardCache(inputs, pre, h)


def backward(net: DenseNetwork, cache: ForwardCache, grad_out):
    """Backpropagate ``grad_out`` (dLoss/dOutput).

    Returns ``(grads, grad_input)`` where ``grads`` lines up with
    ``net.params()``.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ShapeError(f"gradient shape {g.shape} != output shape {cache.output.shape}")
    grads: list[np.ndarray] = []
    for layer, h, z in zip(reversed(net.layers), reversed(cache.inputs), reversed(cache.pre)):
        gz = g * _activation_grad(z, layer.activation)
        grads.append(gz.sum(axis=0))
        grads.append(gz.T @ h)
        g = gz @ layer.W
    grads.reverse()
    return grads, g


def mse_loss(pred, target):
    """Mean over every element of the squared error, with its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"{pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def rowwise_mse(pred, target) -> np.ndarray:
    diff = np.asarray(pred) - np.asarray(target)
    return np.mean(diff * diff, axis=1)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


# -- autoencoder -------------------------------------------------------------


@dataclass
class Autoencoder:
    encoder: DenseNetwork
    decoder: DenseNetwork

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params()

    def encode(self, x) -> np.ndarray:
        return forward(self.encoder, x).output

    def reconstruct(self, x) -> np.ndarray:
        return forward(self.decoder, self.encode(x)).output

    def reconstruction_loss(self, x) -> np.ndarray:
        """Per-row mean squared reconstruction error."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return rowwise_mse(self.reconstruct(x), x)

    def copy(self) -> "Autoencoder":
        return Autoencoder(self.encoder.copy(), self.decoder.copy())


def init_autoencoder(
    in_dim: int,
    widths: Sequence[int] = (16, 8),
    latent_dim: int = 5,
    rng: np.random.Generator | None = None,
) -> Autoencoder:
    """Mirrored autoencoder, e.g. 24-16-8-5 / 5-8-16-24 with linear latent and output."""
    rng = rng if rng is not None else np.random.default_rng(0)
    enc_sizes = [in_dim, *widths, latent_dim]
    return Autoencoder(
        init_network(enc_sizes, rng),
        init_network(enc_sizes[::-1], rng),
    )


@dataclass
class AutoencoderConfig:
    widths: tuple[int, ...] = (16, 8)
    latent_dim: int = 5
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    patience: int = 5
    min_delta: float = 1e-6
    seed: int = 0


def autoencoder_step(ae: Autoencoder, x: np.ndarray):
    """MSE loss and gradients (aligned with ``ae.params()``) for one batch."""
    enc = forward(ae.encoder, x)
    dec = forward(ae.decoder, enc.output)
    loss, g = mse_loss(dec.output, x)
    dec_grads, gz = backward(ae.decoder, dec, g)
    enc_grads, _ = backward(ae.encoder, enc, gz)
    return loss, enc_grads + dec_grads


def train_autoencoder(
    train: np.ndarray,
    val: np.ndarray | None = None,
    config: AutoencoderConfig | None = None,
) -> tuple[Autoencoder, list[dict]]:
    """Plain reconstruction training with Adam and validation early stopping.

    Keeps the parameters from the epoch with the best validation MSE. Without
    a validation set the training loss drives early stopping instead.
    """
    cfg = config or AutoencoderConfig()
    rng = np.random.default_rng(cfg.seed)
    train = np.asarray(train, dtype=np.float64)
    if train.shape[0] == 0:
        raise ValueError("empty training data")
    ae = init_autoencoder(train.shape[1], cfg.widths, cfg.latent_dim, rng)
    opt = AdamState(lr=cfg.lr)
    params = ae.params()
    best, best_loss, stale = ae.copy(), math.inf, 0
    history = []
    n = train.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = train[order[start:start + cfg.batch_size]]
            loss, grads = autoencoder_step(ae, batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            adam_step(params, grads, opt)
            total += loss * batch.shape[0]
        train_loss = total / n
        monitor = float(ae.reconstruction_loss(val).mean()) if val is not None and len(val) else train_loss
        history.append({"epoch": epoch, "train_mse": train_loss, "val_mse": monitor})
        logger.debug("epoch %d train %.6g val %.6g", epoch, train_loss, monitor)
        if monitor < best_loss - cfg.min_delta:
            best, best_loss, stale = ae.copy(), monitor, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history
