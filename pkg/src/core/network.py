"""
Fully-connected ReLU network with manual backpropagation.

Each layer keeps the inputs it saw (with a homogeneous 1 appended, so the
bias is the last row of W) and the gradients of log p with respect to its
pre-activations. Those two caches are exactly what the Kronecker factors
A and S are estimated from.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Literal, Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from src.utils.errors import ShapeError, StaleCacheError

logger = logging.getLogger(__name__)

Task = Literal["regression", "classification"]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LayerState:
    """One dense layer: weights plus the caches of the latest pass."""

    weights: np.ndarray
    inputs: Optional[np.ndarray] = None
    preacts: Optional[np.ndarray] = None
    preact_grads: Optional[np.ndarray] = None
    forward_pass: int = -1
    backward_pass: int = -1

    @property
    def n_in(self) -> int:
        """Number of inputs excluding the homogeneous coordinate."""
        return self.weights.shape[0] - 1

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]

    @property
    def is_fresh(self) -> bool:
        return self.preact_grads is not None and self.backward_pass == self.forward_pass

    def check_fresh(self) -> None:
        """
        Raises:
            StaleCacheError: if the caches were not refreshed by the latest pass
        """
        if not self.is_fresh:
            raise StaleCacheError(
                f"layer caches are stale (forward pass {self.forward_pass}, "
                f"backward pass {self.backward_pass})"
            )


@dataclass(frozen=True)
class GaussianNoiseModel:
    """Gamma prior Gam(a0, b0) and posterior Gam(alpha, beta) on the likelihood precision."""

    a0: float = 6.0
    b0: float = 6.0
    alpha: float = 6.0
    beta: float = 6.0

    def __post_init__(self):
        for name in ("a0", "b0", "alpha", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"GaussianNoiseModel.{name} must be positive")

    @classmethod
    def from_prior(cls, a0: float = 6.0, b0: float = 6.0) -> "GaussianNoiseModel":
        return cls(a0=a0, b0=b0, alpha=a0, beta=b0)

    @property
    def precision(self) -> float:
        """Posterior mean E[gamma] = alpha / beta."""
        return self.alpha / self.beta


class Network:
    """
    Multi-layer perceptron with ReLU hidden units and a linear output layer.

    Weights live in ``layers[l].weights`` with shape (n_in + 1, n_out).
    A single instance is single-writer: forward/backward mutate caches.
    """

    def __init__(self, layers: List[LayerState], task: Task = "regression"):
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ShapeError(
                    f"layer shapes do not compose: {prev.weights.shape} -> {nxt.weights.shape}"
                )
        self.layers = layers
        self.task = task
        self._pass = 0

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        task: Task = "regression",
    ) -> "Network":
        """
        Create a network with N(0, 1/n_in) weights and zero biases.

        Args:
            sizes: layer widths, input first, output last
            rng: random generator
            task: likelihood family

        Returns:
            Freshly initialized network
        """
        if len(sizes) < 2:
            raise ShapeError("a network needs at least an input and an output size")
        layers = []
        for n_in, n_out in zip(sizes, sizes[1:]):
            weights = np.zeros((n_in + 1, n_out))
            weights[:-1] = rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)
            layers.append(LayerState(weights=weights))
        return cls(layers, task=task)

    @property
    def shapes(self) -> List[tuple]:
        return [layer.weights.shape for layer in self.layers]

    def get_weights(self) -> List[np.ndarray]:
        return [layer.weights.copy() for layer in self.layers]

    def set_weights(self, weights: Sequence[np.ndarray]) -> None:
        if len(weights) != len(self.layers):
            raise ShapeError(f"expected {len(self.layers)} weight matrices, got {len(weights)}")
        for layer, w in zip(self.layers, weights):
            if w.shape != layer.weights.shape:
                raise ShapeError(f"weight shape {w.shape} does not match {layer.weights.shape}")
            layer.weights = np.array(w, dtype=float)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """
        Run a forward pass and cache per-layer homogeneous inputs.

        Args:
            x: batch x n_in input matrix

        Returns:
            batch x n_out network output (pre-activation of the last layer)
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.layers[0].n_in:
            raise ShapeError(
                f"input has {x.shape[1]} features, first layer expects {self.layers[0].n_in}"
            )
        self._pass += 1
        h = x
        last = len(self.layers) - 1
        for idx, layer in enumerate(self.layers):
            a = np.hstack([h, np.ones((h.shape[0], 1))])
            s = a @ layer.weights
            layer.inputs = a
            layer.preacts = s
            layer.preact_grads = None
            layer.forward_pass = self._pass
            h = s if idx == last else np.maximum(s, 0.0)
        return h

    def backward(self, output_grad: np.ndarray) -> List[np.ndarray]:
        """
        Backpropagate per-example gradients of log p through the network.

        Args:
            output_grad: batch x n_out matrix of d log p_i / d output_i

        Returns:
            Per-layer mean gradient over the batch, each shaped like W

        Raises:
            StaleCacheError: if forward has not been called for this pass
        """
        if any(layer.inputs is None or layer.forward_pass != self._pass for layer in self.layers):
            raise StaleCacheError("backward called before forward")
        g = np.atleast_2d(np.asarray(output_grad, dtype=float))
        batch = self.layers[0].inputs.shape[0]
        if g.shape != (batch, self.layers[-1].n_out):
            raise ShapeError(f"output gradient shape {g.shape} does not match batch output")

        grads: List[np.ndarray] = [None] * len(self.layers)
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            layer.preact_grads = g
            layer.backward_pass = self._pass
            grads[idx] = layer.inputs.T @ g / batch
            if idx > 0:
                below = self.layers[idx - 1]
                g = (g @ layer.weights[:-1].T) * (below.preacts > 0)
        return grads


def per_example_gradients(layer: LayerState) -> np.ndarray:
    """Stack of per-example weight gradients a_i g_i^T, shape (batch, n_in + 1, n_out)."""
    layer.check_fresh()
    return np.einsum("bi,bj->bij", layer.inputs, layer.preact_grads)


def _as_column(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values.reshape(-1, 1) if values.ndim == 1 else values


def _check_labels(predictions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    labels = np.asarray(targets)
    if labels.ndim != 1 or labels.shape[0] != predictions.shape[0]:
        raise ShapeError("classification targets must be a vector with one label per example")
    if not np.all(np.equal(np.mod(labels, 1), 0)):
        raise ValueError("classification labels must be integers")
    labels = labels.astype(int)
    if np.any(labels < 0) or np.any(labels >= predictions.shape[1]):
        raise ValueError(f"label index out of range [0, {predictions.shape[1]})")
    return labels


def log_likelihood(
    task: Task,
    predictions: np.ndarray,
    targets: np.ndarray,
    noise: Optional[GaussianNoiseModel] = None,
) -> np.ndarray:
    """
    Per-example log p(y | x, w).

    Regression uses a Gaussian with the plug-in precision E[gamma];
    classification uses the log-softmax at the label.
    """
    predictions = np.atleast_2d(np.asarray(predictions, dtype=float))
    if task == "regression":
        if noise is None:
            raise ValueError("regression log-likelihood requires a noise model")
        residual = _as_column(targets) - _as_column(predictions)
        tau = noise.precision
        return np.sum(-0.5 * LOG_2PI + 0.5 * math.log(tau) - 0.5 * tau * residual ** 2, axis=1)
    labels = _check_labels(predictions, targets)
    return log_softmax(predictions, axis=1)[np.arange(labels.shape[0]), labels]


def log_likelihood_grad(
    task: Task,
    predictions: np.ndarray,
    targets: np.ndarray,
    noise: Optional[GaussianNoiseModel] = None,
) -> np.ndarray:
    """Gradient of per-example log p with respect to the network output."""
    predictions = np.atleast_2d(np.asarray(predictions, dtype=float))
    if task == "regression":
        if noise is None:
            raise ValueError("regression log-likelihood requires a noise model")
        return noise.precision * (_as_column(targets) - _as_column(predictions))
    labels = _check_labels(predictions, targets)
    grad = -softmax(predictions, axis=1)
    grad[np.arange(labels.shape[0]), labels] += 1.0
    return grad


def sample_targets(
    task: Task,
    predictions: np.ndarray,
    noise: Optional[GaussianNoiseModel],
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw one target per input from the model's predictive distribution."""
    predictions = np.atleast_2d(np.asarray(predictions, dtype=float))
    if task == "regression":
        if noise is None:
            raise ValueError("regression sampling requires a noise model")
        return predictions + rng.standard_normal(predictions.shape) / math.sqrt(noise.precision)
    probs = softmax(predictions, axis=1)
    cumulative = np.cumsum(probs, axis=1)
    draws = rng.random((predictions.shape[0], 1))
    return np.minimum((draws > cumulative).sum(axis=1), predictions.shape[1] - 1)


def update_noise_precision(noise: GaussianNoiseModel, residuals: np.ndarray) -> GaussianNoiseModel:
    """
    Conjugate moment update of the Gamma posterior on the noise precision.

    alpha <- a0 + N/2, beta <- b0 + sum(residual^2)/2

    Raises:
        ValueError: if residuals is empty
    """
    residuals = np.asarray(residuals, dtype=float).ravel()
    if residuals.size == 0:
        raise ValueError("update_noise_precision needs at least one residual")
    updated = replace(
        noise,
        alpha=noise.a0 + 0.5 * residuals.size,
        beta=noise.b0 + 0.5 * float(np.sum(residuals ** 2)),
    )
    logger.debug("noise precision updated to %.4f", updated.precision)
    return updated
