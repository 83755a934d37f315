"""Small dense numeric core: layers, Adam and finite-difference checks.

Parameters are stored as float32 arrays. Forward and backward passes promote
to float64, so dot products and loss reductions accumulate in 64 bits.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PARAM_DTYPE = np.float32


class ConfigurationError(ValueError):
    """Shapes or settings that cannot work together."""


class ContractViolation(RuntimeError):
    """An operation was called in a state it does not support."""


class Activation(str, enum.Enum):
    RELU = "relu"
    LINEAR = "linear"


def glorot_uniform(rng: np.random.Generator, in_dim: int, out_dim: int) -> np.ndarray:
    s = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-s, s, size=(in_dim, out_dim)).astype(PARAM_DTYPE)


def embedding_normal(rng: np.random.Generator, rows: int, dim: int, std: float = 0.01) -> np.ndarray:
    return rng.normal(0.0, std, size=(rows, dim)).astype(PARAM_DTYPE)


@dataclass
class DenseLayer:
    """Affine map followed by an activation, ``y = act(x @ W + b)``.

    ``weights`` has shape ``(in_dim, out_dim)``. Inputs may be a single vector
    or a batch of row vectors.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU
    _x: np.ndarray | None = field(default=None, repr=False, compare=False)
    _pre: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2:
            raise ConfigurationError("weights must be a matrix")
        if self.bias.shape != (self.weights.shape[1],):
            raise ConfigurationError(
                f"bias shape {self.bias.shape} does not match out_dim {self.weights.shape[1]}"
            )

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int,
             activation: Activation | str = Activation.RELU) -> "DenseLayer":
        return cls(glorot_uniform(rng, in_dim, out_dim), np.zeros(out_dim, dtype=PARAM_DTYPE),
                   Activation(activation))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Forward pass; caches input and pre-activation for :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(f"input width {x.shape[-1]} != layer in_dim {self.in_dim}")
        pre = x @ self.weights.astype(np.float64) + self.bias
        self._x, self._pre = x, pre
        return _activate(pre, self.activation)

    def forward_pre(self, pre: np.ndarray) -> np.ndarray:
        """Apply the activation to an externally computed pre-activation.

        Used by the sparse multi-hot path, which sums weight rows instead of
        running a full matrix product.
        """
        self._x, self._pre = None, pre
        return _activate(pre, self.activation)

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True):
        """Return ``(grad_W, grad_b, grad_x)`` for the cached forward pass.

        ``grad_W`` is None when the forward pass went through
        :meth:`forward_pre`; the caller then owns the weight gradient.
        """
        if self._pre is None:
            raise ContractViolation("backward called without a cached forward pass")
        g = np.asarray(grad_out, dtype=np.float64)
        if self.activation is Activation.RELU:
            g = g * (self._pre > 0)
        grad_b = g.sum(axis=0) if g.ndim == 2 else g
        grad_w = None
        if self._x is not None:
            grad_w = self._x.T @ g if g.ndim == 2 else np.outer(self._x, g)
        grad_x = g @ self.weights.T.astype(np.float64) if need_input_grad else None
        return grad_w, grad_b, grad_x


def _activate(pre: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(pre, 0.0)
    return pre


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def dense_backward(layer: DenseLayer, x: np.ndarray, grad_out: np.ndarray):
    """Gradients of ``layer`` at input ``x`` composed with ``grad_out``.

    The layer must have been run forward on ``x`` first; the cached
    pre-activation from that pass selects the ReLU mask.
    """
    if layer._x is None or layer._pre is None:
        raise ContractViolation("dense_backward needs the cached activations of a forward pass")
    if layer._x.shape != np.shape(x) or not np.array_equal(layer._x, x):
        raise ContractViolation("dense_backward input differs from the cached forward input")
    return layer.backward(grad_out)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kwargs) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], **kwargs)


class TrainingDiverged(FloatingPointError):
    pass


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Moments are kept in float64. A zero gradient leaves parameters bit-exact.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigurationError("params, grads and Adam state must align")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + state.epsilon)
        p -= update.astype(p.dtype)
    return state


def central_difference(f: Callable[[], float], param: np.ndarray, index: tuple, step: float) -> float:
    old = param[index]
    param[index] = old + step
    plus = f()
    param[index] = old - step
    minus = f()
    param[index] = old
    return (plus - minus) / (2.0 * step)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(model_forward: Callable[[], float], params: Sequence[np.ndarray],
               analytic: Sequence[np.ndarray], samples: int = 100, step: float = 1e-5,
               seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between ``analytic`` and central-difference gradients.

    ``model_forward`` re-evaluates the scalar output from the current values of
    ``params``; coordinates are perturbed in place and restored. ``samples``
    coordinates are drawn uniformly over all parameters (all of them when the
    model is smaller).
    """
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    if total <= samples:
        flat = np.arange(total)
    else:
        flat = np.sort(rng.choice(total, size=samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for k in flat:
        which = int(np.searchsorted(offsets, k, side="right") - 1)
        index = np.unravel_index(int(k - offsets[which]), params[which].shape)
        numeric = central_difference(model_forward, params[which], index, step)
        worst = max(worst, relative_error(float(analytic[which][index]), numeric, floor))
    return worst
