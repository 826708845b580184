"""Multilayer perceptrons for the encoder and projection head, with manual backprop."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import ConfigurationError, DimensionMismatchError

_ACTIVATIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray, np.ndarray], np.ndarray]]] = {
    # name -> (forward, derivative given (pre-activation, activation))
    "tanh": (np.tanh, lambda pre, out: 1.0 - out**2),
    "relu": (lambda pre: np.maximum(pre, 0.0), lambda pre, out: (pre > 0).astype(pre.dtype)),
    "identity": (lambda pre: pre, lambda pre, out: np.ones_like(pre)),
}


@dataclass(frozen=True, eq=False)
class MLPParams:
    """Dense layers ``x @ W + b``; the activation follows every layer but the last."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionMismatchError("MLP needs one bias per weight matrix")
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            if weight.ndim != 2 or bias.shape != (weight.shape[1],):
                raise DimensionMismatchError(f"Layer {index}: weight {weight.shape} and bias {bias.shape} disagree")
            if index and self.weights[index - 1].shape[1] != weight.shape[0]:
                raise DimensionMismatchError(f"Layer {index} input width does not match layer {index - 1}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"Unknown activation: {self.activation}")

    @property
    def in_dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.weights[-1].shape[1])

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.in_dim,) + tuple(int(weight.shape[1]) for weight in self.weights)

    def arrays(self) -> Iterator[np.ndarray]:
        for weight, bias in zip(self.weights, self.biases):
            yield weight
            yield bias

    def map(self, fn: Callable[..., np.ndarray], *others: "MLPParams") -> "MLPParams":
        """Apply ``fn`` array-wise across this and ``others`` (same shapes)."""

        return MLPParams(
            weights=tuple(fn(*arrays) for arrays in zip(self.weights, *(o.weights for o in others))),
            biases=tuple(fn(*arrays) for arrays in zip(self.biases, *(o.biases for o in others))),
            activation=self.activation,
        )


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """Encoder (d_in -> D) followed by a projection head (D -> P)."""

    encoder: MLPParams
    head: MLPParams

    def __post_init__(self) -> None:
        if self.encoder.out_dim != self.head.in_dim:
            raise DimensionMismatchError(
                f"Encoder output {self.encoder.out_dim} does not match head input {self.head.in_dim}"
            )

    def arrays(self) -> Iterator[np.ndarray]:
        yield from self.encoder.arrays()
        yield from self.head.arrays()

    def map(self, fn: Callable[..., np.ndarray], *others: "NetworkParams") -> "NetworkParams":
        return NetworkParams(
            encoder=self.encoder.map(fn, *(o.encoder for o in others)),
            head=self.head.map(fn, *(o.head for o in others)),
        )

    def copy(self) -> "NetworkParams":
        return self.map(np.array)


# Aliases naming the two halves of the network.
EncoderParams = MLPParams
HeadParams = MLPParams


@dataclass(frozen=True)
class _LayerCache:
    inputs: np.ndarray
    pre: np.ndarray
    out: np.ndarray


def init_mlp(widths: Sequence[int], activation: str, rng: np.random.Generator) -> MLPParams:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases."""

    weights = tuple(
        rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        for fan_in, fan_out in zip(widths[:-1], widths[1:])
    )
    biases = tuple(np.zeros(fan_out) for fan_out in widths[1:])
    return MLPParams(weights=weights, biases=biases, activation=activation)


def mlp_forward(params: MLPParams, x: np.ndarray) -> tuple[np.ndarray, list[_LayerCache]]:
    """Forward pass over a batch ``(B, in_dim)``; returns output and per-layer caches."""

    if x.shape[-1] != params.in_dim:
        raise DimensionMismatchError(f"Input width {x.shape[-1]} does not match network input {params.in_dim}")
    act, _ = _ACTIVATIONS[params.activation]
    caches: list[_LayerCache] = []
    out = x
    last = len(params.weights) - 1
    for index, (weight, bias) in enumerate(zip(params.weights, params.biases)):
        pre = out @ weight + bias
        activated = pre if index == last else act(pre)
        caches.append(_LayerCache(inputs=out, pre=pre, out=activated))
        out = activated
    return out, caches


def mlp_backward(
    params: MLPParams, caches: Sequence[_LayerCache], grad_out: np.ndarray
) -> tuple[MLPParams, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every layer and the MLP input."""

    _, derivative = _ACTIVATIONS[params.activation]
    last = len(params.weights) - 1
    grad_weights: list[np.ndarray] = [np.empty(0)] * len(params.weights)
    grad_biases: list[np.ndarray] = [np.empty(0)] * len(params.weights)
    grad = grad_out
    for index in range(last, -1, -1):
        cache = caches[index]
        if index != last:
            grad = grad * derivative(cache.pre, cache.out)
        grad_weights[index] = cache.inputs.T @ grad
        grad_biases[index] = grad.sum(axis=0)
        grad = grad @ params.weights[index].T
    return MLPParams(weights=tuple(grad_weights), biases=tuple(grad_biases), activation=params.activation), grad


def encode(params: MLPParams, x: np.ndarray) -> np.ndarray:
    """Encoder forward pass for one vector ``(d_in,)`` or a batch ``(B, d_in)``."""

    array = np.asarray(x, dtype=np.float64)
    out, _ = mlp_forward(params, np.atleast_2d(array))
    return out[0] if array.ndim == 1 else out


def head_logits(params: MLPParams, z: np.ndarray) -> np.ndarray:
    """Projection-head logits for one embedding or a batch."""

    return encode(params, z)


__all__ = [
    "MLPParams",
    "NetworkParams",
    "EncoderParams",
    "HeadParams",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "encode",
    "head_logits",
]
