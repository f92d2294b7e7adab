"""
A small feed-forward noise-prediction network with explicit forward and backward passes.
"""

from __future__ import annotations

import struct
from enum import Enum
from pathlib import Path
from typing import List, MutableSequence, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from huberdiff.numerics import Matrix, Vector, Rng, ArrayLike, DTYPE, ShapeError, as_matrix, assert_finite

try:
    from typing_extensions import Self
except ImportError:  # pragma: no cover
    from typing import Self  # type: ignore  # pragma: no cover


def time_features(t: ArrayLike, dim: int = 16, horizon: float = 1.0) -> npt.NDArray[np.float64]:
    """
    Embed times as sines followed by cosines over geometrically spaced frequencies.

    The lowest frequency completes a quarter period over the horizon, which makes the embedding injective on it.

    :return: A vector for a scalar time, or one row per time.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f'The time feature dimension must be a positive even number, but got {dim}.')
    ts = np.asarray(t, dtype=DTYPE)
    frequencies = np.geomspace(0.25, 16.0, dim // 2)
    phases = 2.0 * np.pi * ts[..., np.newaxis] * frequencies / horizon
    return np.concatenate([np.sin(phases), np.cos(phases)], axis=-1)


class Activation(Enum):
    SILU = 'silu'
    TANH = 'tanh'


_ACTIVATION_CODES = {
    Activation.SILU: 0,
    Activation.TANH: 1,
}


def _activate(activation: Activation, z: Matrix) -> Tuple[Matrix, Matrix]:
    if activation is Activation.TANH:
        a = np.tanh(z)
        return a, 1.0 - a * a
    sigmoid = 0.5 * (1.0 + np.tanh(0.5 * z))
    return z * sigmoid, sigmoid * (1.0 + z * (1.0 - sigmoid))


class BackwardBeforeForwardError(RuntimeError):
    pass


class ScoreNet:
    """
    Predicts the noise that was added to a point, given the noisy point and its time.
    """

    def __init__(
        self,
        weights: Sequence[Matrix],
        biases: Sequence[Vector],
        *,
        time_feature_dim: int = 16,
        activation: Activation = Activation.SILU,
        horizon: float = 1.0,
    ):
        if len(weights) != len(biases) or len(weights) < 2:
            raise ValueError(f'A network needs at least one hidden layer and one bias per layer, but got {len(weights)} weight matrices and {len(biases)} bias vectors.')
        self.weights: List[Matrix] = [np.array(w, dtype=DTYPE) for w in weights]
        self.biases: List[Vector] = [np.array(b, dtype=DTYPE) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ShapeError(f'Layer {i} has a {w.shape} weight matrix but a bias of shape {b.shape}.')
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f'Layer {i} expects {w.shape[1]} inputs, but layer {i - 1} has {self.weights[i - 1].shape[0]} outputs.')
        self.time_feature_dim = time_feature_dim
        self.activation = activation
        self.horizon = horizon
        self.data_dim = self.weights[-1].shape[0]
        if self.weights[0].shape[1] != self.data_dim + time_feature_dim:
            raise ShapeError(f'The input layer takes {self.weights[0].shape[1]} inputs, but data and time features make {self.data_dim + time_feature_dim}.')
        self._cache: Optional[Tuple[List[Matrix], List[Matrix]]] = None

    @classmethod
    def initialize(
        cls,
        data_dim: int,
        rng: Rng,
        *,
        hidden: Sequence[int] = (64, 64),
        time_feature_dim: int = 16,
        activation: Activation = Activation.SILU,
        horizon: float = 1.0,
    ) -> Self:
        if not hidden or min(hidden) < 1:
            raise ValueError(f'A network needs at least one nonempty hidden layer, but got {hidden}.')
        widths = [data_dim + time_feature_dim, *hidden, data_dim]
        weights = []
        biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, fan_out))
        return cls(weights, biases, time_feature_dim=time_feature_dim, activation=activation, horizon=horizon)

    @property
    def parameters(self) -> List[npt.NDArray[np.float64]]:
        """
        The parameter arrays themselves, ordered as weights then bias per layer. Updating them updates the network.
        """
        parameters: List[npt.NDArray[np.float64]] = []
        for w, b in zip(self.weights, self.biases):
            parameters.append(w)
            parameters.append(b)
        return parameters

    @property
    def parameter_count(self) -> int:
        return sum(parameter.size for parameter in self.parameters)

    def copy(self) -> Self:
        return type(self)(
            self.weights,
            self.biases,
            time_feature_dim=self.time_feature_dim,
            activation=self.activation,
            horizon=self.horizon,
        )

    def forward(self, x: ArrayLike, t: ArrayLike) -> npt.NDArray[np.float64]:
        """
        Predict the noise for one point (a vector) or a batch of points (one row each).

        The activations are retained for :py:meth:`ScoreNet.backward`.
        """
        x_array = np.asarray(x, dtype=DTYPE)
        single = x_array.ndim == 1
        points = as_matrix(x_array)
        if points.shape[1] != self.data_dim:
            raise ShapeError(f'Expected points of dimension {self.data_dim}, but got {points.shape[1]}.')
        ts = np.broadcast_to(np.asarray(t, dtype=DTYPE), (points.shape[0],))
        h = np.concatenate([points, time_features(ts, self.time_feature_dim, self.horizon)], axis=1)
        inputs = [h]
        derivatives = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h, derivative = _activate(self.activation, h @ w.T + b)
            inputs.append(h)
            derivatives.append(derivative)
        output = h @ self.weights[-1].T + self.biases[-1]
        self._cache = inputs, derivatives
        return output[0] if single else output

    __call__ = forward

    def backward(self, upstream: ArrayLike) -> List[npt.NDArray[np.float64]]:
        """
        Backpropagate the gradient of a loss with respect to the last forward pass's output.

        :return: The gradient of the loss with respect to every parameter, ordered as :py:attr:`ScoreNet.parameters`.
        """
        if self._cache is None:
            raise BackwardBeforeForwardError('Cannot backpropagate before a forward pass.')
        inputs, derivatives = self._cache
        grad_output = as_matrix(upstream)
        if grad_output.shape != (inputs[0].shape[0], self.data_dim):
            raise ShapeError(f'Expected an upstream gradient of shape {(inputs[0].shape[0], self.data_dim)}, but got {grad_output.shape}.')
        grads: MutableSequence[npt.NDArray[np.float64]] = []
        for layer in reversed(range(len(self.weights))):
            grads.append(grad_output.sum(axis=0))
            grads.append(grad_output.T @ inputs[layer])
            if layer:
                grad_output = (grad_output @ self.weights[layer]) * derivatives[layer - 1]
        return list(reversed(grads))


class Adam:
    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self._first_moments: List[npt.NDArray[np.float64]] = []
        self._second_moments: List[npt.NDArray[np.float64]] = []

    def step(self, parameters: Sequence[npt.NDArray[np.float64]], grads: Sequence[npt.NDArray[np.float64]]) -> None:
        if len(parameters) != len(grads):
            raise ShapeError(f'Got {len(grads)} gradients for {len(parameters)} parameters.')
        if not self._first_moments:
            self._first_moments = [np.zeros_like(parameter) for parameter in parameters]
            self._second_moments = [np.zeros_like(parameter) for parameter in parameters]
        self.step_count += 1
        first_correction = 1.0 - self.beta1 ** self.step_count
        second_correction = 1.0 - self.beta2 ** self.step_count
        for parameter, grad, m, v in zip(parameters, grads, self._first_moments, self._second_moments):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            parameter -= self.learning_rate * (m / first_correction) / (np.sqrt(v / second_correction) + self.epsilon)


def check_gradients(
    net: ScoreNet,
    x: ArrayLike,
    t: ArrayLike,
    upstream: ArrayLike,
    h: float = 1e-5,
) -> float:
    """
    Audit backpropagation against central finite differences of ⟨upstream, forward(x, t)⟩.

    :return: The largest relative error over all parameters.
    """
    upstream_matrix = as_matrix(upstream)

    def objective() -> float:
        return float(np.sum(upstream_matrix * as_matrix(net.forward(x, t))))

    net.forward(x, t)
    analytic = net.backward(upstream_matrix)
    worst = 0.0
    for parameter, grad in zip(net.parameters, analytic):
        for index in np.ndindex(parameter.shape):
            original = parameter[index]
            parameter[index] = original + h
            plus = objective()
            parameter[index] = original - h
            minus = objective()
            parameter[index] = original
            numeric = (plus - minus) / (2.0 * h)
            error = abs(grad[index] - numeric) / max(abs(grad[index]), abs(numeric), 1e-4)
            worst = max(worst, error)
    return worst


_CHECKPOINT_MAGIC = b'HDNN'
_CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct('<4sIIIdI')
_CHECKPOINT_LAYER = struct.Struct('<II')


def save_checkpoint(net: ScoreNet, path: Union[str, Path]) -> None:
    with open(path, 'wb') as f:
        f.write(_CHECKPOINT_HEADER.pack(
            _CHECKPOINT_MAGIC,
            _CHECKPOINT_VERSION,
            net.time_feature_dim,
            _ACTIVATION_CODES[net.activation],
            net.horizon,
            len(net.weights),
        ))
        for w in net.weights:
            f.write(_CHECKPOINT_LAYER.pack(*w.shape))
        for w, b in zip(net.weights, net.biases):
            f.write(assert_finite(w).astype('<f8').tobytes())
            f.write(assert_finite(b).astype('<f8').tobytes())


def load_checkpoint(path: Union[str, Path]) -> ScoreNet:
    with open(path, 'rb') as f:
        payload = f.read()
    try:
        magic, version, time_feature_dim, activation_code, horizon, n_layers = _CHECKPOINT_HEADER.unpack_from(payload)
    except struct.error:
        raise ValueError(f'{path} is too short to be a network checkpoint.') from None
    if magic != _CHECKPOINT_MAGIC or version != _CHECKPOINT_VERSION:
        raise ValueError(f'{path} is not a version {_CHECKPOINT_VERSION} network checkpoint.')
    activations = {code: activation for activation, code in _ACTIVATION_CODES.items()}
    if activation_code not in activations:
        raise ValueError(f'{path} uses the unknown activation code {activation_code}.')
    offset = _CHECKPOINT_HEADER.size
    shapes = []
    for _ in range(n_layers):
        try:
            shapes.append(_CHECKPOINT_LAYER.unpack_from(payload, offset))
        except struct.error:
            raise ValueError(f'{path} is truncated: its header describes {n_layers} layers.') from None
        offset += _CHECKPOINT_LAYER.size
    expected_size = offset + 8 * sum(rows * columns + rows for rows, columns in shapes)
    if len(payload) != expected_size:
        raise ValueError(f'{path} holds {len(payload)} bytes, but its header describes {expected_size}.')
    values = np.frombuffer(payload, dtype='<f8', offset=offset).astype(DTYPE)
    weights = []
    biases = []
    cursor = 0
    for rows, columns in shapes:
        weights.append(values[cursor:cursor + rows * columns].reshape(rows, columns))
        cursor += rows * columns
        biases.append(values[cursor:cursor + rows])
        cursor += rows
    return ScoreNet(
        weights,
        biases,
        time_feature_dim=time_feature_dim,
        activation=activations[activation_code],
        horizon=horizon,
    )
