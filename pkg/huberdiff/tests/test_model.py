from pathlib import Path

import numpy as np
import pytest
from parameterized import parameterized

from huberdiff.model import Activation, Adam, BackwardBeforeForwardError, ScoreNet, check_gradients, load_checkpoint, \
    save_checkpoint, time_features
from huberdiff.numerics import Rng, ShapeError
from huberdiff.tests import assert_relative_close, central_difference


class TestTimeFeatures:
    def test_with_scalar(self) -> None:
        features = time_features(0.0, 8)
        assert [0.0] * 4 + [1.0] * 4 == features.tolist()

    def test_with_vector(self) -> None:
        assert (5, 16) == time_features(np.linspace(0.0, 1.0, 5)).shape

    def test_should_be_injective(self) -> None:
        features = time_features(np.linspace(0.0, 1.0, 1001))
        distances = np.linalg.norm(np.diff(features, axis=0), axis=1)
        assert np.all(distances > 0.0)

    @parameterized.expand([
        (0,),
        (3,),
    ])
    def test_with_invalid_dim(self, dim: int) -> None:
        with pytest.raises(ValueError):
            time_features(0.5, dim)


def _net(activation: Activation = Activation.SILU) -> ScoreNet:
    return ScoreNet.initialize(2, Rng(0), hidden=(8, 8), time_feature_dim=4, activation=activation)


class TestScoreNet:
    def test_initialize(self) -> None:
        sut = ScoreNet.initialize(2, Rng(0), hidden=(64, 64), time_feature_dim=16)
        assert [(64, 18), (64, 64), (2, 64)] == [w.shape for w in sut.weights]
        assert 18 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2 == sut.parameter_count

    def test_initialize_should_bound_weights_by_fan_in(self) -> None:
        sut = ScoreNet.initialize(2, Rng(0), hidden=(64,), time_feature_dim=16)
        assert np.max(np.abs(sut.weights[0])) <= 1.0 / np.sqrt(18)
        assert np.max(np.abs(sut.weights[1])) <= 1.0 / np.sqrt(64)

    def test_initialize_should_be_deterministic(self) -> None:
        assert [p.tolist() for p in _net().parameters] == [p.tolist() for p in _net().parameters]

    def test_initialize_without_hidden_layers(self) -> None:
        with pytest.raises(ValueError):
            ScoreNet.initialize(2, Rng(0), hidden=())

    def test_with_inconsistent_shapes(self) -> None:
        with pytest.raises(ShapeError):
            ScoreNet([np.zeros((4, 6)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)], time_feature_dim=4)

    def test_with_wrong_input_width(self) -> None:
        with pytest.raises(ShapeError):
            ScoreNet([np.zeros((4, 5)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)], time_feature_dim=4)

    def test_forward_with_single_point(self) -> None:
        sut = _net()
        assert (2,) == sut.forward([0.1, 0.2], 0.5).shape

    def test_forward_with_batch(self) -> None:
        sut = _net()
        batch = Rng(1).normal((5, 2))
        outputs = sut.forward(batch, np.linspace(0.1, 0.9, 5))
        assert (5, 2) == outputs.shape
        assert_relative_close(sut.forward(batch[2], 0.5), outputs[2], 1e-14)

    def test_forward_with_wrong_dimension(self) -> None:
        with pytest.raises(ShapeError):
            _net().forward([0.1, 0.2, 0.3], 0.5)

    def test_backward_before_forward(self) -> None:
        with pytest.raises(BackwardBeforeForwardError):
            _net().backward(np.zeros((1, 2)))

    def test_backward_with_wrong_shape(self) -> None:
        sut = _net()
        sut.forward(np.zeros((3, 2)), 0.5)
        with pytest.raises(ShapeError):
            sut.backward(np.zeros((2, 2)))

    @parameterized.expand([
        (Activation.SILU,),
        (Activation.TANH,),
    ])
    def test_backward_should_match_central_differences(self, activation: Activation) -> None:
        rng = Rng(2)
        sut = _net(activation)
        assert check_gradients(sut, rng.normal((4, 2)), rng.uniform(0.0, 1.0, 4), rng.normal((4, 2))) < 1e-4

    def test_backward_with_respect_to_the_output_bias(self) -> None:
        sut = _net()
        upstream = Rng(3).normal((4, 2))
        sut.forward(Rng(4).normal((4, 2)), 0.5)
        grads = sut.backward(upstream)
        assert_relative_close(upstream.sum(axis=0), grads[-1], 1e-14)

    def test_copy(self) -> None:
        sut = _net()
        copied = sut.copy()
        copied.weights[0][0, 0] += 1.0
        assert sut.weights[0][0, 0] != copied.weights[0][0, 0]

    def test_parameters_should_alias_the_network(self) -> None:
        sut = _net()
        sut.parameters[0][0, 0] = 42.0
        assert 42.0 == sut.weights[0][0, 0]


class TestAdam:
    def test_first_step_should_move_by_the_learning_rate(self) -> None:
        parameter = np.array([1.0, -1.0, 0.5])
        sut = Adam(learning_rate=0.1)
        sut.step([parameter], [np.array([3.0, -0.2, 1e-3])])
        assert_relative_close([0.9, -0.9, 0.4], parameter, 1e-4)

    def test_should_minimize_a_quadratic(self) -> None:
        parameter = np.array([3.0, -2.0])
        sut = Adam(learning_rate=0.05)
        for _ in range(2000):
            sut.step([parameter], [2.0 * parameter])
        assert np.all(np.abs(parameter) < 0.1)

    def test_should_be_nearly_scale_invariant(self) -> None:
        first = np.array([1.0, 2.0])
        second = first.copy()
        first_optimizer = Adam()
        second_optimizer = Adam()
        rng = Rng(0)
        for _ in range(50):
            grad = rng.normal(2)
            first_optimizer.step([first], [grad])
            second_optimizer.step([second], [0.5 * grad])
        assert_relative_close(first, second, 1e-5)

    def test_with_gradient_count_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            Adam().step([np.zeros(2)], [])

    def test_step_count(self) -> None:
        sut = Adam()
        sut.step([np.zeros(2)], [np.ones(2)])
        sut.step([np.zeros(2)], [np.ones(2)])
        assert 2 == sut.step_count


class TestCheckGradients:
    def test_should_detect_a_broken_backward_pass(self) -> None:
        class _BrokenScoreNet(ScoreNet):
            def backward(self, upstream: np.ndarray) -> list:  # type: ignore[override]
                return [2.0 * grad for grad in super().backward(upstream)]
        net = _net()
        sut = _BrokenScoreNet(net.weights, net.biases, time_feature_dim=4)
        assert check_gradients(sut, np.ones((2, 2)), 0.5, np.ones((2, 2))) > 0.1


class TestCentralDifference:
    def test(self) -> None:
        assert_relative_close([2.0, 12.0], central_difference(lambda x: float(x[0] ** 2 + x[1] ** 3), [1.0, 2.0]), 1e-8)


class TestCheckpoint:
    def test_should_restore_the_network(self, tmp_path: Path) -> None:
        path = tmp_path / 'model.bin'
        net = _net(Activation.TANH)
        save_checkpoint(net, path)
        sut = load_checkpoint(path)
        assert Activation.TANH == sut.activation
        assert net.time_feature_dim == sut.time_feature_dim
        assert [p.tolist() for p in net.parameters] == [p.tolist() for p in sut.parameters]
        points = Rng(5).normal((3, 2))
        assert_relative_close(net.forward(points, 0.3), sut.forward(points, 0.3), 1e-14)

    def test_layout(self, tmp_path: Path) -> None:
        path = tmp_path / 'model.bin'
        net = _net()
        save_checkpoint(net, path)
        payload = path.read_bytes()
        assert b'HDNN' == payload[:4]
        header = 4 + 4 * 3 + 8 + 4
        assert header + 3 * 8 + 8 * net.parameter_count == len(payload)
        first_weight = np.frombuffer(payload, dtype='<f8', count=1, offset=header + 3 * 8)[0]
        assert net.weights[0][0, 0] == first_weight

    def test_with_truncated_file(self, tmp_path: Path) -> None:
        path = tmp_path / 'model.bin'
        save_checkpoint(_net(), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_with_foreign_file(self, tmp_path: Path) -> None:
        path = tmp_path / 'model.bin'
        path.write_bytes(b'\x89PNG' + bytes(64))
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_with_empty_file(self, tmp_path: Path) -> None:
        path = tmp_path / 'model.bin'
        path.write_bytes(b'')
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_with_truncated_layer_table(self, tmp_path: Path) -> None:
        path = tmp_path / 'model.bin'
        save_checkpoint(_net(), path)
        payload = path.read_bytes()
        header = 4 + 4 * 3 + 8 + 4
        for complete_layers in range(3):
            path.write_bytes(payload[:header + 8 * complete_layers])
            with pytest.raises(ValueError, match='truncated'):
                load_checkpoint(path)
