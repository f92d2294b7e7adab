import numpy as np
import pytest
from parameterized import parameterized

from huberdiff.losses import DeltaSchedule, LossKind, LossSpec, ScheduleKind, delta_at, deltas_at, huber, \
    loss_value_and_grad, loss_values_and_grads, pseudo_huber, pseudo_huber_diffusers
from huberdiff.numerics import NonFiniteError, Rng, ShapeError
from huberdiff.tests import assert_relative_close, central_difference


class TestDeltaSchedule:
    @parameterized.expand([
        (0.0,),
        (-1.0,),
    ])
    def test_with_invalid_delta0(self, delta0: float) -> None:
        with pytest.raises(ValueError):
            DeltaSchedule(ScheduleKind.EXP_DECREASE, delta0)

    def test_with_invalid_horizon(self) -> None:
        with pytest.raises(ValueError):
            DeltaSchedule(horizon=0.0)

    def test_at(self) -> None:
        sut = DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.01)
        assert 0.1 == pytest.approx(sut.at(0.5), rel=1e-12)


class TestDeltaAt:
    def test_with_constant(self) -> None:
        schedule = DeltaSchedule(ScheduleKind.CONSTANT, 0.3)
        assert [0.3, 0.3, 0.3] == deltas_at(schedule, [0.0, 0.5, 1.0]).tolist()

    @parameterized.expand([
        (0.01,),
        (0.1,),
        (0.5,),
    ])
    def test_with_exp_decrease_endpoints(self, delta0: float) -> None:
        schedule = DeltaSchedule(ScheduleKind.EXP_DECREASE, delta0)
        assert 1.0 == delta_at(schedule, 0.0)
        assert delta0 == pytest.approx(delta_at(schedule, 1.0), rel=1e-15)

    def test_with_exp_decrease_halfway(self) -> None:
        assert 0.1 == pytest.approx(delta_at(DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.01), 0.5), rel=1e-12)

    def test_with_exp_decrease_should_decrease_strictly(self) -> None:
        deltas = deltas_at(DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.1), np.linspace(0.0, 1.0, 101))
        assert np.all(np.diff(deltas) < 0.0)

    def test_with_exp_decrease_and_delta0_one(self) -> None:
        deltas = deltas_at(DeltaSchedule(ScheduleKind.EXP_DECREASE, 1.0), np.linspace(0.0, 1.0, 11))
        assert np.all(deltas == 1.0)

    def test_with_exp_increase_should_reverse_exp_decrease(self) -> None:
        ts = np.linspace(0.0, 1.0, 101)
        increasing = deltas_at(DeltaSchedule(ScheduleKind.EXP_INCREASE, 0.1), ts)
        decreasing = deltas_at(DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.1), 1.0 - ts)
        assert decreasing.tolist() == increasing.tolist()

    def test_with_exp_increase_endpoints(self) -> None:
        schedule = DeltaSchedule(ScheduleKind.EXP_INCREASE, 0.1)
        assert 0.1 == pytest.approx(delta_at(schedule, 0.0), rel=1e-15)
        assert 1.0 == delta_at(schedule, 1.0)

    def test_with_horizon(self) -> None:
        schedule = DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.1, horizon=2.0)
        assert 0.1 == pytest.approx(delta_at(schedule, 2.0), rel=1e-15)

    @parameterized.expand([
        (-0.01,),
        (1.01,),
    ])
    def test_with_time_out_of_range(self, t: float) -> None:
        with pytest.raises(ValueError):
            delta_at(DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.1), t)


class TestHuber:
    def test_with_quadratic_branch(self) -> None:
        assert 0.125 == huber([0.5], 1.0)

    def test_with_linear_branch(self) -> None:
        assert 2.5 == huber([3.0], 1.0)

    def test_with_boundary(self) -> None:
        assert 0.5 == huber([1.0], 1.0)

    def test_with_invalid_delta(self) -> None:
        with pytest.raises(ValueError):
            huber([1.0], 0.0)


class TestPseudoHuber:
    def test_with_zero(self) -> None:
        assert 0.0 == pseudo_huber([0.0, 0.0], 0.1)

    def test_with_one(self) -> None:
        assert np.sqrt(2.0) - 1.0 == pytest.approx(pseudo_huber([1.0], 1.0), rel=1e-14)

    def test_should_sum_coordinates(self) -> None:
        assert pseudo_huber([1.0], 0.5) + pseudo_huber([-2.0], 0.5) == pytest.approx(pseudo_huber([1.0, -2.0], 0.5), rel=1e-15)

    def test_should_approach_half_square(self) -> None:
        assert 0.5 == pytest.approx(pseudo_huber([1.0], 1e6), rel=1e-9)

    def test_should_approach_delta_times_abs(self) -> None:
        # δ|x| − δ² asymptotically.
        assert 0.1 * 1e4 - 0.01 == pytest.approx(pseudo_huber([1e4], 0.1), rel=1e-9)

    def test_quadratic_limit(self) -> None:
        xs = np.linspace(-5.0, 5.0, 1001)
        for delta in (0.01, 0.1, 1.0, 10.0):
            values = np.array([pseudo_huber([x], delta) for x in xs])
            assert np.all(np.abs(values - 0.5 * xs * xs) <= xs ** 4 / (8.0 * delta * delta) + 1e-14 * xs * xs)

    def test_should_be_delta_times_diffusers(self) -> None:
        rng = Rng(0)
        xs = 10.0 * rng.normal(1000)
        deltas = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), 1000))
        for x, delta in zip(xs, deltas):
            assert delta * pseudo_huber_diffusers([x], delta) == pytest.approx(pseudo_huber([x], delta), rel=1e-12)

    def test_should_be_stable_for_tiny_residuals(self) -> None:
        # The textbook form δ²(√(1+x²/δ²) − 1) rounds to 0 here.
        assert 0.5e-20 == pytest.approx(pseudo_huber([1e-10], 1.0), rel=1e-12)

    def test_with_invalid_delta(self) -> None:
        with pytest.raises(ValueError):
            pseudo_huber([1.0], -1.0)


class TestPseudoHuberDiffusers:
    def test_with_one(self) -> None:
        assert np.sqrt(2.0) - 1.0 == pytest.approx(pseudo_huber_diffusers([1.0], 1.0), rel=1e-14)

    def test_should_approach_half_square_over_c(self) -> None:
        assert 0.5 / 1e6 == pytest.approx(pseudo_huber_diffusers([1.0], 1e6), rel=1e-9)

    def test_with_invalid_c(self) -> None:
        with pytest.raises(ValueError):
            pseudo_huber_diffusers([1.0], 0.0)


class TestLossSpec:
    @parameterized.expand([
        ('l2', LossSpec()),
        ('l2', LossSpec(LossKind.L2, DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.1))),
        ('pseudo_huber-constant-0.1', LossSpec(LossKind.PSEUDO_HUBER, DeltaSchedule(ScheduleKind.CONSTANT, 0.1))),
        ('pseudo_huber-exp_decrease-0.01', LossSpec(LossKind.PSEUDO_HUBER, DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.01))),
        ('huber-exp_increase-0.5', LossSpec(LossKind.HUBER, DeltaSchedule(ScheduleKind.EXP_INCREASE, 0.5))),
        ('pseudo_huber_diffusers-exp_decrease-0.1', LossSpec(LossKind.PSEUDO_HUBER_DIFFUSERS, DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.1))),
    ])
    def test_name(self, expected: str, sut: LossSpec) -> None:
        assert expected == sut.name


_SCHEDULED_SPECS = [
    (LossSpec(),),
    (LossSpec(LossKind.HUBER, DeltaSchedule(ScheduleKind.CONSTANT, 0.7)),),
    (LossSpec(LossKind.PSEUDO_HUBER, DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.1)),),
    (LossSpec(LossKind.PSEUDO_HUBER, DeltaSchedule(ScheduleKind.EXP_INCREASE, 0.01)),),
    (LossSpec(LossKind.PSEUDO_HUBER_DIFFUSERS, DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.1)),),
]


class TestLossValueAndGrad:
    def test_with_l2(self) -> None:
        value, grad = loss_value_and_grad(LossSpec(), [1.0, -2.0], 0.3)
        assert 5.0 == value
        assert [2.0, -4.0] == grad.tolist()

    def test_with_huber_linear_branch(self) -> None:
        _, grad = loss_value_and_grad(LossSpec(LossKind.HUBER, DeltaSchedule(delta0=1.0)), [3.0, -3.0, 0.5], 0.0)
        assert [1.0, -1.0, 0.5] == grad.tolist()

    def test_with_pseudo_huber_and_huge_delta(self) -> None:
        value, grad = loss_value_and_grad(LossSpec(LossKind.PSEUDO_HUBER, DeltaSchedule(delta0=1e6)), [1.0, -2.0], 0.5)
        assert 2.5 == pytest.approx(value, rel=1e-9)
        assert_relative_close([1.0, -2.0], grad, 1e-9)

    def test_should_use_the_delta_at_t(self) -> None:
        spec = LossSpec(LossKind.PSEUDO_HUBER, DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.01))
        value, _ = loss_value_and_grad(spec, [3.0], 0.5)
        assert pseudo_huber([3.0], 0.1) == pytest.approx(value, rel=1e-12)

    @parameterized.expand(_SCHEDULED_SPECS)
    def test_gradient_should_match_central_differences(self, spec: LossSpec) -> None:
        rng = Rng(1)
        for _ in range(20):
            residual = 2.0 * rng.normal(3)
            t = float(rng.uniform(0.0, 1.0, 1)[0])
            if spec.kind is LossKind.HUBER and np.any(np.abs(np.abs(residual) - spec.schedule.at(t)) < 1e-3):
                continue
            _, grad = loss_value_and_grad(spec, residual, t)
            expected = central_difference(lambda r: loss_value_and_grad(spec, r, t)[0], residual)
            assert_relative_close(expected, grad, 1e-5, floor=1e-2)

    def test_with_non_finite_residual(self) -> None:
        with pytest.raises(NonFiniteError):
            loss_value_and_grad(LossSpec(), [float('nan')], 0.5)

    def test_with_time_out_of_range(self) -> None:
        with pytest.raises(ValueError):
            loss_value_and_grad(LossSpec(LossKind.PSEUDO_HUBER, DeltaSchedule(ScheduleKind.EXP_DECREASE, 0.1)), [1.0], 1.5)


class TestLossValuesAndGrads:
    @parameterized.expand(_SCHEDULED_SPECS)
    def test_should_match_rows(self, spec: LossSpec) -> None:
        rng = Rng(2)
        residuals = rng.normal((8, 2))
        ts = rng.uniform(0.0, 1.0, 8)
        values, grads = loss_values_and_grads(spec, residuals, ts)
        for residual, t, value, grad in zip(residuals, ts, values, grads):
            expected_value, expected_grad = loss_value_and_grad(spec, residual, t)
            assert expected_value == pytest.approx(value, rel=1e-14)
            assert_relative_close(expected_grad, grad, 1e-14)

    def test_with_time_count_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            loss_values_and_grads(LossSpec(), np.zeros((3, 2)), np.zeros(2))

    def test_with_non_finite_residual(self) -> None:
        with pytest.raises(NonFiniteError):
            loss_values_and_grads(LossSpec(), [[float('inf'), 0.0]], [0.5])
