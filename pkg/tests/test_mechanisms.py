import math

import numpy as np
import pytest
from scipy import stats

from accuracy_first.core import NormOrder, Sensitivity, TimeSchedule
from accuracy_first.mechanisms import (
    FixedStop,
    RelativeErrorStop,
    StatisticQuery,
    StoppingFunction,
    brownian_noise_reduction,
    em_zcdp_charge,
    exponential_mechanism_argmax,
    gaussian_mechanism,
    gaussian_zcdp_charge,
    laplace_epsilon,
    laplace_mechanism,
    laplace_noise_reduction,
    relative_error_condition,
    relative_error_stop,
)
from accuracy_first.processes import make_rng

N = 100_000


class TestLaplaceMechanism:
    def test_infinite_epsilon_is_exact(self):
        np.testing.assert_array_equal(laplace_mechanism([3.0, 4.0], math.inf, 0), [3.0, 4.0])

    def test_noise_law(self):
        rng = make_rng(1)
        y = np.array([laplace_mechanism(0.0, 1.0, rng)[0] for _ in range(20_000)])
        assert stats.kstest(y, stats.laplace(scale=1.0).cdf).pvalue > 0.001

    def test_coordinates_independent(self):
        rng = make_rng(2)
        y = np.array([laplace_mechanism([0.0, 0.0], 1.0, rng) for _ in range(20_000)])
        assert abs(np.corrcoef(y.T)[0, 1]) < 0.03

    def test_epsilon_scales_with_sensitivity(self):
        q = StatisticQuery([0.0], Sensitivity(2.0, NormOrder.L1))
        assert laplace_epsilon(q, 0.5) == 1.0

    def test_rejects_bad_epsilon(self):
        with pytest.raises(ValueError):
            laplace_mechanism(0.0, 0.0)


class TestGaussianMechanism:
    def test_variance(self):
        rng = make_rng(3)
        y = gaussian_mechanism(np.zeros(N), 4.0, rng)
        assert y.var() == pytest.approx(0.25, rel=0.02)

    def test_infinite_rho_is_exact(self):
        np.testing.assert_array_equal(gaussian_mechanism([1.0, 2.0], math.inf, 0), [1.0, 2.0])

    def test_charge_for_eps_style_parameter(self):
        eps = 0.1
        assert gaussian_zcdp_charge(StatisticQuery([0.0]), eps**2) == pytest.approx(eps**2 / 2)
        q = StatisticQuery([0.0], Sensitivity(3.0))
        assert gaussian_zcdp_charge(q, 0.2) == pytest.approx(0.9)

    def test_l1_query_rejected(self):
        with pytest.raises(ValueError):
            gaussian_zcdp_charge(StatisticQuery([0.0], Sensitivity(1.0, NormOrder.L1)), 1.0)


class TestExponentialMechanism:
    def test_noiseless_limit_breaks_ties_low(self):
        assert exponential_mechanism_argmax([1, 5, 5, 2], math.inf, 0) == 1

    def test_charge(self):
        assert em_zcdp_charge(0.1) == pytest.approx(0.00125)

    def test_softmax_probability(self):
        rng = make_rng(4)
        picks = np.array([exponential_mechanism_argmax([1.0, 0.0], 1.0, rng) for _ in range(N)])
        assert np.mean(picks == 0) == pytest.approx(math.e / (math.e + 1), abs=0.01 * 0.7311)

    def test_excluded_never_chosen(self):
        rng = make_rng(5)
        mask = np.array([True, False, True, False])
        picks = {exponential_mechanism_argmax([100, 1, 100, 1], 0.1, rng, exclude=mask) for _ in range(200)}
        assert picks <= {1, 3}
        with pytest.raises(ValueError):
            exponential_mechanism_argmax([1, 2], 1.0, 0, exclude=[0, 1])


class TestRelativeErrorStop:
    def test_large_count_stops(self):
        assert relative_error_condition(100.0, 0.5, 0.1)
        assert (102 / 98) == pytest.approx(1.0408, abs=1e-4)

    def test_small_count_continues(self):
        assert not relative_error_condition(1.0, 0.5, 0.1)

    def test_negative_symmetric(self):
        assert relative_error_condition(-100.0, 0.5, 0.1)

    def test_vectorized_decisions_use_time_scale(self):
        stop = relative_error_stop(0.1)
        times = np.array([4.0])  # eps = 0.5
        assert stop(times, np.array([[100.0]]))
        assert not stop(times, np.array([[1.0]]))

    def test_all_coordinates_must_hold(self):
        stop = RelativeErrorStop(0.1)
        assert not stop(np.array([4.0]), np.array([[100.0, 1.0]]))

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
    def test_alpha_domain(self, alpha):
        with pytest.raises(ValueError):
            RelativeErrorStop(alpha)


class TestBrownianNoiseReduction:
    def test_constant_stop_at_first(self):
        rng = make_rng(6)
        vals = np.array(
            [brownian_noise_reduction([5.0], TimeSchedule([4.0, 1.0]), FixedStop(1), rng).final_value[0] for _ in range(20_000)]
        )
        assert stats.kstest(vals, stats.norm(5.0, 2.0).cdf).pvalue > 0.001

    def test_one_entry_transcript(self):
        tr = brownian_noise_reduction([0.0, 0.0], TimeSchedule([4.0, 1.0]), FixedStop(1), 7)
        assert tr.stop_index == 1 and tr.dim == 2 and tr.satisfied

    def test_schedule_from_epsilons(self):
        s = TimeSchedule.from_epsilons([0.5, 1.0, 2.0])
        np.testing.assert_allclose(s.times, [4.0, 1.0, 0.25])

    @pytest.mark.parametrize("method", ["grid", "sequential"])
    def test_final_noise_std(self, method):
        rng = make_rng(8)
        sched = TimeSchedule([9.0, 4.0, 1.0])
        vals = np.array(
            [brownian_noise_reduction([0.0], sched, FixedStop(2), rng, method=method).final_value[0] for _ in range(20_000)]
        )
        assert vals.std() == pytest.approx(2.0, rel=0.02)

    def test_forced_stop_is_unsatisfied(self):
        class Never(StoppingFunction):
            def __call__(self, times, values):
                return False

        tr = brownian_noise_reduction([0.0], TimeSchedule([2.0, 1.0]), Never(), 9)
        assert tr.stop_index == 2 and not tr.satisfied

    def test_grid_and_sequential_agree_in_law(self):
        sched = TimeSchedule(1.0 / np.linspace(1e-3, 0.5, 50))
        stop = RelativeErrorStop(0.1)
        rng_a, rng_b = make_rng(10), make_rng(11)
        a = [brownian_noise_reduction([30.0], sched, stop, rng_a, method="grid").stop_index for _ in range(3000)]
        b = [brownian_noise_reduction([30.0], sched, stop, rng_b, method="sequential").stop_index for _ in range(3000)]
        assert stats.ks_2samp(a, b).pvalue > 0.001

    def test_prefix_only_is_released(self):
        tr = brownian_noise_reduction([1000.0], TimeSchedule([1.0, 0.5, 0.25]), RelativeErrorStop(0.1), 12)
        assert tr.stop_index == 1

    def test_l1_query_rejected(self):
        q = StatisticQuery([0.0], Sensitivity(1.0, NormOrder.L1))
        with pytest.raises(ValueError):
            brownian_noise_reduction(q, TimeSchedule([1.0]), FixedStop(1), 0)

    def test_determinism(self):
        s = TimeSchedule([4.0, 2.0, 1.0])
        a = brownian_noise_reduction([1.0], s, FixedStop(3), 13)
        b = brownian_noise_reduction([1.0], s, FixedStop(3), 13)
        np.testing.assert_array_equal(a.values, b.values)


class TestLaplaceNoiseReduction:
    def test_constant_stop_at_first(self):
        rng = make_rng(14)
        vals = np.array(
            [laplace_noise_reduction([2.0], TimeSchedule([2.0, 1.0]), FixedStop(1), rng).final_value[0] for _ in range(20_000)]
        )
        assert stats.kstest(vals - 2.0, stats.laplace(scale=2.0).cdf).pvalue > 0.001

    def test_two_step_final_marginal_and_flatness(self):
        rng = make_rng(15)
        runs = [laplace_noise_reduction([0.0], TimeSchedule([2.0, 1.0]), FixedStop(2), rng) for _ in range(20_000)]
        final = np.array([r.final_value[0] for r in runs])
        flat = np.mean([r.values[0, 0] == r.values[1, 0] for r in runs])
        assert stats.kstest(final, stats.laplace(scale=1.0).cdf).pvalue > 0.001
        assert flat == pytest.approx(0.25, abs=0.015)
