import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdpmarket.errors import InvalidBudget, NonInvertibleUtility, VarianceUnachievable
from pdpmarket.mechanisms import (grouped_utility, inclusion_probabilities,
                                  inverse_patterned_utility, invert_grouped, laplace_mechanism,
                                  laplace_noise, make_rng, patterned_utility, sample_mechanism,
                                  true_histogram, utility_laplace, utility_sample)
from pdpmarket.types import Mechanism, Pattern, make_pattern

from conftest import make_db

SAMPLE = Mechanism.SAMPLE_GROUPING
LAPLACE = Mechanism.LAPLACE_UNIFORM
mpmath.mp.dps = 50


def mp_utility_sample(losses, sensitivity):
    """Direct evaluation of the Sample utility formula in 50-digit arithmetic."""
    eps = [mpmath.mpf(x) for x in losses]
    top = max(eps)
    denom = mpmath.exp(top) - 1
    total = mpmath.mpf(0)
    for e in eps:
        p = (mpmath.exp(e) - 1) / denom
        total += p * (1 - p)
    return total + 2 * (mpmath.mpf(sensitivity) / top) ** 2


class TestHistogram:
    def test_counts(self):
        assert true_histogram(make_db([1] * 3, [0, 0, 1], cells=2)).tolist() == [2, 1]

    def test_empty_cells(self):
        assert true_histogram(make_db([1, 1], [1, 1], cells=3)).tolist() == [0, 2, 0]

    def test_single_owner(self):
        assert true_histogram(make_db([1], [0], cells=1)).tolist() == [1]


class TestLaplaceMechanism:
    def test_scale_uses_min_budget(self):
        db = make_db([1, 1], [0, 1], cells=2)
        ans = laplace_mechanism(db, [1.0, 2.0], 2.0, make_rng(3))
        expected = true_histogram(db) + laplace_noise(make_rng(3), 2.0, 2)
        np.testing.assert_array_equal(ans.counts, expected)
        assert ans.spec_achieved.losses.tolist() == [1.0, 1.0]

    def test_seed_replays(self):
        db = make_db([1] * 5, [0, 1, 2, 3, 4], cells=5)
        a = laplace_mechanism(db, [0.5] * 5, 2.0, make_rng(11))
        b = laplace_mechanism(db, [0.5] * 5, 2.0, make_rng(11))
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_rejects_nonpositive_budget(self):
        with pytest.raises(InvalidBudget):
            laplace_mechanism(make_db([1, 1]), [1.0, 0.0], 2.0, make_rng(0))

    def test_noise_variance(self):
        x = laplace_noise(make_rng(5), 2.0, 200_000)
        assert abs(np.var(x) - 8.0) / 8.0 < 0.03
        assert abs(np.mean(x)) < 0.05


class TestSampleMechanism:
    def test_inclusion_probability_closed_form(self):
        p = inclusion_probabilities([1.0, 2.0])
        assert p[0] == pytest.approx(1 / (math.e + 1), rel=1e-14)
        assert p[0] == pytest.approx(0.26894, abs=5e-6)
        assert p[1] == 1.0

    def test_uniform_keeps_everyone(self):
        db = make_db([1] * 6, [0, 0, 1, 1, 2, 2], cells=3)
        ans = sample_mechanism(db, [0.7] * 6, 2.0, make_rng(9))
        rng = make_rng(9)
        rng.random(6)
        expected = true_histogram(db) + laplace_noise(rng, 2.0 / 0.7, 3)
        np.testing.assert_allclose(ans.counts, expected, rtol=0, atol=1e-12)

    def test_seed_replays_and_spec(self):
        db = make_db([1] * 8, list(range(4)) * 2, cells=4)
        budgets = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6]
        a = sample_mechanism(db, budgets, 2.0, make_rng(1))
        b = sample_mechanism(db, budgets, 2.0, make_rng(1))
        np.testing.assert_array_equal(a.counts, b.counts)
        assert a.spec_achieved.losses.tolist() == budgets

    def test_probabilities_stable_for_large_losses(self):
        p = inclusion_probabilities([800.0, 799.0, 1e-9])
        assert p[0] == 1.0
        assert p[1] == pytest.approx(math.exp(-1), rel=1e-12)
        assert 0 < p[2] < 1e-300 or p[2] == 0.0


class TestUtilities:
    def test_laplace_examples(self):
        assert utility_laplace([2.0, 3.0], 2.0) == 2.0
        assert utility_laplace([1.0, 5.0], 2.0) == 8.0

    @given(st.floats(0.01, 100), st.floats(0.1, 10))
    def test_laplace_homogeneity(self, t, eps):
        assert utility_laplace([eps * t], 2.0) == pytest.approx(utility_laplace([eps], 2.0) / t ** 2)

    def test_two_purchase_values(self):
        assert utility_sample([1.0] * 49 + [2.0], 2.0) == pytest.approx(11.634, abs=1e-3)
        assert utility_sample([0.41641] * 49 + [0.83282], 2.0) == pytest.approx(23.268, abs=1e-3)

    @pytest.mark.parametrize("losses", [[1.0] * 49 + [2.0], [0.41641] * 49 + [0.83282],
                                        [0.1, 0.5, 3.0, 3.0, 7.0], [1e-4, 2e-4], [30.0, 0.0]])
    def test_matches_high_precision_oracle(self, losses):
        assert utility_sample(losses, 2.0) == pytest.approx(
            float(mp_utility_sample(losses, 2.0)), rel=1e-13)

    def test_all_zero_rejected(self):
        with pytest.raises(InvalidBudget):
            utility_sample([0.0, 0.0], 2.0)

    @given(st.floats(1e-3, 50), st.integers(1, 60), st.floats(0.1, 5))
    def test_uniform_equals_laplace_exactly(self, eps, n, sens):
        assert utility_sample([eps] * n, sens) == utility_laplace([eps] * n, sens)

    @given(st.lists(st.floats(0.0, 20.0), min_size=2, max_size=30).filter(lambda v: max(v) > 1e-6),
           st.randoms(use_true_random=False))
    def test_permutation_invariant(self, losses, rnd):
        shuffled = list(losses)
        rnd.shuffle(shuffled)
        assert utility_sample(shuffled, 2.0) == pytest.approx(utility_sample(losses, 2.0),
                                                              rel=1e-12)

    def test_patterned_delegates(self):
        rho = make_pattern([1] * 49 + [2])
        assert patterned_utility(rho, 2.0, 2.0, SAMPLE) == utility_sample(rho.rho * 2.0, 2.0)
        ones = Pattern.ones(7)
        for mech in (SAMPLE, LAPLACE):
            assert patterned_utility(ones, 1.5, 2.0, mech) == pytest.approx(2 * (2 / 1.5) ** 2)

    @settings(max_examples=60)
    @given(st.lists(st.tuples(st.floats(1e-3, 1.0), st.integers(1, 40)), min_size=1, max_size=8),
           st.floats(1e-2, 30.0), st.floats(0.1, 5.0))
    def test_grouped_equals_ungrouped(self, groups, eps, sens):
        values = [g for g, _ in groups] + [1.0]
        sizes = [m for _, m in groups] + [1]
        rho = Pattern(np.repeat(values, sizes))
        grouped = grouped_utility(values, sizes, eps, sens)
        flat = patterned_utility(rho, eps, sens, SAMPLE)
        assert grouped == pytest.approx(flat, rel=1e-12)

    @pytest.mark.parametrize("values,sizes", [([0.5, 1.0], [49, 1]), ([1.0], [10]),
                                              ([0.01, 0.3, 0.7, 1.0], [5, 9, 3, 2])])
    def test_analytic_derivatives_match_finite_differences(self, values, sizes):
        eps = np.geomspace(1e-2, 30, 60)
        _, d1, d2 = grouped_utility(values, sizes, eps, 2.0, derivatives=True)
        h = 1e-5 * eps
        up = grouped_utility(values, sizes, eps + h, 2.0)
        mid = grouped_utility(values, sizes, eps, 2.0)
        down = grouped_utility(values, sizes, eps - h, 2.0)
        fd1 = (up - down) / (2 * h)
        fd2 = (up - 2 * mid + down) / h ** 2
        np.testing.assert_allclose(d1, fd1, rtol=1e-4)
        # second differences lose ~half the digits; compare where curvature is resolvable
        ok = np.abs(d2) * h ** 2 > 1e-9 * np.abs(mid)
        np.testing.assert_allclose(d2[ok], fd2[ok], rtol=1e-4)


class TestInversion:
    def test_laplace_closed_form(self):
        assert inverse_patterned_utility(Pattern.ones(3), 8.0, 2.0, LAPLACE) == pytest.approx(1.0)

    def test_two_purchase_inverse(self):
        rho = make_pattern([1] * 49 + [2])
        v_exact = utility_sample([1.0] * 49 + [2.0], 2.0)
        assert inverse_patterned_utility(rho, v_exact, 2.0, SAMPLE) == pytest.approx(2.0, rel=1e-9)
        # the published variance is rounded to 3 decimals: |dv| <= 5e-4 moves eps by
        # at most 5e-4 / |U'(2)|
        slope = abs(grouped_utility([0.5, 1.0], [49, 1], 2.0, 2.0, derivatives=True)[1])
        got = inverse_patterned_utility(rho, 11.634, 2.0, SAMPLE)
        assert abs(got - 2.0) <= 5e-4 / slope * 1.01

    def test_round_trip_log_grid(self):
        rho = Pattern([0.05, 0.3, 0.3, 0.8, 1.0])
        for v in np.geomspace(1e-3, 1e4, 40):
            eps = inverse_patterned_utility(rho, v, 2.0, SAMPLE, tol=1e-10)
            assert abs(patterned_utility(rho, eps, 2.0, SAMPLE) - v) <= 1e-10 * v

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(VarianceUnachievable):
            inverse_patterned_utility(Pattern.ones(2), 0.0, 2.0, SAMPLE)

    def test_variance_below_range(self):
        with pytest.raises(VarianceUnachievable):
            inverse_patterned_utility(Pattern([0.5, 1.0]), 1e-300, 2.0, SAMPLE)

    def test_detects_non_monotone_utility(self):
        rho = Pattern([0.9] * 100 + [1.0])
        # U(1) < U(2) for this pattern at sensitivity 0.1
        assert patterned_utility(rho, 1.0, 0.1, SAMPLE) < patterned_utility(rho, 2.0, 0.1, SAMPLE)
        with pytest.raises(NonInvertibleUtility):
            inverse_patterned_utility(rho, 5.0, 0.1, SAMPLE)

    def test_vectorized_inverse_agrees(self):
        v = np.geomspace(0.1, 1e3, 25)
        vec = invert_grouped([0.5, 1.0], [49, 1], v, 2.0)
        rho = make_pattern([1] * 49 + [2])
        scalar = [inverse_patterned_utility(rho, x, 2.0, SAMPLE, tol=1e-13) for x in v]
        np.testing.assert_allclose(vec, scalar, rtol=1e-11)

    def test_vectorized_inverse_marks_unreachable(self):
        assert np.isnan(invert_grouped([0.5, 1.0], [1, 1], [1e-300], 2.0)[0])


def test_sample_variance_small_run():
    """Shorter version of the acceptance check: everyone in one cell."""
    db = make_db([1] * 10, [0] * 10, cells=2)
    budgets = np.linspace(0.3, 1.5, 10)
    rng = make_rng(2024)
    draws = np.array([sample_mechanism(db, budgets, 2.0, rng).counts[0] for _ in range(20_000)])
    expected = utility_sample(budgets, 2.0)
    assert abs(np.var(draws) - expected) / expected < 0.05
