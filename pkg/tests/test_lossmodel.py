"""Tests for the error-accumulation analytics.

The oracles here are independent of the library code: the four-frame
per-policy losses and the expanded totals are written out verbatim as
closed-form polynomials in (alpha, beta) and compared against the
generalized recurrence.
"""

import math

import numpy as np
import pytest

from bnvc.errors import UsageError
from bnvc.lossmodel import (
    LossModelParams,
    ThresholdCoefficients,
    critical_alpha_numeric,
    frame_loss,
    information_decay,
    policy_compare_grid,
    threshold_alpha,
    total_loss,
)
from bnvc.policies import DuplicationPolicy

NEAR = DuplicationPolicy.NEAR
FURTHER = DuplicationPolicy.FURTHER


# ----------------------------------------------------------------------
# Independent oracles: verbatim per-frame recurrences and expanded totals
# for the 4-reference, 4-frame chain under both duplication policies.
# ----------------------------------------------------------------------

def _frames_further(alpha, beta, l1=1.0):
    A = 1.0 + alpha
    f1 = l1
    f2 = 4.0 * f1 * (1.0 - beta) / 4.0 * A
    f3 = (3.0 * f1 * (1.0 - beta**2) + f2 * (1.0 - beta)) / 4.0 * A
    f4 = (2.0 * f1 * (1.0 - beta**3) + f2 * (1.0 - beta**2) + f3 * (1.0 - beta)) / 4.0 * A
    return [f1, f2, f3, f4]


def _frames_near(alpha, beta, l1=1.0):
    A = 1.0 + alpha
    f1 = l1
    f2 = 4.0 * f1 * (1.0 - beta) / 4.0 * A
    f3 = (f1 * (1.0 - beta**2) + 3.0 * f2 * (1.0 - beta)) / 4.0 * A
    f4 = (f1 * (1.0 - beta**3) + f2 * (1.0 - beta**2) + 2.0 * f3 * (1.0 - beta)) / 4.0 * A
    return [f1, f2, f3, f4]


def _total_further_expanded(alpha, beta, l1=1.0):
    A = 1.0 + alpha
    u = 1.0 - beta
    return l1 * (
        1.0
        + u * A
        + 3.0 * (1.0 - beta**2) * A / 4.0
        + u**2 * A**2 / 4.0
        + 2.0 * (1.0 - beta**3) * A / 4.0
        + u * (1.0 - beta**2) * A**2 / 4.0
        + 3.0 * u * (1.0 - beta**2) * A**2 / 16.0
        + u**3 * A**3 / 16.0
    )


def _total_near_expanded(alpha, beta, l1=1.0):
    A = 1.0 + alpha
    u = 1.0 - beta
    return l1 * (
        1.0
        + u * A
        + (1.0 - beta**2) * A / 4.0
        + 3.0 * u**2 * A**2 / 4.0
        + (1.0 - beta**3) * A / 4.0
        + u * (1.0 - beta**2) * A**2 / 4.0
        + u * (1.0 - beta**2) * A**2 / 8.0
        + 3.0 * u**3 * A**3 / 8.0
    )


def _params(alpha, beta, policy, **kw):
    return LossModelParams(alpha=alpha, beta=beta, policy=policy, **kw)


class TestInformationDecay:
    def test_zero_distance_is_identity(self):
        assert information_decay(3.75, 0.42, 0) == 3.75

    def test_two_steps_squares_beta(self):
        assert information_decay(1.0, 0.5, 2) == 0.25

    def test_perfect_correlation_limit(self):
        for i0 in (0.1, 1.0, 7.0):
            assert abs(information_decay(i0, 1.0 - 1e-12, 3) - i0) < 1e-10

    def test_negative_distance_rejected(self):
        with pytest.raises(UsageError):
            information_decay(1.0, 0.5, -1)


class TestFrameLoss:
    def test_four_equal_unit_refs(self):
        # (1 + 0.1) / 4 * 4 * 1 * (1 - 0.5) = 0.55
        val = frame_loss([(1.0, 1)] * 4, alpha=0.1, beta=0.5)
        assert abs(val - 0.55) < 1e-15

    def test_perfect_correlation_adds_nothing(self):
        val = frame_loss([(1.0, 1), (2.0, 2), (0.5, 3)], alpha=0.3, beta=1.0)
        assert val == 0.0

    def test_mixed_distances(self):
        # (1.1 / 4) * (3 * 1 * (1 - 0.25) + 0.55 * (1 - 0.5)) = 0.694375
        val = frame_loss([(1.0, 2), (1.0, 2), (1.0, 2), (0.55, 1)], alpha=0.1, beta=0.5)
        assert abs(val - 0.694375) < 1e-15

    def test_empty_refs_rejected(self):
        with pytest.raises(UsageError):
            frame_loss([], 0.1, 0.5)

    def test_zero_distance_rejected(self):
        with pytest.raises(UsageError):
            frame_loss([(1.0, 0)], 0.1, 0.5)


class TestTotalLoss:
    def test_further_spot_values(self):
        losses, total = total_loss(_params(0.5, 0.5, FURTHER))
        expect = [1.0, 0.75, 0.984375, 1.0517578125]
        np.testing.assert_allclose(losses, expect, rtol=0, atol=1e-12)
        assert abs(total - 3.7861328125) < 1e-12

    def test_near_spot_values(self):
        losses, total = total_loss(_params(0.5, 0.5, NEAR))
        expect = [1.0, 0.75, 0.703125, 0.802734375]
        np.testing.assert_allclose(losses, expect, rtol=0, atol=1e-12)
        assert abs(total - 3.255859375) < 1e-12

    def test_policies_equal_at_t2(self):
        for alpha, beta in [(0.5, 0.5), (0.2, 0.8), (0.9, 0.1)]:
            tn = total_loss(_params(alpha, beta, NEAR, T=2))[1]
            tf = total_loss(_params(alpha, beta, FURTHER, T=2))[1]
            assert tn == tf

    def test_policies_equal_with_single_reference(self):
        # n_ref=1 never duplicates, so the policies coincide for any T.
        for T in (1, 2, 3, 6):
            tn = total_loss(_params(0.4, 0.6, NEAR, n_ref=1, T=T))[1]
            tf = total_loss(_params(0.4, 0.6, FURTHER, n_ref=1, T=T))[1]
            assert tn == tf

    def test_totals_linear_in_l1(self):
        base = total_loss(_params(0.3, 0.7, NEAR))[1]
        scaled = total_loss(_params(0.3, 0.7, NEAR, L1=2.5))[1]
        assert abs(scaled - 2.5 * base) < 1e-12

    @pytest.mark.parametrize("policy", [NEAR, FURTHER])
    def test_recurrence_matches_verbatim_forms_on_grid(self, policy):
        frames_oracle = _frames_near if policy is NEAR else _frames_further
        total_oracle = _total_near_expanded if policy is NEAR else _total_further_expanded
        grid = [0.05 * i for i in range(1, 20)]
        for alpha in grid:
            for beta in grid:
                losses, total = total_loss(_params(alpha, beta, policy))
                expect_frames = frames_oracle(alpha, beta)
                for got, want in zip(losses, expect_frames):
                    assert abs(got - want) <= 1e-12 * max(abs(want), 1e-300)
                want_total = total_oracle(alpha, beta)
                assert abs(total - want_total) <= 1e-12 * abs(want_total)

    def test_monotonic_in_alpha_and_beta(self):
        alphas = np.linspace(0.05, 0.95, 10)
        betas = np.linspace(0.05, 0.95, 10)
        for policy in (NEAR, FURTHER):
            for beta in betas:
                tot = [total_loss(_params(a, beta, policy))[1] for a in alphas]
                assert all(b > a for a, b in zip(tot, tot[1:])), "total must increase with alpha"
            for alpha in alphas:
                tot = [total_loss(_params(alpha, b, policy))[1] for b in betas]
                assert all(b < a for a, b in zip(tot, tot[1:])), "total must decrease with beta"

    def test_dominance_region_and_counterexample(self):
        # NEAR wins on the strongly correlated half of the grid ...
        for alpha in np.arange(0.05, 1.0, 0.05):
            for beta in np.arange(0.4, 1.0, 0.05):
                assert _gap(alpha, beta) > 0.0
        # ... but the recurrence itself favours FURTHER for weakly
        # correlated, high-increment settings.
        near = total_loss(_params(0.9, 0.1, NEAR))[1]
        further = total_loss(_params(0.9, 0.1, FURTHER))[1]
        assert abs(near - 8.929120375) < 1e-9
        assert abs(further - 7.5205613125) < 1e-9
        assert further < near

    def test_invalid_params_rejected(self):
        with pytest.raises(UsageError):
            LossModelParams(alpha=0.0, beta=0.5)
        with pytest.raises(UsageError):
            LossModelParams(alpha=0.5, beta=1.0)
        with pytest.raises(UsageError):
            LossModelParams(alpha=0.5, beta=0.5, n_ref=0)
        with pytest.raises(UsageError):
            LossModelParams(alpha=0.5, beta=0.5, T=0)


def _gap(alpha, beta):
    tn = total_loss(_params(alpha, beta, NEAR))[1]
    tf = total_loss(_params(alpha, beta, FURTHER))[1]
    return tf - tn


class TestThresholdAlpha:
    def test_coefficients_at_half(self):
        coef = ThresholdCoefficients.from_beta(0.5)
        assert abs(coef.a - 0.625) < 1e-15
        assert abs(coef.b - 6.625) < 1e-15
        assert abs(coef.c - (-21.75)) < 1e-15

    def test_root_at_half(self):
        # direct substitution: (-b + sqrt(b^2 - 4ac)) / (2a)
        a, b, c = 0.625, 6.625, -21.75
        want = (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)
        got = threshold_alpha(0.5)
        assert abs(got - want) < 1e-12
        assert abs(got - 2.6303) < 5e-5

    def test_c_negative_across_beta(self):
        betas = np.arange(0.001, 0.9995, 0.001)
        cs = 2.0 * betas**3 - 28.0 * betas**2 - 30.0 * betas
        assert np.all(cs < 0.0)
        for beta in betas[:: 37]:
            coef = ThresholdCoefficients.from_beta(float(beta))
            assert coef.c < 0.0

    def test_stable_near_one(self):
        for beta in (0.99, 0.999, 0.9999):
            thr = threshold_alpha(beta)
            assert math.isfinite(thr)
            assert thr > 0.0

    def test_matches_naive_quadratic_where_stable(self):
        for beta in np.arange(0.05, 1.0, 0.05):
            coef = ThresholdCoefficients.from_beta(float(beta))
            sq = math.sqrt(coef.b**2 - 4 * coef.a * coef.c)
            naive = (-coef.b + sq) / (2 * coef.a)
            assert abs(threshold_alpha(float(beta)) - naive) < 1e-9 * max(1.0, abs(naive))


class TestCriticalAlphaNumeric:
    def test_half_beta_has_no_crossover(self):
        # NEAR dominates the whole admissible interval at beta = 0.5.
        for alpha in np.arange(0.001, 1.0005, 0.001):
            assert _gap(float(alpha), 0.5) > 0.0
        assert critical_alpha_numeric(0.5) is None

    def test_small_beta_has_crossover(self):
        root = critical_alpha_numeric(0.1)
        assert root is not None
        assert 0.0 < root < 1.0
        # bracketing: g changes sign across the root
        assert _gap(root - 1e-6, 0.1) * _gap(root + 1e-6, 0.1) < 0.0

    def test_gap_continuous_at_alpha_zero(self):
        # The gap does NOT vanish as alpha -> 0 (the policies weight the
        # references differently even without loss growth); it approaches
        # the alpha = 0 value of the expanded closed forms.
        for beta in (0.1, 0.5, 0.9):
            limit = _total_further_expanded(0.0, beta) - _total_near_expanded(0.0, beta)
            assert limit > 0.0
            assert abs(_gap(1e-9, beta) - limit) < 1e-6

    def test_pure_function_repeatable(self):
        a = critical_alpha_numeric(0.2)
        b = critical_alpha_numeric(0.2)
        assert a == b
        if a is not None:
            assert abs(a - b) <= 1e-12


class TestPolicyCompareGrid:
    def test_single_cell(self):
        res = policy_compare_grid([0.5], [0.5])
        assert len(res.cells) == 1
        cell = res.cells[0]
        assert abs(cell.total_near - 3.255859375) < 1e-9
        assert abs(cell.total_further - 3.7861328125) < 1e-9
        assert cell.g > 0.0
        assert abs(cell.threshold - 2.6303) < 5e-5
        assert cell.agrees
        assert res.disagreements == 0

    def test_empty_grid(self):
        res = policy_compare_grid([], [0.5])
        assert res.cells == []
        assert res.disagreements == 0
        assert res.agreement_fraction == 1.0
        assert res.to_csv().splitlines() == ["alpha,beta,total_near,total_further,g,threshold,agrees"]

    def test_csv_shape_and_precision(self):
        res = policy_compare_grid([0.25, 0.75], [0.5])
        lines = res.to_csv().splitlines()
        assert lines[0] == "alpha,beta,total_near,total_further,g,threshold,agrees"
        assert len(lines) == 3
        first = lines[1].split(",")
        assert len(first) == 7
        # 17 significant digits survive a round trip
        assert float(first[2]) == res.cells[0].total_near

    def test_sorted_by_beta_then_alpha(self):
        res = policy_compare_grid([0.9, 0.1], [0.7, 0.3])
        keys = [(c.beta, c.alpha) for c in res.cells]
        assert keys == sorted(keys)

    def test_disagreements_counted_not_dropped(self):
        # The closed form's coefficients differ slightly from the true
        # recurrence quadratic, so boundary cells disagree; they must
        # still be present in the output.
        alphas = [i / 100 for i in range(1, 100)]
        betas = [i / 100 for i in range(1, 100)]
        res = policy_compare_grid(alphas, betas)
        assert len(res.cells) == 99 * 99
        assert res.disagreements > 0
        assert 0.9 < res.agreement_fraction < 1.0
