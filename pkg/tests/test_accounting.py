import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from accuracy_first.accounting import (
    BrownianCharge,
    Decision,
    ExPostFilter,
    FilterHaltedError,
    LedgerError,
    PsiParams,
    TwoTrackSession,
    UnifiedFilter,
    ZcdpFilter,
    basic_expost_compose,
    brownian_privacy_loss,
    composed_bnr_expost_epsilon,
    exact,
    inverse_time_half,
    laplace_nr_privacy_loss,
    psi,
    rho_for_dp_theorem,
    smallest_feasible_time,
    unified_charge_total,
)
from accuracy_first.core import (
    DpGuarantee,
    ExPostCertificate,
    TimeSchedule,
    ZcdpParams,
    rho_for_dp,
    zcdp_to_dp,
)


class TestPsi:
    def test_arranged_cancellation(self):
        assert psi(0.0, PsiParams(1.0, math.exp(-0.5))) == pytest.approx(1.0, rel=1e-12)

    def test_formula_value(self):
        assert psi(1.0, PsiParams(1.0, 0.05)) == pytest.approx(math.sqrt(2 * math.log(800)), rel=1e-12)
        assert psi(1.0, PsiParams(1.0, 0.05)) == pytest.approx(3.6564, abs=1e-4)

    def test_nondecreasing(self):
        grid = np.linspace(0, 100, 2001)
        for gamma in (0.01, 0.1, 1.0):
            assert np.all(np.diff(psi(grid, PsiParams(gamma, 0.05))) >= 0)

    def test_domain(self):
        with pytest.raises(ValueError):
            psi(-1.0, PsiParams(1.0, 0.05))
        with pytest.raises(ValueError):
            PsiParams(0.0, 0.05)
        with pytest.raises(ValueError):
            PsiParams(1.0, 1.0)


class TestLosses:
    def test_identical_statistics(self):
        assert brownian_privacy_loss(3.0, 1.7, 0.0) == 0.0

    def test_value_matches_density_ratio(self):
        t, delta, w = 4.0, 1.0, 2.0
        assert brownian_privacy_loss(t, w, delta) == pytest.approx(0.625)
        # y = f(x) + B with B = w along the shift, f(x') = f(x) - delta
        y = 0.0 + w
        ratio = stats.norm(0.0, math.sqrt(t)).logpdf(y) - stats.norm(-delta, math.sqrt(t)).logpdf(y)
        assert brownian_privacy_loss(t, w, delta) == pytest.approx(ratio, rel=1e-12)

    def test_algebraic_zero(self):
        assert brownian_privacy_loss(2.5, -0.5, 1.0) == pytest.approx(0.0, abs=1e-15)

    def test_bound_variant(self):
        assert brownian_privacy_loss(4.0, -3.0, 1.0, bound=True) == pytest.approx(1 / 8)

    def test_laplace_loss_values(self):
        assert laplace_nr_privacy_loss(1.0, 10.0, 1.0) == pytest.approx(-1.0)
        assert laplace_nr_privacy_loss(1.0, 0.5, 1.0) == 0.0
        assert laplace_nr_privacy_loss(2.0, 0.0, 1.0) == pytest.approx(0.5)

    def test_laplace_loss_is_density_ratio(self):
        t, x = 1.5, 0.3
        ratio = stats.laplace(scale=t).logpdf(x) - stats.laplace(scale=t).logpdf(x - 1.0)
        assert laplace_nr_privacy_loss(t, x, 1.0) == pytest.approx(ratio, rel=1e-12)

    def test_composed_epsilon(self):
        p = PsiParams(0.1, 0.05)
        assert composed_bnr_expost_epsilon(0.0, p) == psi(0.0, p)
        assert composed_bnr_expost_epsilon(0.01, p) == pytest.approx(0.005 + psi(0.01, p))
        v = 1 / 4 + 1 / 1
        assert v == 1.25
        assert composed_bnr_expost_epsilon(v, p, centered=False) == psi(1.25, p)

    def test_uncentered_bound_fails_for_large_variance(self):
        # sum of losses has mean V/2, which overtakes psi(V) ~ sqrt(V log V)
        p = PsiParams(0.1, 0.05)
        v = 400.0
        # P[N(V/2, V) >= psi(V)] is essentially one here
        miss = stats.norm(v / 2, math.sqrt(v)).sf(composed_bnr_expost_epsilon(v, p, centered=False))
        hit = stats.norm(v / 2, math.sqrt(v)).sf(composed_bnr_expost_epsilon(v, p))
        assert miss > 0.99
        assert hit <= 0.05

    def test_basic_compose(self):
        c = basic_expost_compose([ExPostCertificate(0.5, 0.01), ExPostCertificate(0.3, 0.02)])
        assert c.epsilon_realized == pytest.approx(0.8)
        assert c.delta == pytest.approx(0.03)
        assert basic_expost_compose([]) == ExPostCertificate(0.0, 0.0)
        one = ExPostCertificate(0.4, 0.001)
        assert basic_expost_compose([one]) == one


class TestExactArithmetic:
    def test_exact_is_lossless(self):
        assert exact(0.1) == Fraction(0.1)
        assert exact(0.1) != Fraction(1, 10)

    def test_inverse_time_half(self):
        assert inverse_time_half(1e4) == Fraction(1, 20000)
        assert float(inverse_time_half(1 / 1e-4)) == pytest.approx(0.00005)

    def test_smallest_feasible_time_is_tight(self):
        for rem in (exact(0.3), Fraction(1, 3), exact(1.3528)):
            t = smallest_feasible_time(rem)
            assert inverse_time_half(t) <= rem
            assert inverse_time_half(math.nextafter(t, 0)) > rem


class TestZcdpFilter:
    def test_thirteen_rounds(self):
        f = ZcdpFilter(10.0, 0.0, 1e-6)
        decisions = [f.try_spend(0.1) for _ in range(14)]
        assert decisions[:13] == [Decision.APPROVED] * 13
        assert decisions[13] is Decision.HALTED
        assert f.budget_rho == pytest.approx(1.3528, abs=1e-3)

    def test_oversized_first_request(self):
        f = ZcdpFilter(10.0, 0.0, 1e-6)
        assert f.try_spend(1.36) is Decision.HALTED
        assert f.spent_rho == 0

    def test_zero_requests_always_approved(self):
        f = ZcdpFilter(0.5, 0.0, 1e-6)
        assert all(f.try_spend(0.0, 0.0) is Decision.APPROVED for _ in range(100))

    def test_halt_is_permanent(self):
        f = ZcdpFilter(1.0, 0.0, 1e-6)
        f.try_spend(10.0)
        with pytest.raises(FilterHaltedError):
            f.try_spend(0.0)

    def test_delta_overflow_halts(self):
        f = ZcdpFilter(10.0, 1e-3, 1e-6)
        assert f.try_spend(0.1, 6e-4) is Decision.APPROVED
        assert f.try_spend(0.1, 6e-4) is Decision.HALTED

    def test_budget_never_exceeds_target(self):
        for eps in (0.01, 1.0, 10.0, 123.0):
            f = ZcdpFilter(eps, 0.0, 1e-6)
            f.try_spend(f.budget_rho)
            assert f.spent_rho == f.budget_rho
            assert zcdp_to_dp(ZcdpParams(float(f.spent_rho)), 1e-6).epsilon <= eps

    def test_guarantee(self):
        g = ZcdpFilter(10.0, 1e-5, 1e-6).guarantee()
        assert g == DpGuarantee(10.0, 1e-5 + 1e-6)


class TestExPostFilter:
    def test_ledger_example(self):
        f = ExPostFilter(1.0)
        assert f.admit(0.6) is Decision.APPROVED
        assert f.settle(0.5) is Decision.APPROVED
        assert f.admit(0.5) is Decision.APPROVED
        assert f.settle(0.5) is Decision.HALTED
        with pytest.raises(FilterHaltedError):
            f.admit(0.0)

    def test_zero_cap(self):
        f = ExPostFilter(1.0)
        for _ in range(10):
            assert f.admit(0.0) is Decision.APPROVED
            f.settle(0.0)
        assert f.remaining_epsilon == 1

    def test_cap_above_remaining_halts(self):
        f = ExPostFilter(1.0)
        assert f.admit(1.5) is Decision.HALTED
        assert f.spent_epsilon == 0

    def test_order_errors(self):
        f = ExPostFilter(1.0)
        with pytest.raises(LedgerError):
            f.settle(0.1)
        f.admit(0.5)
        with pytest.raises(LedgerError):
            f.admit(0.1)
        with pytest.raises(LedgerError):
            f.settle(0.6)


class TestUnifiedFilter:
    def test_budget_from_target(self):
        f = UnifiedFilter.for_dp_target(10.0, 1e-6)
        assert 2 * float(f.budget_rho) == pytest.approx(2.705, abs=0.005)
        assert f.guarantee("experiment").epsilon == pytest.approx(10.0, abs=1e-9)

    def test_workflow_round(self):
        f = UnifiedFilter(1.3528, 0.0, 1e-6)
        assert f.admit_zcdp(0.00125) is Decision.APPROVED
        t_min = smallest_feasible_time(f.remaining_rho)
        sched = TimeSchedule([1e4, 100.0, t_min])
        assert f.admit_bnr(sched) is Decision.APPROVED
        assert f.settle_bnr(1e4) is Decision.APPROVED
        assert f.spent_rho == exact(0.00125) + inverse_time_half(1e4)
        assert float(inverse_time_half(1e4)) == pytest.approx(0.00005)

    def test_settle_at_tight_end_halts(self):
        f = UnifiedFilter(0.5, 0.0, 1e-6)
        t_min = smallest_feasible_time(f.remaining_rho)
        f.admit_bnr(TimeSchedule([10.0, t_min]))
        assert f.settle_bnr(t_min) is Decision.HALTED
        assert f.remaining_rho == 0
        with pytest.raises(FilterHaltedError):
            f.admit_zcdp(0.0)

    def test_infeasible_schedule_halts(self):
        f = UnifiedFilter(0.5, 0.0, 1e-6)
        assert f.admit_bnr(TimeSchedule([10.0, 0.9])) is Decision.HALTED

    def test_off_schedule_stop_rejected(self):
        f = UnifiedFilter(1.0, 0.0, 1e-6)
        f.admit_bnr(TimeSchedule([10.0, 5.0]))
        with pytest.raises(LedgerError):
            f.settle_bnr(7.0)
        with pytest.raises(LedgerError):
            f.admit_zcdp(0.1)

    def test_guarantee_variants(self):
        f = UnifiedFilter(1.3528, 0.0, 1e-6)
        assert f.guarantee("experiment").epsilon == pytest.approx(10.0, abs=2e-3)
        theorem = 1.3528 + 2 * math.sqrt(2 * 1.3528 * math.log(1e6))
        assert f.guarantee("theorem").epsilon == pytest.approx(theorem, rel=1e-12)
        assert f.guarantee("theorem").epsilon == pytest.approx(13.58, abs=0.01)
        assert UnifiedFilter(0.0, 0.0, 1e-6).guarantee() == DpGuarantee(0.0, 1e-6)
        # a priori: spending nothing does not change the reported guarantee
        assert f.guarantee("theorem") == UnifiedFilter(1.3528, 0.0, 1e-6).guarantee("theorem")

    def test_theorem_variant_budget(self):
        rho = rho_for_dp_theorem(10.0, 1e-6)
        f = UnifiedFilter.for_dp_target(10.0, 1e-6, variant="theorem")
        assert f.guarantee("theorem").epsilon == pytest.approx(10.0, rel=1e-9)
        assert float(f.budget_rho) == rho < rho_for_dp(DpGuarantee(10.0, 0.0), 1e-6)

    def test_charge_ledger_identity(self):
        f = UnifiedFilter(2.0, 0.0, 1e-6)
        f.admit_zcdp(0.3)
        f.admit_bnr(TimeSchedule([5.0, 2.0]))
        f.settle_bnr(2.0)
        assert unified_charge_total(f.charges) == f.spent_rho
        assert isinstance(f.charges[1], BrownianCharge)
        with pytest.raises(LedgerError):
            BrownianCharge(Fraction(1, 10), Fraction(1, 5))


class TestTwoTrack:
    def test_guarantee_sum(self):
        s = TwoTrackSession.from_budgets((1.0, 0.0, 1e-6), (1.0, 0.0))
        g = s.guarantee()
        assert g.epsilon == pytest.approx(2.0)
        assert g.delta == pytest.approx(1e-6)

    def test_zcdp_only_matches_filter(self):
        s = TwoTrackSession.from_budgets((10.0, 0.0, 1e-6), (1.0, 0.0))
        outs = []
        while not s.halted:
            outs.append(s.zcdp_round(lambda h: (0.1, 0.0), lambda rho: rho))
        assert outs[:13] == [0.1] * 13 and outs[13] is None

    def test_expost_exhaustion_halts_session(self):
        s = TwoTrackSession.from_budgets((10.0, 0.0, 1e-6), (1.0, 0.0))
        s.zcdp_round(lambda h: (0.1, 0.0), lambda rho: "z")
        s.expost_round(lambda h: (1.0, 0.0), lambda cap: ("e", cap))
        assert s.expost.halted and s.halted
        assert s.zcdp.remaining_rho > 0
        with pytest.raises(FilterHaltedError):
            s.zcdp_round(lambda h: (0.1, 0.0), lambda rho: "z")

    def test_policies_see_own_history(self):
        s = TwoTrackSession.from_budgets((10.0, 0.0, 1e-6), (5.0, 0.0))
        seen = []
        s.zcdp_round(lambda h: (0.1, 0.0), lambda rho: "z1")
        s.expost_round(lambda h: (seen.append(h) or 0.5, 0.0), lambda cap: ("e1", 0.2))
        s.expost_round(lambda h: (seen.append(h) or 0.5, 0.0), lambda cap: ("e2", 0.2))
        assert seen == [(), ("e1",)]
        assert s.zcdp_history == ("z1",)
