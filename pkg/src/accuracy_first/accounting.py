"""Privacy-loss calculators, ex-post bounds and privacy filters.

All filter ledgers are kept in exact rational arithmetic (``fractions.Fraction``
built from the exact binary value of each float charge), so "budget exhausted"
is an equality test rather than a floating tolerance.  Budgets are tracked in
rho-space and converted to (epsilon, delta) only when a guarantee is reported.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Sequence

import numpy as np

from .core import (
    DpGuarantee,
    ExPostCertificate,
    TimeSchedule,
    ZcdpParams,
    rho_for_dp,
    zcdp_to_dp,
)


class Decision(enum.Enum):
    APPROVED = "approved"
    HALTED = "halted"


class FilterHaltedError(RuntimeError):
    """Raised when a halted filter receives another request."""


class LedgerError(RuntimeError):
    """Raised on out-of-order ledger operations (settle without admit, ...)."""


def exact(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"charges must be finite, got {x}")
    return Fraction(x)


def inverse_time_half(t) -> Fraction:
    """Exact 1 / (2 t): the zCDP-style charge of a Brownian run stopped at t."""
    return Fraction(1) / (2 * exact(t))


def smallest_feasible_time(remaining) -> float:
    """Smallest float t with 1/(2t) <= remaining, evaluated exactly."""
    remaining = exact(remaining)
    if remaining <= 0:
        raise ValueError("no positive time fits a nonpositive budget")
    t = 1.0 / (2.0 * float(remaining))
    while inverse_time_half(t) > remaining:
        t = math.nextafter(t, math.inf)
    while True:
        lower = math.nextafter(t, 0.0)
        if lower > 0 and inverse_time_half(lower) <= remaining:
            t = lower
        else:
            return t


# ---------------------------------------------------------------- losses


@dataclass(frozen=True)
class PsiParams:
    gamma: float
    delta: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


def psi(t, p: PsiParams):
    """Gaussian-mixture boundary sqrt((t + g) log((t + g) / (delta^2 g)))."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("psi is defined for nonnegative t")
    tg = t + p.gamma
    out = np.sqrt(tg * np.log(tg / (p.delta**2 * p.gamma)))
    return float(out) if out.ndim == 0 else out


def brownian_privacy_loss(t_stop, w, delta2: float, bound: bool = False):
    """Privacy loss of a Brownian noise reduction stopped at ``t_stop``.

    ``w`` is the noise B(t_stop) projected on the unit vector pointing from
    f(x') to f(x), and ``delta2`` is ||f(x) - f(x')||.  The exact loss is
    delta2^2 / (2 t) + (delta2 / t) w; with ``bound=True`` w is replaced by
    max(w, 0), which bounds the loss over all neighbors at that distance.
    """
    t_stop = np.asarray(t_stop, dtype=np.float64)
    if np.any(t_stop <= 0):
        raise ValueError("stop time must be positive")
    w = np.asarray(w, dtype=np.float64)
    if bound:
        w = np.maximum(w, 0.0)
    out = delta2**2 / (2.0 * t_stop) + (delta2 / t_stop) * w
    return float(out) if out.ndim == 0 else out


def laplace_nr_privacy_loss(t_stop, x_val, delta1: float):
    """-(|X| - |X - delta1|) / t for a Laplace noise reduction stopped at t.

    Evaluated as (delta1 - 2 clip(X, 0, delta1)) / t, which is exact on the
    two flat pieces +-delta1 / t.
    """
    t_stop = np.asarray(t_stop, dtype=np.float64)
    if np.any(t_stop <= 0):
        raise ValueError("stop time must be positive")
    x_val = np.asarray(x_val, dtype=np.float64)
    lo, hi = min(0.0, delta1), max(0.0, delta1)
    out = (delta1 - 2.0 * np.clip(x_val, lo, hi)) / t_stop
    return float(out) if out.ndim == 0 else out


def composed_bnr_expost_epsilon(inverse_time_sum, p: PsiParams, centered: bool = True) -> float:
    """Ex-post epsilon for adaptively composed unit-sensitivity Brownian runs.

    With V = sum_i 1/t_i the composed loss is V/2 plus a continuous martingale
    with quadratic variation V, so the mixture boundary gives V/2 + psi(V).
    ``centered=False`` returns psi(V) alone, which only holds while V is small
    (the mean V/2 eventually overtakes psi).
    """
    if inverse_time_sum < 0:
        raise ValueError("sum of inverse times must be nonnegative")
    v = float(inverse_time_sum)
    return (v / 2.0 if centered else 0.0) + psi(v, p)


def basic_expost_compose(certs: Sequence[ExPostCertificate]) -> ExPostCertificate:
    eps = sum((c.epsilon_realized for c in certs), 0.0)
    delta = sum((c.delta for c in certs), 0.0)
    return ExPostCertificate(eps, min(1.0, delta))


def rho_for_dp_theorem(epsilon: float, delta_conv: float) -> float:
    """Solve rho + 2 sqrt(2 rho log(1/delta_conv)) = epsilon for rho."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0.0 < delta_conv < 1.0:
        raise ValueError("conversion delta must lie in (0, 1)")
    two_l = 2.0 * math.log(1.0 / delta_conv)
    root = epsilon / (math.sqrt(two_l + epsilon) + math.sqrt(two_l))
    return root * root


# ---------------------------------------------------------------- charges


@dataclass(frozen=True)
class ZcdpCharge:
    rho: Fraction
    delta: Fraction = Fraction(0)


@dataclass(frozen=True)
class BrownianCharge:
    """Admitted Brownian run; the realized charge 1/(2 t_stop) is set on settle."""

    max_inverse_time_half: Fraction
    realized_inverse_time_half: Fraction | None = None

    def __post_init__(self):
        r = self.realized_inverse_time_half
        if r is not None and r > self.max_inverse_time_half:
            raise LedgerError("realized charge exceeds the admitted maximum")


@dataclass(frozen=True)
class ExPostCharge:
    cap_epsilon: Fraction
    realized_epsilon: Fraction | None = None
    delta: Fraction = Fraction(0)

    def __post_init__(self):
        r = self.realized_epsilon
        if r is not None and r > self.cap_epsilon:
            raise LedgerError("realized epsilon exceeds the admitted cap")


def _check_delta(delta, name="delta"):
    if not 0.0 <= float(delta) <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {delta}")


class _Filter:
    """Shared ledger plumbing: budget, spent sums, permanent halt."""

    def __init__(self, budget_delta):
        _check_delta(budget_delta)
        self.budget_delta = exact(budget_delta)
        self.spent_delta = Fraction(0)
        self.charges: list = []
        self.halted = False

    def _ensure_open(self):
        if self.halted:
            raise FilterHaltedError(f"{type(self).__name__} has halted")

    def _halt(self) -> Decision:
        self.halted = True
        return Decision.HALTED

    def _delta_fits(self, delta_n: Fraction) -> bool:
        # the round that would overflow delta is never run
        return self.spent_delta + delta_n <= self.budget_delta


# ------------------------------------------------------------ zCDP filter


class ZcdpFilter(_Filter):
    """Approximate-zCDP privacy filter with lookahead halting.

    A request is approved iff the running rho total, including it, still
    converts to at most ``epsilon`` at conversion slack ``delta_conv`` and the
    delta total stays within ``delta``.  The first request that does not fit
    is never run and halts the filter for good.  Reported guarantee:
    (epsilon, delta + delta_conv)-DP.
    """

    def __init__(self, epsilon: float, delta: float = 0.0, delta_conv: float = 1e-6):
        super().__init__(delta)
        self.epsilon = float(epsilon)
        self.delta_conv = float(delta_conv)
        cap = rho_for_dp(DpGuarantee(self.epsilon, 0.0), self.delta_conv)
        # rounding may push the closed form a hair past the target
        while zcdp_to_dp(ZcdpParams(cap), self.delta_conv).epsilon > self.epsilon:
            cap = math.nextafter(cap, 0.0)
        self.budget_rho = exact(cap)
        self.spent_rho = Fraction(0)

    @property
    def remaining_rho(self) -> Fraction:
        return self.budget_rho - self.spent_rho

    def try_spend(self, rho_n, delta_n=0.0) -> Decision:
        self._ensure_open()
        rho_n, delta_n = exact(rho_n), exact(delta_n)
        if rho_n < 0 or delta_n < 0:
            raise ValueError("charges must be nonnegative")
        if self.spent_rho + rho_n > self.budget_rho or not self._delta_fits(delta_n):
            return self._halt()
        self.spent_rho += rho_n
        self.spent_delta += delta_n
        self.charges.append(ZcdpCharge(rho_n, delta_n))
        return Decision.APPROVED

    def guarantee(self) -> DpGuarantee:
        return DpGuarantee(self.epsilon, min(1.0, float(self.budget_delta) + self.delta_conv))


# --------------------------------------------------------- ex-post filter


class ExPostFilter(_Filter):
    """Basic-composition filter for arbitrary ex-post private mechanisms.

    ``admit`` accepts a mechanism only if its largest possible realized
    epsilon fits the remaining budget; ``settle`` books the realized value.
    The filter halts when the budget is used up exactly, or when a request
    does not fit.
    """

    def __init__(self, epsilon: float, delta: float = 0.0):
        super().__init__(delta)
        if not epsilon >= 0:
            raise ValueError("epsilon budget must be nonnegative")
        self.budget_epsilon = exact(epsilon)
        self.spent_epsilon = Fraction(0)
        self._pending: ExPostCharge | None = None

    @property
    def remaining_epsilon(self) -> Fraction:
        return self.budget_epsilon - self.spent_epsilon

    @property
    def pending(self) -> bool:
        return self._pending is not None

    def admit(self, cap_epsilon, delta_n=0.0) -> Decision:
        self._ensure_open()
        if self._pending is not None:
            raise LedgerError("previous mechanism has not been settled")
        cap, delta_n = exact(cap_epsilon), exact(delta_n)
        if cap < 0 or delta_n < 0:
            raise ValueError("charges must be nonnegative")
        if cap > self.remaining_epsilon or not self._delta_fits(delta_n):
            return self._halt()
        self.spent_delta += delta_n
        self._pending = ExPostCharge(cap, None, delta_n)
        return Decision.APPROVED

    def settle(self, realized_epsilon) -> Decision:
        if self._pending is None:
            raise LedgerError("settle called without an admitted mechanism")
        realized = exact(realized_epsilon)
        if realized < 0:
            raise ValueError("realized epsilon must be nonnegative")
        pending = self._pending
        charge = ExPostCharge(pending.cap_epsilon, realized, pending.delta)
        self._pending = None
        self.spent_epsilon += realized
        self.charges.append(charge)
        if self.remaining_epsilon == 0 and self.budget_epsilon > 0:
            return self._halt()
        return Decision.APPROVED

    def guarantee(self) -> DpGuarantee:
        return DpGuarantee(float(self.budget_epsilon), float(self.budget_delta))


# --------------------------------------------------------- unified filter


class UnifiedFilter(_Filter):
    """One rho budget shared by zCDP mechanisms and Brownian noise reductions.

    A zCDP round costs its rho.  A Brownian run is admitted only if stopping
    at its smallest time, costing 1/(2 t_min), still fits; once it stops at
    t_stop the realized 1/(2 t_stop) is charged.  The filter halts when the
    remaining rho reaches exactly zero or a request does not fit.
    """

    def __init__(self, rho: float, delta: float = 0.0, delta_conv: float = 1e-6):
        super().__init__(delta)
        if not rho >= 0:
            raise ValueError("rho budget must be nonnegative")
        if not 0.0 < delta_conv < 1.0:
            raise ValueError("conversion delta must lie in (0, 1)")
        self.budget_rho = exact(rho)
        self.delta_conv = float(delta_conv)
        self.spent_rho = Fraction(0)
        self._pending: tuple[TimeSchedule, Fraction] | None = None

    @classmethod
    def for_dp_target(
        cls, epsilon: float, delta_conv: float, delta: float = 0.0, variant: str = "experiment"
    ) -> "UnifiedFilter":
        """Budget whose ``guarantee(variant)`` equals (epsilon, delta + delta_conv)."""
        if variant == "experiment":
            rho = rho_for_dp(DpGuarantee(epsilon, 0.0), delta_conv)
        elif variant == "theorem":
            rho = rho_for_dp_theorem(epsilon, delta_conv)
        else:
            raise ValueError(f"unknown variant {variant!r}")
        return cls(rho, delta, delta_conv)

    @property
    def remaining_rho(self) -> Fraction:
        return self.budget_rho - self.spent_rho

    @property
    def pending(self) -> bool:
        return self._pending is not None

    def _after_charge(self) -> Decision:
        if self.remaining_rho == 0:
            return self._halt()
        return Decision.APPROVED

    def admit_zcdp(self, rho_n, delta_n=0.0) -> Decision:
        self._ensure_open()
        if self._pending is not None:
            raise LedgerError("a Brownian run is still open")
        rho_n, delta_n = exact(rho_n), exact(delta_n)
        if rho_n < 0 or delta_n < 0:
            raise ValueError("charges must be nonnegative")
        if rho_n > self.remaining_rho or not self._delta_fits(delta_n):
            return self._halt()
        self.spent_rho += rho_n
        self.spent_delta += delta_n
        self.charges.append(ZcdpCharge(rho_n, delta_n))
        if self.remaining_rho == 0:
            # the round itself was approved; nothing further can run
            self.halted = True
        return Decision.APPROVED

    def admit_bnr(self, schedule: TimeSchedule) -> Decision:
        self._ensure_open()
        if self._pending is not None:
            raise LedgerError("a Brownian run is still open")
        if not isinstance(schedule, TimeSchedule):
            schedule = TimeSchedule(schedule)
        max_charge = inverse_time_half(schedule.smallest)
        if max_charge > self.remaining_rho:
            return self._halt()
        self._pending = (schedule, max_charge)
        return Decision.APPROVED

    def settle_bnr(self, t_stop: float) -> Decision:
        if self._pending is None:
            raise LedgerError("settle called without an admitted Brownian run")
        schedule, max_charge = self._pending
        if not np.any(schedule.times == t_stop):
            raise LedgerError(f"stop time {t_stop} is not on the admitted schedule")
        realized = inverse_time_half(t_stop)
        self._pending = None
        self.spent_rho += realized
        self.charges.append(BrownianCharge(max_charge, realized))
        return self._after_charge()

    def guarantee(self, variant: str = "theorem") -> DpGuarantee:
        rho = float(self.budget_rho)
        log_term = math.log(1.0 / self.delta_conv)
        if variant == "theorem":
            eps = rho + 2.0 * math.sqrt(2.0 * rho * log_term)
        elif variant == "experiment":
            eps = rho + 2.0 * math.sqrt(rho * log_term)
        else:
            raise ValueError(f"unknown variant {variant!r}")
        return DpGuarantee(eps, min(1.0, float(self.budget_delta) + self.delta_conv))


def unified_charge_total(charges) -> Fraction:
    """Independent recomputation of a unified ledger total from its entries."""
    total = Fraction(0)
    for c in charges:
        if isinstance(c, ZcdpCharge):
            total += c.rho
        else:
            total += c.realized_inverse_time_half
    return total


# ------------------------------------------------------ two-track session


class TwoTrackSession:
    """Concurrent zCDP track and ex-post track, each with its own budget.

    Each round goes to one track.  The policy deciding that round's
    parameters sees only the history of its own track.  The session halts as
    soon as either track halts.  Reported guarantee:
    (eps + eps', delta + delta' + delta_conv)-DP.
    """

    def __init__(self, zcdp: ZcdpFilter, expost: ExPostFilter):
        self.zcdp = zcdp
        self.expost = expost
        self._zcdp_history: list = []
        self._expost_history: list = []

    @classmethod
    def from_budgets(cls, zcdp_budget, expost_budget) -> "TwoTrackSession":
        eps, delta, delta_conv = zcdp_budget
        eps2, delta2 = expost_budget
        return cls(ZcdpFilter(eps, delta, delta_conv), ExPostFilter(eps2, delta2))

    @property
    def halted(self) -> bool:
        return self.zcdp.halted or self.expost.halted

    @property
    def zcdp_history(self) -> tuple:
        return tuple(self._zcdp_history)

    @property
    def expost_history(self) -> tuple:
        return tuple(self._expost_history)

    def _ensure_open(self):
        if self.halted:
            raise FilterHaltedError("session has halted")

    def zcdp_round(self, policy: Callable[[tuple], tuple], mechanism: Callable[[float], Any]):
        """``policy(history) -> (rho, delta)``; ``mechanism(rho)`` runs if approved.

        Returns the mechanism output, or None if the request halted the session.
        """
        self._ensure_open()
        rho, delta = policy(self.zcdp_history)
        if self.zcdp.try_spend(rho, delta) is Decision.HALTED:
            return None
        out = mechanism(rho)
        self._zcdp_history.append(out)
        return out

    def expost_round(
        self, policy: Callable[[tuple], tuple], mechanism: Callable[[float], tuple]
    ):
        """``policy(history) -> (cap, delta)``; ``mechanism(cap) -> (output, realized)``."""
        self._ensure_open()
        cap, delta = policy(self.expost_history)
        if self.expost.admit(cap, delta) is Decision.HALTED:
            return None
        out, realized = mechanism(cap)
        self.expost.settle(realized)
        self._expost_history.append(out)
        return out

    def guarantee(self) -> DpGuarantee:
        a, b = self.zcdp.guarantee(), self.expost.guarantee()
        return DpGuarantee(a.epsilon + b.epsilon, min(1.0, a.delta + b.delta))
