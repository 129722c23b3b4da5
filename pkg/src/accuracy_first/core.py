"""Domain types and zCDP <-> DP budget arithmetic."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class NormOrder(enum.Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"


@dataclass(frozen=True)
class DpGuarantee:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True)
class ZcdpParams:
    """delta-approximate rho-zCDP."""

    rho: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True)
class Sensitivity:
    value: float
    norm_order: NormOrder = NormOrder.L2

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError(f"sensitivity must be positive, got {self.value}")


@dataclass(frozen=True)
class ExPostCertificate:
    epsilon_realized: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.epsilon_realized >= 0:
            raise ValueError("realized epsilon must be nonnegative")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")


class TimeSchedule(Sequence[float]):
    """Strictly decreasing positive noise-reduction times t1 > t2 > ... > tk > 0.

    Larger times mean more noise; a run releases the noisiest answer first.
    """

    __slots__ = ("_times",)

    def __init__(self, times):
        arr = np.asarray(times, dtype=np.float64).ravel()
        if arr.size == 0:
            raise ValueError("schedule must contain at least one time")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise ValueError("schedule times must be finite and positive")
        if arr.size > 1 and np.any(np.diff(arr) >= 0):
            raise ValueError("schedule times must be strictly decreasing")
        arr.flags.writeable = False
        self._times = arr

    @classmethod
    def from_epsilons(cls, epsilons) -> "TimeSchedule":
        """Build the schedule t = 1/eps**2 from increasing privacy parameters."""
        eps = np.asarray(epsilons, dtype=np.float64)
        return cls(1.0 / eps**2)

    @classmethod
    def from_squared_epsilons(cls, eps_sq) -> "TimeSchedule":
        return cls(1.0 / np.asarray(eps_sq, dtype=np.float64))

    @property
    def times(self) -> np.ndarray:
        return self._times

    @property
    def smallest(self) -> float:
        return float(self._times[-1])

    def epsilons(self) -> np.ndarray:
        return 1.0 / np.sqrt(self._times)

    def __len__(self):
        return self._times.size

    def __getitem__(self, i):
        if isinstance(i, slice):
            return TimeSchedule(self._times[i])
        return float(self._times[i])

    def __eq__(self, other):
        if not isinstance(other, TimeSchedule):
            return NotImplemented
        return np.array_equal(self._times, other._times)

    def __hash__(self):
        return hash(self._times.tobytes())

    def __repr__(self):
        return f"TimeSchedule({self._times.tolist()!r})"


@dataclass
class NoiseReductionTranscript:
    """Released prefix ``(t_k, f(x) + Z(t_k))`` for k up to the stop index.

    ``satisfied`` is False when the stopping function never chose to stop and
    the run was forced to end at the last grid time; such results are
    discarded by callers even though the charge is still paid.
    """

    times: np.ndarray
    values: np.ndarray  # shape (T, d)
    satisfied: bool = True

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.times.ndim != 1 or self.times.size == 0:
            raise ValueError("transcript needs at least one entry")
        if self.values.shape[0] != self.times.size:
            raise ValueError("one value vector per released time")
        if self.times.size > 1 and np.any(np.diff(self.times) >= 0):
            raise ValueError("transcript times must be strictly decreasing")

    @property
    def stop_index(self) -> int:
        return int(self.times.size)

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    @property
    def final_value(self) -> np.ndarray:
        return self.values[-1]

    @property
    def entries(self) -> list[tuple[float, np.ndarray]]:
        return list(zip(self.times.tolist(), self.values))


def _check_delta_conv(delta_conv: float) -> float:
    if not 0.0 < delta_conv < 1.0:
        raise ValueError(f"conversion delta must lie in (0, 1), got {delta_conv}")
    return float(delta_conv)


def zcdp_to_dp(p: ZcdpParams, delta_conv: float) -> DpGuarantee:
    """delta-approx rho-zCDP implies (rho + 2 sqrt(rho log(1/delta_conv)), delta + delta_conv)-DP."""
    delta_conv = _check_delta_conv(delta_conv)
    eps = p.rho + 2.0 * math.sqrt(p.rho * math.log(1.0 / delta_conv))
    return DpGuarantee(eps, min(1.0, p.delta + delta_conv))


def rho_for_dp(target: DpGuarantee, delta_conv: float) -> float:
    """Largest rho whose zCDP -> DP conversion stays within ``target.epsilon``.

    Solves rho + 2 sqrt(rho L) = eps with L = log(1/delta_conv); the positive
    root is sqrt(rho) = sqrt(L + eps) - sqrt(L).
    """
    if not target.epsilon > 0:
        raise ValueError("target epsilon must be positive")
    delta_conv = _check_delta_conv(delta_conv)
    log_term = math.log(1.0 / delta_conv)
    # eps / (sqrt(L + eps) + sqrt(L)) avoids cancellation when L >> eps
    root = target.epsilon / (math.sqrt(log_term + target.epsilon) + math.sqrt(log_term))
    return root * root


def zcdp_compose(a: ZcdpParams, b: ZcdpParams) -> ZcdpParams:
    return ZcdpParams(a.rho + b.rho, min(1.0, a.delta + b.delta))
