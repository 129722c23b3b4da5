"""Private mechanisms: Laplace, Gaussian, Gumbel-max selection and noise reduction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import NoiseReductionTranscript, NormOrder, Sensitivity, TimeSchedule
from .processes import (
    brownian_init,
    brownian_step_back,
    laplace_process_init,
    laplace_process_step_back,
    make_rng,
    sample_brownian_grid,
)


@dataclass(frozen=True)
class StatisticQuery:
    """An evaluated statistic f(x) together with its sensitivity."""

    value: np.ndarray
    sensitivity: Sensitivity = Sensitivity(1.0)

    def __post_init__(self):
        value = np.atleast_1d(np.asarray(self.value, dtype=np.float64))
        if value.ndim != 1 or value.size == 0:
            raise ValueError("statistic must be a nonempty vector")
        object.__setattr__(self, "value", value)

    @property
    def dim(self) -> int:
        return self.value.size


def _as_query(q) -> StatisticQuery:
    return q if isinstance(q, StatisticQuery) else StatisticQuery(q)


# ------------------------------------------------------- stopping functions


class StoppingFunction:
    """Decides from the released prefix alone whether to stop a noise reduction.

    ``__call__`` receives the prefix times (decreasing) and the prefix values
    with shape ``(k, d)`` and returns True to stop.  Subclasses whose decision
    at step k depends only on entry k can also implement ``decide_all``
    which scores every grid point at once.
    """

    vectorized = False

    def __call__(self, times: np.ndarray, values: np.ndarray) -> bool:
        raise NotImplementedError

    def decide_all(self, times: np.ndarray, values: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def first_stop(self, times: np.ndarray, values: np.ndarray) -> int | None:
        """Index of the first stop decision along a full grid, or None."""
        if self.vectorized:
            hits = np.flatnonzero(self.decide_all(times, values))
            return int(hits[0]) if hits.size else None
        for k in range(1, len(times) + 1):
            if self(times[:k], values[:k]):
                return k - 1
        return None


@dataclass(frozen=True)
class FixedStop(StoppingFunction):
    """Constant stopping function: stop after ``k`` releases."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("fixed stop index must be at least 1")

    def __call__(self, times, values):
        return len(times) >= self.k


def relative_error_condition(noisy, eps, alpha: float):
    """1 - alpha < |(y + 1/eps) / (y - 1/eps)| <= 1 + alpha  and  |y| > 1/eps."""
    noisy = np.asarray(noisy, dtype=np.float64)
    scale = 1.0 / np.asarray(eps, dtype=np.float64)
    guard = np.abs(noisy) > scale
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs((noisy + scale) / (noisy - scale))
    return guard & (ratio > 1.0 - alpha) & (ratio <= 1.0 + alpha)


@dataclass(frozen=True)
class RelativeErrorStop(StoppingFunction):
    """Stop once the noise scale 1/eps is small relative to the noisy count.

    At time t the noise scale is 1/eps = sqrt(t).  Every coordinate must meet
    the condition.
    """

    alpha: float
    vectorized = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")

    def decide_all(self, times, values):
        eps = 1.0 / np.sqrt(np.asarray(times, dtype=np.float64))
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            return relative_error_condition(values, eps, self.alpha)
        return relative_error_condition(values, eps[:, None], self.alpha).all(axis=1)

    def __call__(self, times, values):
        return bool(self.decide_all(times[-1:], np.atleast_2d(values)[-1:])[0])


def relative_error_stop(alpha: float) -> RelativeErrorStop:
    return RelativeErrorStop(alpha)


# ------------------------------------------------------- simple mechanisms


def laplace_mechanism(q, eps: float, seed=None) -> np.ndarray:
    """f(x) + Laplace(1/eps) per coordinate; (Delta_1 * eps)-DP."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    q = _as_query(q)
    rng = make_rng(seed)
    if math.isinf(eps):
        return q.value.copy()
    return q.value + rng.laplace(0.0, 1.0 / eps, size=q.dim)


def laplace_epsilon(q, eps: float) -> float:
    q = _as_query(q)
    return q.sensitivity.value * eps


def gaussian_mechanism(q, rho: float, seed=None) -> np.ndarray:
    """f(x) + N(0, I/rho); (Delta_2^2 * rho / 2)-zCDP."""
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    q = _as_query(q)
    rng = make_rng(seed)
    if math.isinf(rho):
        return q.value.copy()
    return q.value + rng.standard_normal(q.dim) / math.sqrt(rho)


def gaussian_zcdp_charge(q, rho: float) -> float:
    q = _as_query(q)
    if q.sensitivity.norm_order is NormOrder.L1:
        raise ValueError("Gaussian mechanism is calibrated to L2 sensitivity")
    return q.sensitivity.value**2 * rho / 2.0


def em_zcdp_charge(eps_em: float) -> float:
    return eps_em**2 / 8.0


def exponential_mechanism_argmax(counts, eps_em: float, seed=None, exclude=None) -> int:
    """Gumbel-max selection with Gumbel scale 1/eps_em over sensitivity-1 counts.

    Indices in ``exclude`` (a boolean mask or index list) are never chosen.
    Ties go to the lowest index.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a nonempty vector")
    if not eps_em > 0:
        raise ValueError(f"eps_em must be positive, got {eps_em}")
    rng = make_rng(seed)
    scores = counts.copy()
    if not math.isinf(eps_em):
        scores += rng.gumbel(0.0, 1.0 / eps_em, size=counts.size)
    if exclude is not None:
        mask = np.zeros(counts.size, dtype=bool)
        mask[exclude] = True
        if mask.all():
            raise ValueError("every candidate is excluded")
        scores[mask] = -np.inf
    return int(np.argmax(scores))


# ------------------------------------------------------- noise reduction


def _check_l2(q: StatisticQuery):
    if q.sensitivity.norm_order is NormOrder.L1:
        raise ValueError("Brownian noise reduction needs an L2-sensitivity statistic")


def brownian_noise_reduction(
    q, schedule: TimeSchedule, stop: StoppingFunction, seed=None, method: str = "auto"
) -> NoiseReductionTranscript:
    """Release f(x) + B(t_k) for k = 1, 2, ... until ``stop`` says so.

    ``method="sequential"`` refines one bridge step at a time;
    ``method="grid"`` draws the whole path at once (same joint law) and is
    what ``"auto"`` picks for vectorized stopping functions.
    """
    q = _as_query(q)
    _check_l2(q)
    if not isinstance(schedule, TimeSchedule):
        schedule = TimeSchedule(schedule)
    times = schedule.times
    if method == "auto":
        method = "grid" if stop.vectorized else "sequential"

    if method == "grid":
        noise = sample_brownian_grid(times, 1, seed, d=q.dim)[0]
        values = q.value + noise
        hit = stop.first_stop(times, values)
        k = len(times) if hit is None else hit + 1
        return NoiseReductionTranscript(times[:k], values[:k], satisfied=hit is not None)
    if method != "sequential":
        raise ValueError(f"unknown method {method!r}")

    state = brownian_init(times[0], q.dim, seed)
    released = [q.value + state.current_value]
    for k in range(1, len(times) + 1):
        if stop(times[:k], np.asarray(released)):
            return NoiseReductionTranscript(times[:k], released, satisfied=True)
        if k == len(times):
            break
        state = brownian_step_back(state, times[k])
        released.append(q.value + state.current_value)
    return NoiseReductionTranscript(times, released, satisfied=False)


def laplace_noise_reduction(
    q, schedule: TimeSchedule, stop: StoppingFunction, seed=None
) -> NoiseReductionTranscript:
    """Release f(x) + X(t_k) along the Laplace process until ``stop`` says so."""
    q = _as_query(q)
    if not isinstance(schedule, TimeSchedule):
        schedule = TimeSchedule(schedule)
    times = schedule.times
    state = laplace_process_init(times[0], q.dim, seed)
    released = [q.value + state.current_value]
    for k in range(1, len(times) + 1):
        if stop(times[:k], np.asarray(released)):
            return NoiseReductionTranscript(times[:k], released, satisfied=True)
        if k == len(times):
            break
        state = laplace_process_step_back(state, times[k])
        released.append(q.value + state.current_value)
    return NoiseReductionTranscript(times, released, satisfied=False)
