"""Exact samplers for the two noise processes behind noise reduction.

Both processes start at zero, have independent increments and are sampled
*backward*: the value at the largest time first, then conditional draws at
smaller times.  Brownian motion refines through the Brownian bridge; the
Laplace process X(t) (Laplace(t) marginal at every t) refines through its
exact conditional law given the later value, which is an atom at the current
value mixed with a piecewise-exponential density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import TimeSchedule


def make_rng(seed=None) -> np.random.Generator:
    """Counter-based (Philox) generator; Generators are passed through unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _check_step(current: float, t_next: float) -> None:
    if not t_next > 0:
        raise ValueError(f"next time must be positive, got {t_next}")
    if not t_next < current:
        raise ValueError(f"next time {t_next} must be below current time {current}")


# ---------------------------------------------------------------- Brownian


@dataclass(frozen=True)
class BrownianState:
    current_time: float
    current_value: np.ndarray
    rng: np.random.Generator

    @property
    def dim(self) -> int:
        return self.current_value.shape[0]


def brownian_init(t1: float, d: int = 1, seed=None) -> BrownianState:
    """Draw B(t1) ~ N(0, t1 I_d)."""
    if not t1 > 0:
        raise ValueError(f"initial time must be positive, got {t1}")
    if d < 1:
        raise ValueError("dimension must be at least 1")
    rng = make_rng(seed)
    value = rng.normal(0.0, math.sqrt(t1), size=d)
    return BrownianState(float(t1), value, rng)


def bridge_moments(b, t: float, t_next: float):
    """Mean and variance of B(t_next) given B(t) = b (and B(0) = 0)."""
    frac = t_next / t
    return frac * np.asarray(b, dtype=np.float64), t_next * (t - t_next) / t


def brownian_step_back(s: BrownianState, t_next: float) -> BrownianState:
    _check_step(s.current_time, t_next)
    mean, var = bridge_moments(s.current_value, s.current_time, t_next)
    value = mean + math.sqrt(var) * s.rng.standard_normal(s.dim)
    return BrownianState(float(t_next), value, s.rng)


def sample_brownian_grid(times, size: int, rng=None, d: int | None = None) -> np.ndarray:
    """Brownian motion evaluated on a decreasing grid for ``size`` independent paths.

    Returns shape ``(size, k)`` (or ``(size, k, d)`` when ``d`` is given).
    Built from the smallest time upward with independent Gaussian increments,
    which has the same joint law as repeated bridge refinement but vectorizes
    over the grid.
    """
    times = np.asarray(times, dtype=np.float64)
    TimeSchedule(times)
    rng = make_rng(rng)
    gaps = np.empty_like(times)
    gaps[:-1] = times[:-1] - times[1:]
    gaps[-1] = times[-1]
    shape = (size, times.size) if d is None else (size, times.size, d)
    scale = np.sqrt(gaps) if d is None else np.sqrt(gaps)[:, None]
    incr = rng.standard_normal(shape) * scale
    # reverse cumulative sum: B(t_j) = sum of increments on (0, t_j]
    return np.flip(np.cumsum(np.flip(incr, axis=1), axis=1), axis=1)


# ----------------------------------------------------------------- Laplace


@dataclass(frozen=True)
class LaplaceProcessState:
    current_time: float
    current_value: np.ndarray
    rng: np.random.Generator

    @property
    def dim(self) -> int:
        return self.current_value.shape[0]


def laplace_process_init(t1: float, d: int = 1, seed=None) -> LaplaceProcessState:
    """Draw X(t1) with i.i.d. Laplace(scale t1) coordinates."""
    if not t1 > 0:
        raise ValueError(f"initial time must be positive, got {t1}")
    if d < 1:
        raise ValueError("dimension must be at least 1")
    rng = make_rng(seed)
    return LaplaceProcessState(float(t1), rng.laplace(0.0, t1, size=d), rng)


def laplace_increment(t: float, t_next: float, size, rng=None) -> np.ndarray:
    """Forward increment X(t) - X(t_next) as a compound-Poisson sum.

    The increment's Levy density (e^{-|z|/t} - e^{-|z|/t_next}) / |z| has
    total mass 2 log(t / t_next); each jump is a two-sided exponential whose
    mean e^u has u uniform on (log t_next, log t).
    """
    _check_step(t, t_next)
    rng = make_rng(rng)
    size = (size,) if np.isscalar(size) else tuple(size)
    n = int(np.prod(size))
    counts = rng.poisson(2.0 * math.log(t / t_next), size=n)
    total = int(counts.sum())
    u = rng.uniform(math.log(t_next), math.log(t), size=total)
    jumps = rng.exponential(np.exp(u)) * rng.choice((-1.0, 1.0), size=total)
    owner = np.repeat(np.arange(n), counts)
    return np.bincount(owner, weights=jumps, minlength=n).reshape(size)


def laplace_bridge_weights(x, t: float, t_next: float):
    """Log-weights of the four pieces of the law of X(t_next) given X(t) = x.

    Pieces (for x >= 0, mirrored otherwise): the atom y = x, and the
    continuous parts on y < 0, 0 <= y <= x, y > x.  The weights sum to the
    Laplace(t) density at x.
    """
    ax = np.abs(np.asarray(x, dtype=np.float64))
    r = t_next / t
    a = 1.0 / t_next + 1.0 / t
    b = 1.0 / t_next - 1.0 / t
    cont = math.log1p(-r * r) - math.log(4.0 * t * t_next)
    with np.errstate(divide="ignore"):
        mid = np.log(-np.expm1(-b * ax))
    return np.stack(
        [
            2.0 * math.log(r) - math.log(2.0 * t_next) - ax / t_next,
            np.broadcast_to(cont - ax / t - math.log(a), ax.shape),
            cont - ax / t + mid - math.log(b),
            cont - ax / t_next - math.log(a),
        ]
    )


def laplace_bridge_sample(x, t: float, t_next: float, rng=None) -> np.ndarray:
    """Draw X(t_next) given X(t) = x, elementwise over ``x``."""
    _check_step(t, t_next)
    rng = make_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    sign = np.where(x < 0, -1.0, 1.0)
    logw = laplace_bridge_weights(ax, t, t_next)
    probs = np.exp(logw - logw.max(axis=0))
    cdf = np.cumsum(probs, axis=0)
    pick = rng.random(x.shape) * cdf[-1]
    piece = (pick[None] >= cdf[:-1]).sum(axis=0)
    e = rng.exponential(size=x.shape)
    w = rng.random(x.shape)

    a = 1.0 / t_next + 1.0 / t
    b = 1.0 / t_next - 1.0 / t
    y = np.empty_like(ax)
    y = np.where(piece == 0, ax, y)
    y = np.where(piece == 1, -e / a, y)
    # truncated exponential on [0, |x|] by inversion
    trunc = -np.log1p(w * np.expm1(-b * ax)) / b
    y = np.where(piece == 2, trunc, y)
    y = np.where(piece == 3, ax + e / a, y)
    return sign * y


def laplace_process_step_back(s: LaplaceProcessState, t_next: float) -> LaplaceProcessState:
    _check_step(s.current_time, t_next)
    value = laplace_bridge_sample(s.current_value, s.current_time, t_next, s.rng)
    return LaplaceProcessState(float(t_next), value, s.rng)


def sample_laplace_grid(times, size: int, rng=None) -> np.ndarray:
    """Laplace process on a decreasing grid, shape ``(size, k)``, sampled backward."""
    times = np.asarray(times, dtype=np.float64)
    TimeSchedule(times)
    rng = make_rng(rng)
    out = np.empty((size, times.size))
    out[:, 0] = rng.laplace(0.0, times[0], size=size)
    for j in range(1, times.size):
        out[:, j] = laplace_bridge_sample(out[:, j - 1], times[j - 1], times[j], rng)
    return out
