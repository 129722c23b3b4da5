"""Monte Carlo verification of the martingale, identity and tail-bound claims.

Every check returns an :class:`AuditReport`.  Pass rules are fixed in the
check itself (``mean <= 1 + 3 SE``, ``freq <= delta + 3 SE``, exact-identity
tolerances) and never tuned after the fact.  Randomness comes from
``SeedSequence([seed, block])`` per block of trials, so results do not depend
on how blocks are scheduled.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import stats

from .accounting import PsiParams, brownian_privacy_loss, laplace_nr_privacy_loss, psi
from .core import TimeSchedule
from .mechanisms import (
    RelativeErrorStop,
    StatisticQuery,
    StoppingFunction,
    brownian_noise_reduction,
    relative_error_condition,
)
from .processes import make_rng, sample_brownian_grid, sample_laplace_grid

BLOCK = 16_384
SUMMARY_FIELDS = ("name", "trials", "statistic", "threshold", "se", "passed", "seed")


@dataclass
class AuditReport:
    name: str
    trials: int
    statistic: float
    threshold: float
    standard_error: float
    passed: bool
    seed: int
    rule: str = ""
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict}  {self.name}: statistic={self.statistic:.6g} "
            f"threshold={self.threshold:.6g} se={self.standard_error:.3g} "
            f"trials={self.trials} seed={self.seed} [{self.rule}]"
        )

    def row(self) -> dict:
        return {
            "name": self.name,
            "trials": self.trials,
            "statistic": repr(float(self.statistic)),
            "threshold": repr(float(self.threshold)),
            "se": repr(float(self.standard_error)),
            "passed": str(bool(self.passed)).lower(),
            "seed": self.seed,
        }


def summary_csv(reports: Sequence[AuditReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def _blocks(seed: int, trials: int, salt: int = 0) -> Iterator[tuple[int, np.random.Generator]]:
    for b, start in enumerate(range(0, trials, BLOCK)):
        size = min(BLOCK, trials - start)
        yield size, make_rng(np.random.SeedSequence([seed, salt, b]))


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


# ------------------------------------------------------- path stopping rules
#
# A path stop maps (times (k,), path (n, k)) to 0-based stop indices (n,).
# It may only look at columns 0..j to decide whether to stop at j.

PathStop = Callable[[np.ndarray, np.ndarray], np.ndarray]


def fixed_path_stop(k: int) -> PathStop:
    def stop(times, path):
        if not 1 <= k <= len(times):
            raise ValueError(f"fixed stop {k} outside schedule of length {len(times)}")
        return np.full(path.shape[0], k - 1)

    return stop


def first_true_or_last(hits: np.ndarray) -> np.ndarray:
    any_hit = hits.any(axis=1)
    return np.where(any_hit, hits.argmax(axis=1), hits.shape[1] - 1)


def greedy_path_stop(direction: float = 1.0) -> PathStop:
    """Stop at the first step (after the first) where direction * B(t)/t is a new running max.

    This mimics an adversary trying to stop where the e-value or the
    privacy loss looks largest.
    """

    def stop(times, path):
        score = direction * path / times
        running = np.maximum.accumulate(score, axis=1)
        hits = np.zeros_like(score, dtype=bool)
        hits[:, 1:] = score[:, 1:] > running[:, :-1]
        return first_true_or_last(hits)

    return stop


def predicate_path_stop(stop: StoppingFunction, offset=0.0) -> PathStop:
    """Lift a per-entry stopping function onto noisy paths offset + B(t)."""
    if not stop.vectorized:
        raise ValueError("stopping function must score entries independently")

    def rule(times, path):
        noisy = offset + path
        if isinstance(stop, RelativeErrorStop):
            eps = 1.0 / np.sqrt(times)
            hits = relative_error_condition(noisy, eps[None, :], stop.alpha)
        else:
            hits = np.stack([stop.decide_all(times, row) for row in noisy])
        return first_true_or_last(hits)

    return rule


@dataclass(frozen=True)
class EValueSpec:
    lam: float
    schedule: TimeSchedule
    stopping: PathStop


@dataclass(frozen=True)
class Stage:
    """One Brownian noise reduction inside a composed session.

    ``choose`` maps the history so far, the stopped values B/tau and the
    inverse times 1/tau of earlier stages (arrays of shape ``(n, s)``), to an
    index into ``menu`` for each session.
    """

    menu: tuple
    choose: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    @classmethod
    def fixed(cls, schedule, stopping: PathStop) -> "Stage":
        return cls(((TimeSchedule(schedule), stopping),))


def _simulate_stopped(times: np.ndarray, stopping: PathStop, n: int, rng):
    path = sample_brownian_grid(times, n, rng)
    idx = stopping(times, path)
    tau = times[idx]
    return path[np.arange(n), idx], tau


def _run_sessions(stages: Sequence[Stage], n: int, rng):
    """Returns stopped B values and stop times, each of shape (n, len(stages))."""
    b = np.zeros((n, len(stages)))
    tau = np.ones((n, len(stages)))
    for s, stage in enumerate(stages):
        if stage.choose is None:
            pick = np.zeros(n, dtype=int)
        else:
            pick = np.asarray(stage.choose(b[:, :s] / tau[:, :s], 1.0 / tau[:, :s]), dtype=int)
        for option, (schedule, stopping) in enumerate(stage.menu):
            rows = np.flatnonzero(pick == option)
            if rows.size == 0:
                continue
            bb, tt = _simulate_stopped(TimeSchedule(schedule).times, stopping, rows.size, rng)
            b[rows, s] = bb
            tau[rows, s] = tt
    return b, tau


# ------------------------------------------------------------ e-value checks


def evalue_single_bnr(spec: EValueSpec, trials: int = 100_000, seed: int = 0) -> AuditReport:
    """Mean of exp(lam B(tau)/tau - lam^2/(2 tau)) at the stopped time tau."""
    if trials < 10_000:
        raise ValueError("e-value audits need at least 10^4 trials")
    times = spec.schedule.times
    values = []
    for n, rng in _blocks(seed, trials):
        b, tau = _simulate_stopped(times, spec.stopping, n, rng)
        values.append(np.exp(spec.lam * b / tau - spec.lam**2 / (2.0 * tau)))
    mean, se = _mean_se(np.concatenate(values))
    return AuditReport(
        name=f"evalue_single(lam={spec.lam:g})",
        trials=trials,
        statistic=mean,
        threshold=1.0 + 3.0 * se,
        standard_error=se,
        passed=mean <= 1.0 + 3.0 * se,
        seed=seed,
        rule="mean <= 1 + 3 SE",
    )


def evalue_product_sessions(
    lam: float, stages: Sequence[Stage], trials: int = 100_000, seed: int = 0
) -> AuditReport:
    """Mean of the product of stopped e-values over adaptively chosen runs."""
    if len(stages) < 2:
        raise ValueError("a product session needs at least two mechanisms")
    values = []
    for n, rng in _blocks(seed, trials, salt=1):
        b, tau = _run_sessions(stages, n, rng)
        log_e = lam * (b / tau).sum(axis=1) - lam**2 / 2.0 * (1.0 / tau).sum(axis=1)
        values.append(np.exp(log_e))
    mean, se = _mean_se(np.concatenate(values))
    return AuditReport(
        name=f"evalue_product(lam={lam:g},m={len(stages)})",
        trials=trials,
        statistic=mean,
        threshold=1.0 + 3.0 * se,
        standard_error=se,
        passed=mean <= 1.0 + 3.0 * se,
        seed=seed,
        rule="mean <= 1 + 3 SE",
    )


# ------------------------------------------------ noise-reduction identity


def _gauss_logpdf(y, mean, var):
    diff = y - mean
    return -0.5 * np.sum(diff * diff) / var - 0.5 * diff.size * math.log(2.0 * math.pi * var)


def transcript_log_density(times, values, f) -> float:
    """Log-density of a Brownian transcript with center f, factorized as the
    initial Gaussian at t1 times the bridge conditionals for later entries."""
    times = np.asarray(times, dtype=np.float64)
    values = np.atleast_2d(values)
    f = np.asarray(f, dtype=np.float64)
    out = _gauss_logpdf(values[0], f, times[0])
    for j in range(1, times.size):
        t, tn = times[j - 1], times[j]
        mean = f + (tn / t) * (values[j - 1] - f)
        out += _gauss_logpdf(values[j], mean, tn * (t - tn) / t)
    return out


@dataclass(frozen=True)
class ThresholdStop(StoppingFunction):
    """Stop once the first coordinate of the latest release exceeds ``level``."""

    level: float

    def __call__(self, times, values):
        return bool(np.atleast_2d(values)[-1, 0] > self.level)


def nr_loss_identity_check(
    schedule: TimeSchedule,
    stopping: StoppingFunction | None,
    delta2: float,
    trials: int = 1000,
    seed: int = 0,
    d: int = 1,
    tol: float = 1e-9,
) -> AuditReport:
    """Closed-form stopped loss vs. transcript log-density ratio, per transcript.

    With ``stopping=None`` each transcript gets a ThresholdStop with a level
    drawn from public randomness, so stop indices vary adaptively.
    """
    schedule = TimeSchedule(schedule)
    root = np.random.SeedSequence([seed, 2])
    dir_rng = make_rng(root.spawn(1)[0])
    u = dir_rng.standard_normal(d)
    u /= np.linalg.norm(u)
    f_x = np.linspace(-1.0, 1.0, d)
    f_xp = f_x - delta2 * u
    worst = 0.0
    stops = []
    for i, child in enumerate(root.spawn(trials + 1)[1:]):
        rng = make_rng(child)
        stop = stopping
        if stop is None:
            stop = ThresholdStop(float(f_x[0] + rng.normal(0.0, 1.0)))
        tr = brownian_noise_reduction(StatisticQuery(f_x), schedule, stop, seed=rng, method="sequential")
        w = float(u @ (tr.final_value - f_x))
        closed = brownian_privacy_loss(tr.final_time, w, delta2)
        ratio = transcript_log_density(tr.times, tr.values, f_x) - transcript_log_density(
            tr.times, tr.values, f_xp
        )
        worst = max(worst, abs(closed - ratio))
        stops.append(tr.stop_index)
    return AuditReport(
        name=f"nr_loss_identity(d={d},delta2={delta2:g})",
        trials=trials,
        statistic=worst,
        threshold=tol,
        standard_error=0.0,
        passed=worst <= tol,
        seed=seed,
        rule="max |closed form - density ratio| <= tol",
        details={"stop_index_counts": np.bincount(stops, minlength=len(schedule) + 1)[1:].tolist()},
    )


# -------------------------------------------------------- ex-post tail bound

TAIL_BOUNDS = ("theorem", "uncentered", "per_mechanism")


def expost_tail_check(
    stages: Sequence[Stage],
    bound: str = "theorem",
    delta: float = 0.05,
    gamma: float = 0.1,
    trials: int = 100_000,
    seed: int = 0,
    delta2: float = 1.0,
) -> AuditReport:
    """Frequency with which the composed Brownian loss exceeds its ex-post bound.

    Losses use the worst-case unit shift, L_i = d^2/(2 tau_i) + d B_i(tau_i)/tau_i.

    bound:
      ``theorem``        sum L_i >= sum d^2/(2 tau_i) + psi(sum d^2/tau_i)
                         (mixture boundary on the centered loss)
      ``uncentered``     sum L_i >= psi(sum 1/tau_i) with no centering term
      ``per_mechanism``  each run gets the single-run bound at delta/m,
                         then the bounds are summed (basic composition)
    """
    if bound not in TAIL_BOUNDS:
        raise ValueError(f"bound must be one of {TAIL_BOUNDS}")
    m = len(stages)
    p = PsiParams(gamma, delta)
    violations = []
    for n, rng in _blocks(seed, trials, salt=3):
        b, tau = _run_sessions(stages, n, rng)
        losses = brownian_privacy_loss(tau, b, delta2)
        total = losses.sum(axis=1)
        var = (delta2**2 / tau).sum(axis=1)
        if bound == "theorem":
            limit = var / 2.0 + psi(var, p)
        elif bound == "uncentered":
            limit = psi(var, p)
        else:
            single = PsiParams(gamma, delta / m)
            limit = (delta2**2 / (2.0 * tau) + psi(delta2**2 / tau, single)).sum(axis=1)
        violations.append(total >= limit)
    hits = np.concatenate(violations).astype(np.float64)
    freq = float(hits.mean())
    se = math.sqrt(max(freq * (1.0 - freq), 0.0) / trials)
    return AuditReport(
        name=f"expost_tail({bound},m={m},gamma={gamma:g},delta={delta:g})",
        trials=trials,
        statistic=freq,
        threshold=delta + 3.0 * se,
        standard_error=se,
        passed=freq <= delta + 3.0 * se,
        seed=seed,
        rule="violation frequency <= delta + 3 SE",
    )


# --------------------------------------------------- Laplace noise reduction


def laplace_nr_loss_check(
    schedule: TimeSchedule,
    stopping: PathStop,
    delta1: float = 1.0,
    trials: int = 100_000,
    seed: int = 0,
) -> AuditReport:
    """Stopped Laplace noise-reduction loss is bounded by delta1 / t_stop.

    Also checks mean exp(L - delta1/t_stop) <= 1 + 3 SE.  The share of
    transcripts with loss exactly +delta1/t_stop goes in ``details``.
    """
    times = TimeSchedule(schedule).times
    slack, at_max, worst = [], 0, -np.inf
    for n, rng in _blocks(seed, trials, salt=4):
        path = sample_laplace_grid(times, n, rng)
        idx = stopping(times, path)
        tau = times[idx]
        x = path[np.arange(n), idx]
        loss = laplace_nr_privacy_loss(tau, x, delta1)
        worst = max(worst, float(np.max(np.abs(loss) - delta1 / tau)))
        at_max += int(np.sum(loss == delta1 / tau))
        slack.append(np.exp(loss - delta1 / tau))
    mean, se = _mean_se(np.concatenate(slack))
    bounded = worst <= 1e-12
    return AuditReport(
        name=f"laplace_nr_loss(delta1={delta1:g})",
        trials=trials,
        statistic=mean,
        threshold=1.0 + 3.0 * se,
        standard_error=se,
        passed=bounded and mean <= 1.0 + 3.0 * se,
        seed=seed,
        rule="|L| <= delta1/t and mean exp(L - delta1/t) <= 1 + 3 SE",
        details={"max_excess": worst, "share_at_max": at_max / trials},
    )


def laplace_marginal_check(
    times=(2.0, 1.0, 0.5), trials: int = 100_000, seed: int = 0, level: float = 0.001
) -> list[AuditReport]:
    """KS test of X(t) ~ Laplace(t) at every grid point after backward refinement."""
    times = TimeSchedule(times).times
    path = sample_laplace_grid(times, trials, make_rng(np.random.SeedSequence([seed, 5])))
    reports = []
    for j, t in enumerate(times):
        res = stats.kstest(path[:, j], stats.laplace(scale=t).cdf)
        reports.append(
            AuditReport(
                name=f"laplace_marginal(t={t:g})",
                trials=trials,
                statistic=float(res.statistic),
                threshold=float(stats.kstwo.ppf(1.0 - level, trials)),
                standard_error=0.0,
                passed=bool(res.pvalue > level),
                seed=seed,
                rule=f"KS p-value > {level:g}",
            )
        )
    return reports


def laplace_flatness_check(
    t: float = 2.0, t_next: float = 1.0, trials: int = 100_000, seed: int = 0, tol: float = 0.01
) -> AuditReport:
    rng = make_rng(np.random.SeedSequence([seed, 6]))
    path = sample_laplace_grid([t, t_next], trials, rng)
    freq = float(np.mean(path[:, 0] == path[:, 1]))
    target = (t_next / t) ** 2
    return AuditReport(
        name=f"laplace_flatness({t:g}->{t_next:g})",
        trials=trials,
        statistic=freq,
        threshold=tol,
        standard_error=math.sqrt(target * (1 - target) / trials),
        passed=abs(freq - target) <= tol,
        seed=seed,
        rule=f"|freq - {target:g}| <= {tol:g}",
    )


# ----------------------------------------------------------- default suite


DEFAULT_LAMBDAS = (-1.0, -0.5, 0.5, 1.0, 2.0)
EVALUE_SCHEDULE = TimeSchedule([1.0, 0.5, 0.25])
NR_SCHEDULE = TimeSchedule(np.geomspace(4.0, 0.04, 10))
TAIL_COARSE = TimeSchedule.from_squared_epsilons(np.linspace(0.1, 2.0, 10))
TAIL_FINE = TimeSchedule.from_squared_epsilons(np.linspace(0.5, 8.0, 10))


def adaptive_product_stages(lam: float) -> list[Stage]:
    """Two fixed-length runs then a third whose schedule depends on the sign
    of the first stopped value; stops are greedy in the direction of lam."""
    greedy = greedy_path_stop(1.0 if lam >= 0 else -1.0)
    short = TimeSchedule([2.0, 1.0])
    return [
        Stage.fixed(EVALUE_SCHEDULE, greedy),
        Stage.fixed(short, fixed_path_stop(2)),
        Stage(
            ((EVALUE_SCHEDULE, greedy), (short, fixed_path_stop(1))),
            choose=lambda scaled, inv: (scaled[:, 0] < 0).astype(int),
        ),
    ]


def tail_stages() -> list[Stage]:
    """Three adaptive runs: later schedules switch on the running loss."""
    greedy = greedy_path_stop(1.0)

    def choose(scaled, inv):
        return (scaled.sum(axis=1) < 0).astype(int)

    return [
        Stage.fixed(TAIL_COARSE, greedy),
        Stage(((TAIL_COARSE, greedy), (TAIL_FINE, greedy)), choose=choose),
        Stage(((TAIL_COARSE, greedy), (TAIL_FINE, greedy)), choose=choose),
    ]


def _suite_evalue(trials, seed):
    out = []
    for lam in DEFAULT_LAMBDAS:
        for label, stop in (("fixed", fixed_path_stop(3)), ("greedy", greedy_path_stop(np.sign(lam)))):
            r = evalue_single_bnr(EValueSpec(lam, EVALUE_SCHEDULE, stop), trials, seed)
            r.name = f"evalue_single(lam={lam:g},{label})"
            out.append(r)
        out.append(evalue_product_sessions(lam, adaptive_product_stages(lam), trials, seed))
    return out


def _suite_identity(trials, seed):
    n = min(trials, 1000)
    return [
        nr_loss_identity_check(NR_SCHEDULE, None, 1.0, n, seed, d=1),
        nr_loss_identity_check(NR_SCHEDULE, None, 1.0, n, seed, d=3),
    ]


def _suite_tail(trials, seed):
    out = [expost_tail_check(tail_stages(), "theorem", 0.05, g, trials, seed) for g in (0.01, 0.1, 1.0)]
    out.append(expost_tail_check(tail_stages(), "per_mechanism", 0.05, 0.1, trials, seed))
    return out


def _suite_laplace(trials, seed):
    out = laplace_marginal_check((2.0, 1.0, 0.5), trials, seed)
    out.append(laplace_flatness_check(2.0, 1.0, trials, seed))
    out.append(laplace_nr_loss_check(TimeSchedule([4.0, 2.0, 1.0]), fixed_path_stop(3), 1.0, trials, seed))
    return out


AUDITS: dict[str, Callable[[int, int], list[AuditReport]]] = {
    "evalue": _suite_evalue,
    "nr_identity": _suite_identity,
    "expost_tail": _suite_tail,
    "laplace": _suite_laplace,
}


def run_audits(names: Sequence[str] | str = "all", trials: int = 100_000, seed: int = 0) -> list[AuditReport]:
    if names == "all" or names == ["all"]:
        names = list(AUDITS)
    elif isinstance(names, str):
        names = [names]
    unknown = [n for n in names if n not in AUDITS]
    if unknown:
        raise ValueError(f"unknown audit(s) {unknown}; choose from {sorted(AUDITS)}")
    reports = []
    for name in names:
        reports.extend(AUDITS[name](trials, seed))
    return reports
