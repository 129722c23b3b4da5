"""Relative-error release experiment: Brownian noise reduction vs. doubling.

Each session repeatedly picks a top count with the Gumbel exponential
mechanism and then tries to release it within relative error ``alpha``,
either with one Brownian noise reduction over a squared-parameter grid
(charged through :class:`UnifiedFilter`) or by re-running Gaussian
mechanisms with doubled squared parameters (charged through
:class:`ZcdpFilter`).  Both share the same (epsilon, delta'') budget.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .accounting import Decision, UnifiedFilter, ZcdpFilter, exact, smallest_feasible_time
from .core import TimeSchedule
from .mechanisms import (
    RelativeErrorStop,
    StatisticQuery,
    brownian_noise_reduction,
    em_zcdp_charge,
    exponential_mechanism_argmax,
    gaussian_mechanism,
    relative_error_condition,
)
from .processes import make_rng

METHODS = ("brownian", "doubling")
CSV_FIELDS = ("n", "method", "trial", "num_returned", "num_correct", "precision", "rho_spent")
DEFAULT_N_LIST = (8000, 16000, 32000, 64000, 128000)


@dataclass(frozen=True)
class ZipfSpec:
    a: float = 0.75
    k_max: int = 300
    n: int = 8000
    seed: int = 0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("Zipf exponent must be positive")
        if self.k_max < 1 or self.n < 1:
            raise ValueError("k_max and n must be at least 1")


def zipf_probabilities(a: float, k_max: int) -> np.ndarray:
    w = np.arange(1, k_max + 1, dtype=np.float64) ** -a
    return w / w.sum()


def zipf_histogram(spec: ZipfSpec, rng=None) -> np.ndarray:
    """Counts of ``spec.n`` i.i.d. draws from P[k] proportional to k^-a on 1..k_max."""
    rng = make_rng(spec.seed if rng is None else rng)
    return rng.multinomial(spec.n, zipf_probabilities(spec.a, spec.k_max)).astype(np.int64)


class HistogramFormatError(ValueError):
    pass


def ingest_histogram(path, top_k: int | None = None) -> list[tuple[str, int]]:
    """Read ``label,count`` lines.  Blank lines are skipped.

    The label is everything before the last comma.  With ``top_k`` only the
    ``top_k`` largest counts are kept (ties keep file order).
    """
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            label, sep, count = line.rpartition(",")
            if not sep:
                raise HistogramFormatError(f"line {lineno}: expected 'label,count'")
            try:
                value = int(count.strip())
            except ValueError:
                raise HistogramFormatError(f"line {lineno}: count {count.strip()!r} is not an integer") from None
            if value < 0:
                raise HistogramFormatError(f"line {lineno}: negative count {value}")
            out.append((label, value))
    if top_k is not None:
        if top_k < 1:
            raise ValueError("top_k must be positive")
        order = sorted(range(len(out)), key=lambda i: -out[i][1])[:top_k]
        out = [out[i] for i in order]
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    epsilon_budget: float = 10.0
    delta_budget: float = 1e-6
    eps_em: float = 0.1
    alpha: float = 0.1
    eps_min_sq: float = 1e-4
    grid_points: int = 1000
    trials: int = 1000
    method: str = "brownian"
    seed: int = 0
    a: float = 0.75
    k_max: int = 300
    n_list: tuple = DEFAULT_N_LIST
    allow_repeats: bool = False

    def __post_init__(self):
        if not self.eps_min_sq > 0:
            raise ValueError("eps_min_sq must be positive")
        if self.grid_points < 2:
            raise ValueError("grid_points must be at least 2")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.trials < 1:
            raise ValueError("trials must be positive")
        if not self.eps_em > 0:
            raise ValueError("eps_em must be positive")


@dataclass
class TrialResult:
    num_queries_attempted: int = 0
    num_returned: int = 0
    num_correct: int = 0
    rho_spent: float = 0.0
    halted: bool = False

    @property
    def precision(self) -> float:
        return 1.0 if self.num_returned == 0 else self.num_correct / self.num_returned


def squared_grid(eps_min_sq: float, remaining: Fraction, grid_points: int) -> TimeSchedule:
    """Times 1/eps^2 for equally spaced eps^2 from ``eps_min_sq`` to 2 * remaining.

    The last time is nudged so that stopping there costs at most
    ``remaining`` exactly.  If even ``eps_min_sq`` does not fit, the one-point
    schedule at ``eps_min_sq`` is returned and the filter will refuse it.
    """
    t_last = smallest_feasible_time(remaining)
    t_first = 1.0 / eps_min_sq
    if t_last >= t_first:
        return TimeSchedule([t_first])
    times = 1.0 / np.linspace(eps_min_sq, 2.0 * float(remaining), grid_points)
    times[-1] = t_last
    keep = np.ones(times.size, dtype=bool)
    keep[1:] = times[1:] < np.minimum.accumulate(times)[:-1]
    return TimeSchedule(times[keep])


def is_correct(noisy: float, true: float, alpha: float) -> bool:
    if true == 0:
        return False
    return bool(abs(noisy / true - 1.0) < alpha)


def _release_brownian(filt: UnifiedFilter, count: float, cfg: ExperimentConfig, rng, stop):
    schedule = squared_grid(cfg.eps_min_sq, filt.remaining_rho, cfg.grid_points)
    if filt.admit_bnr(schedule) is Decision.HALTED:
        return None
    tr = brownian_noise_reduction(StatisticQuery([count]), schedule, stop, seed=rng)
    filt.settle_bnr(tr.final_time)
    return float(tr.final_value[0]) if tr.satisfied else math.nan


@dataclass
class DoublingRun:
    """Attempts of one doubling release: squared parameters and noisy answers."""

    squared: list = field(default_factory=list)
    answers: list = field(default_factory=list)
    satisfied: bool = False
    refused: bool = False

    @property
    def total_squared(self) -> float:
        return float(sum(self.squared))

    @property
    def final_answer(self) -> float:
        return self.answers[-1] if self.satisfied else math.nan


def doubling_release(count: float, eps_min_sq: float, alpha: float, rng, spend=None) -> DoublingRun:
    """Gaussian releases with squared parameter eps_min_sq * 2^i until the predicate holds.

    ``spend(rho)`` is asked before each attempt; a HALTED answer ends the run
    as refused.  Without ``spend`` the budget is unlimited.
    """
    rng = make_rng(rng)
    run = DoublingRun()
    sq = float(eps_min_sq)
    while True:
        if spend is not None and spend(exact(sq) / 2) is Decision.HALTED:
            run.refused = True
            return run
        noisy = float(gaussian_mechanism(StatisticQuery([count]), sq, seed=rng)[0])
        run.squared.append(sq)
        run.answers.append(noisy)
        if relative_error_condition(noisy, math.sqrt(sq), alpha):
            run.satisfied = True
            return run
        sq *= 2.0


def run_accuracy_first_session(counts, cfg: ExperimentConfig, rng=None) -> TrialResult:
    """One session: select, release, repeat until the filter halts.

    Each round pays the selection charge first.  Once no candidate is left the
    selection has nothing to return but is still charged, so every session
    ends in the halted state.  Results that never meet the stopping condition
    are discarded but still paid for.
    """
    counts = np.asarray(counts, dtype=np.float64).ravel()
    rng = make_rng(cfg.seed if rng is None else rng)
    if cfg.method == "brownian":
        filt = UnifiedFilter.for_dp_target(cfg.epsilon_budget, cfg.delta_budget, variant="experiment")
        admit_em = filt.admit_zcdp
    else:
        filt = ZcdpFilter(cfg.epsilon_budget, 0.0, cfg.delta_budget)
        admit_em = filt.try_spend
    stop = RelativeErrorStop(cfg.alpha)
    em_charge = exact(em_zcdp_charge(cfg.eps_em))
    result = TrialResult()
    returned = np.zeros(counts.size, dtype=bool)

    while not filt.halted:
        if admit_em(em_charge) is Decision.HALTED or filt.halted:
            break
        eligible = counts.size > 0 and (cfg.allow_repeats or not returned.all())
        if not eligible:
            continue
        exclude = None if cfg.allow_repeats else returned
        idx = exponential_mechanism_argmax(counts, cfg.eps_em, seed=rng, exclude=exclude)
        result.num_queries_attempted += 1
        if cfg.method == "brownian":
            noisy = _release_brownian(filt, counts[idx], cfg, rng, stop)
        else:
            run = doubling_release(counts[idx], cfg.eps_min_sq, cfg.alpha, rng, spend=filt.try_spend)
            noisy = None if run.refused else run.final_answer
        if noisy is None:
            break
        if not math.isnan(noisy):
            returned[idx] = True
            result.num_returned += 1
            result.num_correct += is_correct(noisy, counts[idx], cfg.alpha)

    result.rho_spent = float(filt.spent_rho)
    result.halted = filt.halted
    return result


# ------------------------------------------------------------ experiment


def _trial_seeds(seed: int, n: int, trial: int, method: str):
    data = np.random.SeedSequence([seed, n, trial])
    mech = np.random.SeedSequence([seed, n, trial, 1 + METHODS.index(method)])
    return data, mech


def _run_cell(args) -> list[dict]:
    cfg, n, method, counts = args
    rows = []
    run_cfg = replace(cfg, method=method)
    for trial in range(cfg.trials):
        data_seed, mech_seed = _trial_seeds(cfg.seed, n, trial, method)
        hist = counts if counts is not None else zipf_histogram(
            ZipfSpec(cfg.a, cfg.k_max, n), rng=make_rng(data_seed)
        )
        res = run_accuracy_first_session(hist, run_cfg, make_rng(mech_seed))
        rows.append(
            {
                "n": n,
                "method": method,
                "trial": trial,
                "num_returned": res.num_returned,
                "num_correct": res.num_correct,
                "precision": res.precision,
                "rho_spent": res.rho_spent,
                "halted": res.halted,
            }
        )
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation rows per (n, method), in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["n"], r["method"]), []).append(r)
    out = []
    for (n, method), rs in groups.items():
        for label, fn in (("mean", statistics.fmean), ("std", statistics.pstdev)):
            out.append(
                {
                    "n": n,
                    "method": method,
                    "trial": label,
                    **{k: fn([float(r[k]) for r in rs]) for k in CSV_FIELDS[3:]},
                }
            )
    return out


def run_experiment(
    cfg: ExperimentConfig,
    n_list=None,
    methods=METHODS,
    workers: int = 1,
    counts=None,
) -> list[dict]:
    """Per-trial rows for every (n, method), followed by mean/std rows.

    With ``counts`` given (ingested histogram) the same data is reused in every
    trial and ``n`` is its total count.
    """
    if counts is not None:
        counts = np.asarray(counts, dtype=np.int64)
        cells = [(cfg, int(counts.sum()), m, counts) for m in methods]
    else:
        cells = [(cfg, int(n), m, None) for n in (n_list or cfg.n_list) for m in methods]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    rows = [r for cell in results for r in cell]
    return rows + aggregate(rows)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in rows:
        writer.writerow([_fmt(r[k]) for k in CSV_FIELDS])
    return buf.getvalue()


def write_csv(rows: list[dict], path) -> None:
    Path(path).write_text(rows_to_csv(rows), encoding="utf-8", newline="\n")


def summarize(rows: list[dict]) -> dict[tuple, dict]:
    return {(r["n"], r["method"]): r for r in rows if r["trial"] == "mean"}


def config_from_mapping(values: dict) -> ExperimentConfig:
    """Build a config from string or typed values, ignoring unknown keys."""
    kinds = {f.name: f for f in fields(ExperimentConfig)}
    kwargs = {}
    for key, raw in values.items():
        key = key.replace("-", "_")
        if key not in kinds or raw is None:
            continue
        default = kinds[key].default
        if isinstance(raw, str):
            if isinstance(default, bool):
                raw = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                raw = int(raw)
            elif isinstance(default, float):
                raw = float(raw)
            elif isinstance(default, tuple):
                raw = tuple(int(x) for x in raw.replace(",", " ").split())
        kwargs[key] = raw
    return ExperimentConfig(**kwargs)
