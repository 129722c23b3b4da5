"""Command line entry point: ``accuracy-first {zipf-experiment,histogram-run,audit}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import audit, bench

log = logging.getLogger("accuracy_first")

# CLI flag -> ExperimentConfig field
_FLAG_FIELDS = {
    "n_list": "n_list",
    "trials": "trials",
    "alpha": "alpha",
    "epsilon": "epsilon_budget",
    "delta": "delta_budget",
    "eps_em": "eps_em",
    "eps_min_sq": "eps_min_sq",
    "grid_points": "grid_points",
    "method": "method",
    "seed": "seed",
}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _add_experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value file; command line flags override it")
    p.add_argument("--n-list", type=lambda s: tuple(int(x) for x in s.replace(",", " ").split()))
    p.add_argument("--trials", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--eps-em", type=float)
    p.add_argument("--eps-min-sq", type=float)
    p.add_argument("--grid-points", type=int)
    p.add_argument("--method", choices=(*bench.METHODS, "both"))
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="CSV path (default: stdout)")


def _merged(args) -> tuple[bench.ExperimentConfig, tuple, int]:
    values = read_config_file(args.config) if args.config else {}
    # config files may use either flag names or field names
    values = {_FLAG_FIELDS.get(k, k): v for k, v in values.items()}
    for flag, name in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    method = values.pop("method", "both")
    workers = args.workers if args.workers is not None else int(values.pop("workers", 1))
    values.pop("workers", None)
    methods = bench.METHODS if method == "both" else (method,)
    cfg = bench.config_from_mapping({**values, "method": methods[0]})
    return cfg, methods, workers


def _emit(text: str, out):
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _report(rows):
    for (n, method), r in bench.summarize(rows).items():
        log.info(
            "n=%s %-8s returned=%.2f precision=%.3f rho=%.4f",
            n, method, r["num_returned"], r["precision"], r["rho_spent"],
        )


def cmd_zipf(args) -> int:
    cfg, methods, workers = _merged(args)
    rows = bench.run_experiment(cfg, methods=methods, workers=workers)
    _report(rows)
    _emit(bench.rows_to_csv(rows), args.out)
    return 0


def cmd_histogram(args) -> int:
    cfg, methods, workers = _merged(args)
    labeled = bench.ingest_histogram(args.input, top_k=args.top_k)
    counts = np.array([c for _, c in labeled], dtype=np.int64)
    rows = bench.run_experiment(cfg, methods=methods, workers=workers, counts=counts)
    _report(rows)
    _emit(bench.rows_to_csv(rows), args.out)
    return 0


def cmd_audit(args) -> int:
    reports = audit.run_audits(args.check, trials=args.trials, seed=args.seed)
    for r in reports:
        print(r.line(), file=sys.stderr if not args.out else sys.stdout)
    if args.out:
        Path(args.out).write_text(audit.summary_csv(reports), encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(audit.summary_csv(reports))
    return 0 if all(r.passed for r in reports) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="accuracy-first")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    z = sub.add_parser("zipf-experiment", help="Brownian vs doubling on Zipf histograms")
    _add_experiment_flags(z)
    z.set_defaults(func=cmd_zipf)

    h = sub.add_parser("histogram-run", help="same comparison on a label,count file")
    _add_experiment_flags(h)
    h.add_argument("--input", required=True)
    h.add_argument("--top-k", type=int)
    h.set_defaults(func=cmd_histogram)

    a = sub.add_parser("audit", help="Monte Carlo checks of the privacy accounting")
    a.add_argument("--check", default="all", choices=(*audit.AUDITS, "all"))
    a.add_argument("--trials", type=int, default=100_000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
